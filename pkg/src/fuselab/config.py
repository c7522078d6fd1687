"""Flat key-value experiment configuration.

The on-disk grammar is one ``key = value`` per line, ``#`` comments, blank
lines ignored. Keys are fixed by the schema below; unknown or duplicate keys
are hard errors, and every field has a documented default so an empty file
is a valid config. ``dump_config`` followed by ``load_config`` reproduces an
equal config, which the harness relies on when it archives the effective
config next to each run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .fusion import FusionVariant


class ConfigError(ValueError):
    """Invalid config file or field value (CLI exit code 1)."""


@dataclass
class ExperimentConfig:
    seed: int = 7
    out_dir: str = "runs"
    # frozen encoders
    text_seq: int = 16
    text_dim: int = 32
    llm_seq: int = 32
    llm_dim: int = 48
    # conditioning fusion
    fusion_variant: str = "adapter_q_llm"
    fusion_lambda: float = 1.0
    fusion_mode: str = "concat"
    fusion_attn_dim: int = 32
    cam_unscaled: bool = False
    # noise schedule
    schedule_steps: int = 100
    schedule_beta_min: float = 1e-4
    schedule_beta_max: float = 0.02
    # denoiser
    denoiser_dim: int = 32
    denoiser_layers: int = 2
    denoiser_ff_dim: int = 64
    # trainer
    train_steps: int = 2000
    train_batch: int = 8
    train_lr: float = 1e-3
    train_alpha: float = 0.1
    # sampler
    sampler_steps: int = 50
    sampler_guidance: float = 7.5
    # dataset and evaluation
    data_size: int = 256
    data_entities: int = 2
    eval_samples: int = 12

    def variant(self) -> FusionVariant:
        return FusionVariant(self.fusion_variant)


# key in the file -> dataclass attribute; order here is the dump order
SCHEMA: dict[str, str] = {
    "seed": "seed",
    "out.dir": "out_dir",
    "encoder.text_seq": "text_seq",
    "encoder.text_dim": "text_dim",
    "encoder.llm_seq": "llm_seq",
    "encoder.llm_dim": "llm_dim",
    "fusion.variant": "fusion_variant",
    "fusion.lambda": "fusion_lambda",
    "fusion.mode": "fusion_mode",
    "fusion.attn_dim": "fusion_attn_dim",
    "cam_unscaled": "cam_unscaled",
    "schedule.steps": "schedule_steps",
    "schedule.beta_min": "schedule_beta_min",
    "schedule.beta_max": "schedule_beta_max",
    "denoiser.dim": "denoiser_dim",
    "denoiser.layers": "denoiser_layers",
    "denoiser.ff_dim": "denoiser_ff_dim",
    "train.steps": "train_steps",
    "train.batch": "train_batch",
    "train.lr": "train_lr",
    "train.alpha": "train_alpha",
    "sampler.steps": "sampler_steps",
    "sampler.guidance": "sampler_guidance",
    "data.size": "data_size",
    "data.entities": "data_entities",
    "eval.samples": "eval_samples",
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, attr: str, raw: str):
    kind = _FIELD_TYPES[attr]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        attr = SCHEMA[key]
        cfg = replace(cfg, **{attr: _parse_value(key, attr, raw)})
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["# effective configuration (all keys explicit)"]
    for key, attr in SCHEMA.items():
        lines.append(f"{key} = {_format_value(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig) -> None:
    def need(cond: bool, message: str) -> None:
        if not cond:
            raise ConfigError(message)

    need(cfg.seed >= 0, f"seed must be non-negative, got {cfg.seed}")
    for name in ("text_seq", "text_dim", "llm_seq", "llm_dim", "fusion_attn_dim",
                 "denoiser_dim", "denoiser_layers", "denoiser_ff_dim",
                 "schedule_steps", "train_steps", "train_batch", "data_size"):
        need(getattr(cfg, name) >= 1, f"{name} must be >= 1")
    try:
        FusionVariant(cfg.fusion_variant)
    except ValueError:
        choices = ", ".join(v.value for v in FusionVariant)
        raise ConfigError(f"fusion.variant must be one of: {choices}") from None
    need(cfg.fusion_mode in ("concat", "sum"), "fusion.mode must be 'concat' or 'sum'")
    need(cfg.fusion_lambda >= 0, "fusion.lambda must be non-negative")
    need(0 < cfg.schedule_beta_min <= cfg.schedule_beta_max < 1,
         "schedule betas must satisfy 0 < min <= max < 1")
    need(cfg.train_lr > 0, "train.lr must be positive")
    need(cfg.train_alpha >= 0, "train.alpha must be non-negative")
    need(1 <= cfg.sampler_steps <= cfg.schedule_steps,
         "sampler.steps must lie in [1, schedule.steps]")
    need(cfg.data_entities in (1, 2), "data.entities must be 1 or 2")
    need(cfg.eval_samples >= 0, "eval.samples must be non-negative")
