"""Experiment orchestration: full runs, sweeps, ablations, and audits.

Every operation takes an explicit config and output directory, derives any
per-point seeds from the base seed plus the point index, and writes both
delimited metrics and a matplotlib rendering of them into that directory.
Metric files are byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config
from .dataset import IMG_SIDE, unflatten_image
from .denoiser import denoise, freeze_denoiser
from .fusion import (
    ABLATION_ORDER,
    FusionVariant,
    conditioned_cross_attention,
    fuse,
    init_attn_projections,
)
from .rng import PhiloxStream
from .reports import (
    format_cell,
    save_ablation_figure,
    save_audit_figure,
    save_heatmap_grid,
    save_image,
    save_lambda_sweep_figure,
    save_loss_curves,
    write_csv,
    write_pgm,
)
from .tensor import Tensor
from .train import Trainer

STREAM_AUDIT = 8
STREAM_HEATMAP = 9

METRICS_HEADER = ["step", "l_simple", "l_reg", "total"]
SUMMARY_HEADER = ["variant", "lambda", "alpha", "steps",
                  "first100_l_simple", "final100_l_simple", "final100_l_reg",
                  "color_accuracy"]

DEFAULT_LAMBDA_GRID = [round(0.2 * i, 1) for i in range(11)]  # 0.0 .. 2.0


def _window_mean(values: list[float], last: bool, width: int = 100) -> float:
    width = min(width, len(values))
    chunk = values[-width:] if last else values[:width]
    return float(np.mean(chunk))


def run_train(cfg: ExperimentConfig, out_dir: str | Path,
              trainer: Trainer | None = None) -> dict:
    """Train to cfg.train_steps, then checkpoint, evaluate, and report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    trainer = trainer or Trainer(cfg)
    trainer.vocab.save(out / "vocab.txt")
    trainer.lexicon.save(out / "lexicon.txt")

    # metrics are appended as each step finishes, not buffered to the end
    with open(out / "metrics.csv", "w", encoding="utf-8") as metrics_fh:
        metrics_fh.write(",".join(METRICS_HEADER) + "\n")
        while trainer.step < cfg.train_steps:
            metrics = trainer.step_once()
            row = [trainer.step, metrics["l_simple"], metrics["l_reg"], metrics["total"]]
            metrics_fh.write(",".join(format_cell(v) for v in row) + "\n")
    save_loss_curves(trainer.history, out / "loss_curves.png")
    trainer.save(out / "checkpoint.npz")

    color_acc, _ = trainer.evaluate_color_accuracy()
    summary = {
        "variant": cfg.fusion_variant,
        "lambda": cfg.fusion_lambda,
        "alpha": cfg.train_alpha,
        "steps": cfg.train_steps,
        "first100_l_simple": _window_mean(trainer.history["l_simple"], last=False),
        "final100_l_simple": _window_mean(trainer.history["l_simple"], last=True),
        "final100_l_reg": _window_mean(trainer.history["l_reg"], last=True),
        "color_accuracy": color_acc,
    }
    write_csv(out / "summary.csv", SUMMARY_HEADER, [[summary[k] for k in SUMMARY_HEADER]])
    return {"trainer": trainer, "summary": summary, "out": out,
            "metrics_csv": out / "metrics.csv", "checkpoint": out / "checkpoint.npz"}


def run_sample(cfg: ExperimentConfig, checkpoint: str | Path, prompt: str,
               out_dir: str | Path, sample_seed: int | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.load(checkpoint)
    if cfg.sampler_steps > trainer.cfg.schedule_steps:
        raise ConfigError(
            f"sampler.steps = {cfg.sampler_steps} exceeds the checkpoint's "
            f"{trainer.cfg.schedule_steps}-step schedule")
    seed = cfg.seed if sample_seed is None else sample_seed
    img = trainer.sample(prompt, seed=seed, steps=cfg.sampler_steps,
                         guidance=cfg.sampler_guidance)
    np.save(out / "sample.npy", img)
    save_image(unflatten_image(img), out / "sample.png", title=prompt)
    return {"out": out, "image": img}


SWEEP_HEADER = ["lambda", "seed", "l_simple", "l_reg", "color_accuracy"]


def run_lambda_sweep(cfg: ExperimentConfig, lambdas: list[float], out_dir: str | Path,
                     eval_only: bool = False, checkpoint: str | Path | None = None) -> dict:
    """Train (or re-evaluate one checkpoint) at each balance factor.

    The qualitative sweep shape is reported in the figure and CSV, never
    asserted: at this scale it is information, not a contract.
    """
    for lam in lambdas:
        if not 0.0 <= lam <= 2.0:
            raise ConfigError(f"sweep balance factor {lam} outside [0, 2]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    if eval_only:
        if checkpoint is None:
            raise ConfigError("--eval-only needs --checkpoint")
        trainer = Trainer.load(checkpoint)
        for lam in lambdas:
            losses = trainer.evaluate_losses(lam=lam)
            acc, _ = trainer.evaluate_color_accuracy(lam=lam)
            rows.append({"lambda": lam, "seed": trainer.cfg.seed,
                         "l_simple": losses["l_simple"], "l_reg": losses["l_reg"],
                         "color_accuracy": acc})
    else:
        for i, lam in enumerate(lambdas):
            sub = replace(cfg, fusion_lambda=lam, seed=cfg.seed + i)
            result = run_train(sub, out / f"lambda_{lam:.1f}")
            s = result["summary"]
            rows.append({"lambda": lam, "seed": sub.seed,
                         "l_simple": s["final100_l_simple"], "l_reg": s["final100_l_reg"],
                         "color_accuracy": s["color_accuracy"]})

    write_csv(out / "sweep.csv", SWEEP_HEADER, [[r[k] for k in SWEEP_HEADER] for r in rows])
    save_lambda_sweep_figure(rows, out / "lambda_sweep.png")
    return {"rows": rows, "out": out, "sweep_csv": out / "sweep.csv"}


ABLATION_HEADER = ["variant", "seed", "first100_l_simple", "final100_l_simple",
                   "final100_l_reg", "color_accuracy"]


def run_ablation(cfg: ExperimentConfig, variants: list[FusionVariant],
                 out_dir: str | Path) -> dict:
    """One full run per fusion variant under identical seed and data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        sub = replace(cfg, fusion_variant=variant.value)
        result = run_train(sub, out / variant.value)
        s = result["summary"]
        rows.append({"variant": variant.value, "seed": sub.seed,
                     "first100_l_simple": s["first100_l_simple"],
                     "final100_l_simple": s["final100_l_simple"],
                     "final100_l_reg": s["final100_l_reg"],
                     "color_accuracy": s["color_accuracy"]})
    write_csv(out / "ablation.csv", ABLATION_HEADER,
              [[r[k] for k in ABLATION_HEADER] for r in rows])
    save_ablation_figure(rows, out / "ablation.png")
    return {"rows": rows, "out": out, "ablation_csv": out / "ablation.csv"}


def run_derivation_audit(cfg: ExperimentConfig, out_dir: str | Path,
                         instances: int = 100,
                         lambdas: list[float] | None = None) -> dict:
    """Measure the gap between the concat and sum attention forms.

    One normalized softmax over concatenated keys is not the sum of two
    normalized softmaxes, so the gap is zero only where the scaled block
    is dropped (balance factor 0). The report records max and mean |gap|
    per balance factor over fresh random instances.
    """
    lambdas = DEFAULT_LAMBDA_GRID if lambdas is None else lambdas
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = PhiloxStream(cfg.seed, STREAM_AUDIT)

    n_latent = 16
    gaps = {lam: [] for lam in lambdas}
    for _ in range(instances):
        x = Tensor(rng.normal((n_latent, cfg.denoiser_dim)))
        bridged = Tensor(rng.normal((cfg.llm_seq, cfg.text_dim)))
        text = Tensor(rng.normal((cfg.text_seq, cfg.text_dim)))
        proj = init_attn_projections(cfg.denoiser_dim, cfg.text_dim, rng)
        for lam in lambdas:
            cond = fuse(bridged, text, lam)
            concat_out = conditioned_cross_attention(x, cond, proj, "concat")
            sum_out = conditioned_cross_attention(x, cond, proj, "sum")
            gaps[lam].append(np.abs(concat_out.data - sum_out.data).max())

    rows = [{"lambda": lam,
             "max_abs_diff": float(np.max(gaps[lam])),
             "mean_abs_diff": float(np.mean(gaps[lam])),
             "exact": bool(np.max(gaps[lam]) == 0.0)} for lam in lambdas]
    report = {"instances": instances, "rows": rows,
              "conclusion": ("the two attention forms agree only when the scaled block "
                             "is dropped (balance factor 0); elsewhere one softmax over "
                             "the concatenated keys differs from the sum of per-block "
                             "softmaxes")}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    lines = [f"derivation audit over {instances} random instances",
             f"{'lambda':>8} {'max|gap|':>12} {'mean|gap|':>12} {'exact':>6}"]
    for r in rows:
        lines.append(f"{r['lambda']:>8.1f} {r['max_abs_diff']:>12.3e} "
                     f"{r['mean_abs_diff']:>12.3e} {str(r['exact']):>6}")
    lines.append(report["conclusion"])
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_audit_figure(rows, out / "derivation_gap.png")
    return {"rows": rows, "out": out, "report_json": out / "report.json"}


def _safe_word(word: str) -> str:
    cleaned = re.sub(r"[^a-z0-9]+", "", word.lower())
    return cleaned or "unk"


def export_attention_heatmaps(checkpoint: str | Path, prompt: str,
                              out_dir: str | Path) -> dict:
    """Write one PGM per (layer, non-pad token) plus a composite grid figure.

    Maps come from a single denoise of seeded noise at the schedule midpoint;
    each map is the latent-position attention column for that token, reshaped
    to the image grid and min-max normalized.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.load(checkpoint)
    cfg = trainer.cfg
    frozen_den = freeze_denoiser(trainer.denoiser)
    cond, _ = trainer.conditioning(prompt, fusion_params=trainer.frozen_fusion_params())
    x = PhiloxStream(cfg.seed, STREAM_HEATMAP).normal((frozen_den.n_positions, 3))
    t_mid = cfg.schedule_steps // 2
    _, maps = denoise(Tensor(x), t_mid, cond, frozen_den, mode=cfg.fusion_mode)

    words = prompt.lower().split()[:cfg.text_seq]
    files = []
    grid_entries = []
    for layer in range(len(maps)):
        for i, word in enumerate(words):
            column = maps.column(layer, i).data.reshape(IMG_SIDE, IMG_SIDE)
            name = f"layer{layer}_tok{i}_{_safe_word(word)}.pgm"
            files.append(write_pgm(out / name, column))
            grid_entries.append((f"L{layer} {word}", column))
    if grid_entries:
        save_heatmap_grid(grid_entries, n_cols=max(1, len(words)),
                          path=out / "heatmaps.png")
    return {"files": files, "out": out, "layers": len(maps), "tokens": len(words)}
