"""Training loop state and orchestration.

A ``Trainer`` owns everything one run needs: frozen encoders, trainable
fusion and denoiser parameters, Adam moments, the dataset, and the loss
history. Randomness is counter-based: step k draws its batch indices,
timesteps, and noise from a stream keyed by (seed, k), so resuming from a
checkpoint replays the exact remainder of the run, bit for bit.

Checkpoints are a single ``.npz``: a format version, the effective config
text, every parameter and Adam moment under its stable name, the step
counter, and the loss history. float64 arrays round-trip losslessly.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .config import ExperimentConfig, dump_config, parse_config_text, validate_config
from .dataset import IMG_POSITIONS, Example, eval_prompts, make_dataset
from .denoiser import denoise, freeze_denoiser, init_denoiser_params
from .diffusion import AdamState, NoiseSchedule, adam_step, ddim_sample, q_sample, reg_loss
from .encoders import EncoderPair, Vocabulary, default_word_list
from .fusion import fusion_variant_forward, variant_params
from .prompts import default_lexicon, parse
from .rng import PhiloxStream, STREAM_PARAMS, train_step_stream
from .tensor import NonFiniteError, Tensor, add, backward, mse, scale, zero_grads

STREAM_EVAL_LOSS = 7

CHECKPOINT_VERSION = 1


class TrainingDiverged(ArithmeticError):
    """Loss went non-finite; carries the step and recent history."""

    def __init__(self, step: int, history_tail: dict[str, list[float]]):
        self.step = step
        self.history_tail = history_tail
        super().__init__(f"non-finite loss at step {step}; recent losses: {history_tail}")


class Trainer:
    def __init__(self, cfg: ExperimentConfig, dataset: list[Example] | None = None):
        validate_config(cfg)
        self.cfg = cfg
        self.vocab = Vocabulary(default_word_list())
        self.lexicon = default_lexicon()
        self.encoders = EncoderPair(
            cfg.seed, self.vocab,
            text_seq=cfg.text_seq, text_dim=cfg.text_dim,
            llm_seq=cfg.llm_seq, llm_dim=cfg.llm_dim,
        )
        self.sched = NoiseSchedule.linear(cfg.schedule_steps, cfg.schedule_beta_min,
                                          cfg.schedule_beta_max)
        self.variant = cfg.variant()
        self.adapter_scale = 1.0 if cfg.cam_unscaled else None

        init_rng = PhiloxStream(cfg.seed, STREAM_PARAMS)
        self.fusion_params = variant_params(self.variant, cfg.text_dim, cfg.llm_dim,
                                            cfg.fusion_attn_dim, init_rng)
        self.denoiser = init_denoiser_params(
            cfg.denoiser_dim, cfg.text_dim, cfg.denoiser_ff_dim, cfg.schedule_steps,
            cfg.denoiser_layers, IMG_POSITIONS, init_rng)

        self.params: dict[str, Tensor] = {}
        if self.fusion_params is not None:
            self.params.update(self.fusion_params.named("fusion"))
        self.params.update(self.denoiser.named("den"))
        self.opt = AdamState.zeros_for(self.params)
        self.step = 0
        self.history: dict[str, list[float]] = {"l_simple": [], "l_reg": [], "total": []}
        self.dataset = dataset if dataset is not None else make_dataset(
            cfg.data_size, cfg.seed, cfg.data_entities)

    # -- conditioning ------------------------------------------------------

    def conditioning(self, prompt: str, fusion_params=None, lam: float | None = None):
        """Fused conditioning plus the parsed attribute-entity pairs."""
        if fusion_params is None:
            fusion_params = self.fusion_params
        if lam is None:
            lam = self.cfg.fusion_lambda
        pair = self.encoders.encode_prompt(prompt)
        cond = fusion_variant_forward(self.variant, pair, fusion_params, lam,
                                      self.adapter_scale)
        pairs = parse(prompt, self.lexicon, window=self.cfg.text_seq)
        return cond, pairs

    # -- training ----------------------------------------------------------

    def training_step(self, batch: list[Example], rng: PhiloxStream,
                      alpha: float | None = None, lam: float | None = None) -> dict[str, float]:
        """One optimizer update on a batch; draws t and noise from ``rng``."""
        if alpha is None:
            alpha = self.cfg.train_alpha
        cond_cache: dict[str, tuple] = {}
        simple_acc = None
        reg_acc = None
        try:
            for ex in batch:
                if ex.prompt not in cond_cache:
                    cond_cache[ex.prompt] = self.conditioning(ex.prompt, lam=lam)
                cond, pairs = cond_cache[ex.prompt]
                t = int(rng.integers(self.sched.t_steps))
                eps = Tensor(rng.normal(ex.image.shape))
                x_t = q_sample(Tensor(ex.image), t, eps, self.sched)
                eps_hat, maps = denoise(x_t, t, cond, self.denoiser,
                                        mode=self.cfg.fusion_mode)
                item_simple = mse(eps_hat, eps)
                item_reg = reg_loss(maps, pairs)
                simple_acc = item_simple if simple_acc is None else add(simple_acc, item_simple)
                reg_acc = item_reg if reg_acc is None else add(reg_acc, item_reg)
            inv = 1.0 / len(batch)
            l_simple = scale(simple_acc, inv)
            l_reg = scale(reg_acc, inv)
            total = add(l_simple, scale(l_reg, alpha))
            zero_grads(self.params.values())
            backward(total)
            adam_step(self.params, self.opt, self.cfg.train_lr, self.step + 1)
        except NonFiniteError as exc:
            raise TrainingDiverged(self.step, self._history_tail()) from exc
        self.step += 1
        metrics = {"l_simple": l_simple.item(), "l_reg": l_reg.item(), "total": total.item()}
        for k, v in metrics.items():
            self.history[k].append(v)
        return metrics

    def step_once(self) -> dict[str, float]:
        """Draw the next step's batch from its own stream and update once."""
        rng = PhiloxStream(self.cfg.seed, train_step_stream(self.step))
        idx = rng.integers(len(self.dataset), (self.cfg.train_batch,))
        batch = [self.dataset[int(i)] for i in idx]
        return self.training_step(batch, rng)

    def _history_tail(self, n: int = 5) -> dict[str, list[float]]:
        return {k: v[-n:] for k, v in self.history.items()}

    # -- frozen evaluation -------------------------------------------------

    def frozen_fusion_params(self):
        if self.fusion_params is None:
            return None
        cls = type(self.fusion_params)
        return cls(**{f.name: Tensor(getattr(self.fusion_params, f.name).data.copy())
                      for f in dataclasses.fields(cls)})

    def sample(self, prompt: str, seed: int, steps: int | None = None,
               guidance: float | None = None, lam: float | None = None) -> np.ndarray:
        """DDIM sample for one prompt on frozen parameter snapshots."""
        steps = self.cfg.sampler_steps if steps is None else steps
        guidance = self.cfg.sampler_guidance if guidance is None else guidance
        frozen_fusion = self.frozen_fusion_params()
        frozen_den = freeze_denoiser(self.denoiser)
        cond, _ = self.conditioning(prompt, fusion_params=frozen_fusion, lam=lam)
        uncond, _ = self.conditioning("", fusion_params=frozen_fusion, lam=lam)
        return ddim_sample(frozen_den, self.sched, cond, uncond, steps, guidance, seed,
                           mode=self.cfg.fusion_mode)

    def evaluate_color_accuracy(self, lam: float | None = None) -> tuple[float, list[str]]:
        """Sample held-out prompts and score color binding; nan when disabled."""
        from .dataset import color_accuracy

        n = self.cfg.eval_samples
        if n == 0:
            return float("nan"), []
        prompts = eval_prompts(n, self.cfg.seed, self.cfg.data_entities)
        samples = [self.sample(p, seed=self.cfg.seed + i, lam=lam)
                   for i, p in enumerate(prompts)]
        return color_accuracy(samples, prompts, self.lexicon), prompts

    def evaluate_losses(self, lam: float | None = None, n_items: int = 32) -> dict[str, float]:
        """Deterministic frozen-parameter losses on dataset draws (no update)."""
        rng = PhiloxStream(self.cfg.seed, STREAM_EVAL_LOSS)
        frozen_fusion = self.frozen_fusion_params()
        frozen_den = freeze_denoiser(self.denoiser)
        cond_cache: dict[str, tuple] = {}
        simple_vals = []
        reg_vals = []
        for _ in range(n_items):
            ex = self.dataset[int(rng.integers(len(self.dataset)))]
            if ex.prompt not in cond_cache:
                cond_cache[ex.prompt] = self.conditioning(
                    ex.prompt, fusion_params=frozen_fusion, lam=lam)
            cond, pairs = cond_cache[ex.prompt]
            t = int(rng.integers(self.sched.t_steps))
            eps = Tensor(rng.normal(ex.image.shape))
            x_t = q_sample(Tensor(ex.image), t, eps, self.sched)
            eps_hat, maps = denoise(x_t, t, cond, frozen_den, mode=self.cfg.fusion_mode)
            simple_vals.append(mse(eps_hat, eps).item())
            reg_vals.append(reg_loss(maps, pairs).item())
        return {"l_simple": float(np.mean(simple_vals)), "l_reg": float(np.mean(reg_vals))}

    # -- checkpointing -----------------------------------------------------

    def save(self, path) -> None:
        payload: dict[str, np.ndarray] = {
            "meta": np.array(json.dumps({"version": CHECKPOINT_VERSION,
                                         "step": self.step, "seed": self.cfg.seed})),
            "config": np.array(dump_config(self.cfg)),
        }
        for name, p in self.params.items():
            payload[f"param.{name}"] = p.data
            payload[f"adam_m.{name}"] = self.opt.m[name]
            payload[f"adam_v.{name}"] = self.opt.v[name]
        for key, values in self.history.items():
            payload[f"history.{key}"] = np.asarray(values, dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path, dataset: list[Example] | None = None) -> "Trainer":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"][()]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            cfg = parse_config_text(str(z["config"][()]), base=ExperimentConfig())
            trainer = cls(cfg, dataset=dataset)
            for name, p in trainer.params.items():
                p.data = z[f"param.{name}"].copy()
                trainer.opt.m[name] = z[f"adam_m.{name}"].copy()
                trainer.opt.v[name] = z[f"adam_v.{name}"].copy()
            trainer.step = meta["step"]
            trainer.history = {key: list(map(float, z[f"history.{key}"]))
                               for key in ("l_simple", "l_reg", "total")}
        return trainer

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything that defines the run state, for bitwise comparisons."""
        out = {"step": np.asarray(self.step)}
        for name, p in self.params.items():
            out[f"param.{name}"] = p.data
            out[f"adam_m.{name}"] = self.opt.m[name]
            out[f"adam_v.{name}"] = self.opt.v[name]
        for key, values in self.history.items():
            out[f"history.{key}"] = np.asarray(values, dtype=np.float64)
        return out
