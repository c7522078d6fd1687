"""Diffusion primitives: schedule, forward noising, losses, optimizer, sampler.

Training minimizes the standard noise-prediction MSE plus a weighted
attention-map penalty that pulls each attribute token's map toward its
entity token's map. Sampling is plain deterministic DDIM with
classifier-free guidance; guidance 1 and 0 short-circuit to the conditional
and unconditional branches so those contracts hold bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import AttentionMaps, DenoiserParams, denoise
from .fusion import FusedConditioning
from .prompts import AttributeEntityPair
from .rng import PhiloxStream, STREAM_SAMPLER
from .tensor import NonFiniteError, Tensor, add, mul, scale, sub, tsum


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("schedule needs a 1-d beta array")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if (np.diff(b) < 0).any():
            raise ValueError("betas must be non-decreasing")

    @property
    def t_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, t_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_min, beta_max, t_steps)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def q_sample(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise x0 to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.t_steps:
        raise ValueError(f"t={t} outside [0, {sched.t_steps})")
    ab = sched.alpha_bars[t]
    return add(scale(x0, np.sqrt(ab)), scale(eps, np.sqrt(1.0 - ab)))


def reg_loss(maps: AttentionMaps, pairs: list[AttributeEntityPair]) -> Tensor:
    """Mean squared distance between attribute and entity attention columns.

    Averages the squared L2 gap over pairs and layers; no pairs means an
    exact zero (the paired mean is undefined there, and the prompt simply
    carries no binding to enforce).
    """
    if not pairs:
        return Tensor(0.0)
    total = None
    for pair in pairs:
        for layer in range(len(maps)):
            gap = sub(maps.column(layer, pair.attr_token_pos),
                      maps.column(layer, pair.entity_token_pos))
            term = tsum(mul(gap, gap))
            total = term if total is None else add(total, term)
    return scale(total, 1.0 / (len(pairs) * len(maps)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_for(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], opt: AdamState, lr: float, step: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update; ``step`` is 1-based for the bias correction.

    Non-finite gradients are an error here, not a silent freeze: adjoint
    buffers are raw arrays, so overflow in backward surfaces at this boundary.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient for {name!r} is non-finite")
        opt.m[name] = beta1 * opt.m[name] + (1.0 - beta1) * g
        opt.v[name] = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        m_hat = opt.m[name] / (1.0 - beta1**step)
        v_hat = opt.v[name] / (1.0 - beta2**step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# sampling


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    """eps_u + g (eps_c - eps_u); exact passthrough at g in {0, 1}."""
    if guidance == 1.0:
        return eps_cond
    if guidance == 0.0:
        return eps_uncond
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def ddim_timesteps(t_steps: int, steps: int) -> np.ndarray:
    if steps > t_steps:
        raise ValueError(f"{steps} sampling steps exceed the {t_steps}-step schedule")
    if steps < 1:
        raise ValueError("need at least one sampling step")
    if steps == 1:
        return np.array([t_steps - 1], dtype=np.int64)
    return np.round(np.linspace(t_steps - 1, 0, steps)).astype(np.int64)


def ddim_sample(params: DenoiserParams, sched: NoiseSchedule, cond: FusedConditioning,
                uncond: FusedConditioning, steps: int, guidance: float, seed: int,
                att_scale: float | None = None, mode: str = "concat") -> np.ndarray:
    """Deterministic (eta=0) DDIM from seeded noise; clamps to [-1, 1] at the end.

    Pass frozen parameter/conditioning snapshots: sampling never needs the
    tape and runs much lighter without it.
    """
    rng = PhiloxStream(seed, STREAM_SAMPLER)
    x = rng.normal((params.n_positions, 3))
    ts = ddim_timesteps(sched.t_steps, steps)
    for i, t in enumerate(ts):
        t = int(t)
        eps_c, _ = denoise(Tensor(x), t, cond, params, att_scale, mode=mode)
        if guidance == 1.0:
            eps = eps_c.data
        else:
            eps_u, _ = denoise(Tensor(x), t, uncond, params, att_scale, mode=mode)
            eps = cfg_combine(eps_c.data, eps_u.data, guidance)
        ab_t = sched.alpha_bars[t]
        x0_pred = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        ab_prev = sched.alpha_bars[int(ts[i + 1])] if i + 1 < len(ts) else 1.0
        x = np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps
    return np.clip(x, -1.0, 1.0)
