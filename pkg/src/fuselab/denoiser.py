"""Toy noise-prediction network conditioned through cross-attention.

Images are flattened to a grid of positions (rows) with 3 channels. The
network is a row-wise input projection plus a fixed sinusoidal position
signal and a trainable timestep embedding, two cross-attention layers over
the fused conditioning sequence (each followed by a pointwise feed-forward,
both residual), and a row-wise output projection back to 3 channels.

Every cross-attention layer surfaces its attention weights so the
attribute-entity regularizer can read per-token columns from the same
forward pass that produced the noise prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .encoders import sinusoid_positions
from .fusion import AttnProjections, FusedConditioning, cross_attention, init_attn_projections
from .rng import PhiloxStream
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_row,
    linear,
    scale,
    take_col,
    take_row,
    tanh,
)


@dataclass
class CrossAttnLayer:
    proj: AttnProjections
    wo: Tensor
    bo: Tensor
    ff1: Tensor
    fb1: Tensor
    ff2: Tensor
    fb2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.proj.named(prefix)
        out.update({f"{prefix}.{k}": getattr(self, k)
                    for k in ("wo", "bo", "ff1", "fb1", "ff2", "fb2")})
        return out


@dataclass
class DenoiserParams:
    w_in: Tensor
    b_in: Tensor
    t_table: Tensor
    layers: list[CrossAttnLayer]
    w_out: Tensor
    b_out: Tensor
    positions: Tensor  # fixed sinusoid, not trainable

    def named(self, prefix: str = "den") -> dict[str, Tensor]:
        out = {f"{prefix}.w_in": self.w_in, f"{prefix}.b_in": self.b_in,
               f"{prefix}.t_table": self.t_table}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.l{i}"))
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    @property
    def width(self) -> int:
        return self.w_in.shape[1]

    @property
    def n_positions(self) -> int:
        return self.positions.shape[0]


def _weight(rng: PhiloxStream, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True)


def _bias(dim: int) -> Tensor:
    return Tensor([0.0] * dim, requires_grad=True)


def init_denoiser_params(width: int, cond_dim: int, ff_dim: int, t_steps: int,
                         n_layers: int, n_positions: int, rng: PhiloxStream,
                         channels: int = 3) -> DenoiserParams:
    layers = []
    for _ in range(n_layers):
        layers.append(CrossAttnLayer(
            proj=init_attn_projections(width, cond_dim, rng),
            wo=_weight(rng, width, width), bo=_bias(width),
            ff1=_weight(rng, width, ff_dim), fb1=_bias(ff_dim),
            ff2=_weight(rng, ff_dim, width), fb2=_bias(width),
        ))
    return DenoiserParams(
        w_in=_weight(rng, channels, width), b_in=_bias(width),
        t_table=Tensor(0.02 * rng.normal((t_steps, width)), requires_grad=True),
        layers=layers,
        w_out=_weight(rng, width, channels), b_out=_bias(channels),
        positions=Tensor(sinusoid_positions(n_positions, width)),
    )


def freeze_denoiser(params: DenoiserParams) -> DenoiserParams:
    """Snapshot with requires_grad off everywhere; sampling stays off the tape."""
    def frozen(t: Tensor) -> Tensor:
        return Tensor(t.data.copy())

    return DenoiserParams(
        w_in=frozen(params.w_in), b_in=frozen(params.b_in),
        t_table=frozen(params.t_table),
        layers=[CrossAttnLayer(
            proj=AttnProjections(**{k: frozen(getattr(l.proj, k))
                                    for k in ("wq", "bq", "wk", "bk", "wv", "bv")}),
            wo=frozen(l.wo), bo=frozen(l.bo),
            ff1=frozen(l.ff1), fb1=frozen(l.fb1),
            ff2=frozen(l.ff2), fb2=frozen(l.fb2),
        ) for l in params.layers],
        w_out=frozen(params.w_out), b_out=frozen(params.b_out),
        positions=params.positions,
    )


class AttentionMaps:
    """Per-layer attention weights plus the offset into the text block.

    Each layer holds a (positions x conditioning rows) tensor whose rows sum
    to one. Token-indexed columns are read at ``text_start + token_pos`` so
    parser positions keep meaning regardless of how the conditioning
    sequence was assembled.
    """

    def __init__(self, layers: list[Tensor], text_start: int):
        self.layers = layers
        self.text_start = text_start

    def __len__(self) -> int:
        return len(self.layers)

    def column(self, layer: int, token_pos: int) -> Tensor:
        weights = self.layers[layer]
        col = self.text_start + token_pos
        if token_pos < 0 or col >= weights.shape[1]:
            raise ShapeError(
                f"token position {token_pos} is outside the conditioning layout "
                f"(text block starts at {self.text_start}, {weights.shape[1]} rows total)")
        return take_col(weights, col)


def denoise(x_t: Tensor, t: int, cond: FusedConditioning, params: DenoiserParams,
            att_scale: float | None = None, mode: str = "concat") -> tuple[Tensor, AttentionMaps]:
    """Predict the noise in ``x_t`` and capture every layer's attention map.

    ``mode`` picks how each layer reads the conditioning: ``concat`` attends
    once over the whole fused sequence (the canonical path); ``sum`` runs the
    decomposed form, scaling the attended block output by the balance factor.
    Under ``sum`` the captured maps cover the text block alone, so token
    columns start at offset zero. Single-block conditionings collapse the two
    modes onto the same arithmetic.
    """
    if x_t.shape[0] != params.n_positions:
        raise ShapeError(
            f"input has {x_t.shape[0]} positions, network was built for {params.n_positions}")
    if not 0 <= t < params.t_table.shape[0]:
        raise ValueError(f"timestep {t} outside table of {params.t_table.shape[0]} steps")
    if mode not in ("concat", "sum"):
        raise ValueError(f"unknown attention mode {mode!r}")
    if att_scale is None:
        att_scale = 1.0 / math.sqrt(params.width)
    decomposed = (mode == "sum" and cond.llm_block is not None and cond.lam != 0.0
                  and cond.text_block is not None)

    h = linear(x_t, params.w_in, params.b_in)
    h = add(h, params.positions)
    h = add_row(h, take_row(params.t_table, t))
    maps = []
    for layer in params.layers:
        if decomposed:
            out_llm, _ = cross_attention(h, cond.llm_block, layer.proj, att_scale)
            att, weights = cross_attention(h, cond.text_block, layer.proj, att_scale)
            att = add(scale(out_llm, cond.lam), att)
            maps.append(weights)
        else:
            att, weights = cross_attention(h, cond.sequence, layer.proj, att_scale)
            maps.append(weights)
        h = add(h, linear(att, layer.wo, layer.bo))
        h = add(h, linear(tanh(linear(h, layer.ff1, layer.fb1)), layer.ff2, layer.fb2))
    eps_hat = linear(h, params.w_out, params.b_out)
    return eps_hat, AttentionMaps(maps, 0 if decomposed else cond.text_start)
