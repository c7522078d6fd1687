"""Conditioning fusion: bridge the llm features onto the text features.

The main path is a single-head cross-attention adapter (llm features as
queries, text features as keys/values, all projections trainable) whose
output is scaled by a balance factor and concatenated ahead of the raw text
features. Ablation variants swap the query/key-value roles, replace the
adapter with a two-layer MLP, or drop pieces entirely.

``conditioned_cross_attention`` evaluates a denoiser-side attention layer
against the fused sequence in two ways: ``concat`` (one softmax over the
whole key set, the form actually trained) and ``sum`` (two independent
attentions combined linearly). It is tempting to treat the two as equal,
but softmax normalization does not distribute over key blocks; the audit
tooling exists to measure that gap rather than assume it away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .encoders import ConditioningPair
from .rng import PhiloxStream
from .tensor import (
    Tensor,
    add,
    concat_rows,
    linear,
    matmul,
    scale,
    softmax_rows,
    tanh,
    transpose,
)


class FusionVariant(str, Enum):
    BASELINE = "baseline"                # text features only
    MLP_ONLY = "mlp_only"                # text replaced by MLP-projected llm feats
    CROSS_ATTN_ONLY = "cross_attn_only"  # text replaced by the adapter output
    MLP_CONCAT = "mlp_concat"            # MLP-projected llm feats, concatenated
    ADAPTER_Q_TEXT = "adapter_q_text"    # adapter with text as queries, llm as keys/values
    ADAPTER_Q_LLM = "adapter_q_llm"      # the main path: llm queries, text keys/values


# row order of ablation summaries, weakest baseline first
ABLATION_ORDER = [
    FusionVariant.BASELINE,
    FusionVariant.MLP_ONLY,
    FusionVariant.CROSS_ATTN_ONLY,
    FusionVariant.MLP_CONCAT,
    FusionVariant.ADAPTER_Q_TEXT,
    FusionVariant.ADAPTER_Q_LLM,
]


@dataclass
class AdapterParams:
    """Trainable projections of the cross-attention adapter."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    w_out: Tensor
    b_out: Tensor

    def named(self, prefix: str = "adapter") -> dict[str, Tensor]:
        return {
            f"{prefix}.{k}": getattr(self, k)
            for k in ("wq", "bq", "wk", "bk", "wv", "bv", "w_out", "b_out")
        }

    @property
    def attn_dim(self) -> int:
        return self.wq.shape[1]


@dataclass
class MlpParams:
    """Two-layer row-wise perceptron used by the MLP variants."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str = "mlp") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def _init_weight(rng: PhiloxStream, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) / math.sqrt(fan_in), requires_grad=True)


def _init_bias(dim: int) -> Tensor:
    return Tensor([0.0] * dim, requires_grad=True)


def init_adapter_params(q_dim: int, kv_dim: int, attn_dim: int, out_dim: int,
                        rng: PhiloxStream) -> AdapterParams:
    return AdapterParams(
        wq=_init_weight(rng, q_dim, attn_dim), bq=_init_bias(attn_dim),
        wk=_init_weight(rng, kv_dim, attn_dim), bk=_init_bias(attn_dim),
        wv=_init_weight(rng, kv_dim, attn_dim), bv=_init_bias(attn_dim),
        w_out=_init_weight(rng, attn_dim, out_dim), b_out=_init_bias(out_dim),
    )


def init_mlp_params(in_dim: int, hidden: int, out_dim: int, rng: PhiloxStream) -> MlpParams:
    return MlpParams(
        w1=_init_weight(rng, in_dim, hidden), b1=_init_bias(hidden),
        w2=_init_weight(rng, hidden, out_dim), b2=_init_bias(out_dim),
    )


def variant_params(variant: FusionVariant, text_dim: int, llm_dim: int, attn_dim: int,
                   rng: PhiloxStream):
    """Build the trainable parameters a variant needs (None for the baseline)."""
    if variant is FusionVariant.BASELINE:
        return None
    if variant in (FusionVariant.MLP_ONLY, FusionVariant.MLP_CONCAT):
        return init_mlp_params(llm_dim, attn_dim, text_dim, rng)
    if variant is FusionVariant.ADAPTER_Q_TEXT:
        return init_adapter_params(text_dim, llm_dim, attn_dim, text_dim, rng)
    return init_adapter_params(llm_dim, text_dim, attn_dim, text_dim, rng)


def adapter_attention(q_src: Tensor, kv_src: Tensor, params: AdapterParams,
                      att_scale: float | None = None) -> Tensor:
    """Single-head cross-attention with an output projection back to text width.

    ``att_scale=None`` selects the conventional 1/sqrt(attn_dim); pass 1.0 to
    reproduce the unscaled form exactly.
    """
    if att_scale is None:
        att_scale = 1.0 / math.sqrt(params.attn_dim)
    q = linear(q_src, params.wq, params.bq)
    k = linear(kv_src, params.wk, params.bk)
    v = linear(kv_src, params.wv, params.bv)
    weights = softmax_rows(matmul(q, transpose(k)), att_scale)
    return linear(matmul(weights, v), params.w_out, params.b_out)


def mlp_project(x: Tensor, params: MlpParams) -> Tensor:
    return linear(tanh(linear(x, params.w1, params.b1)), params.w2, params.b2)


@dataclass
class FusedConditioning:
    """The conditioning sequence fed to denoiser cross-attention.

    ``boundary`` is the row index separating the two blocks of ``sequence``
    (0 when the sequence is a single block). On the main path the rows before
    the boundary are ``lam * llm_block`` and the rows after are the raw text
    features. ``text_start`` is the row where the block indexed by parser
    token positions begins; attention-map extraction adds it as an offset.
    ``llm_block`` keeps the unscaled source of the lam-scaled block so the
    decomposed ``sum`` attention form can be evaluated against the trained
    ``concat`` form.
    """

    sequence: Tensor
    boundary: int
    lam: float
    text_start: int
    llm_block: Tensor | None = None
    text_block: Tensor | None = None


def fuse(bridged: Tensor, text_feats: Tensor, lam: float) -> FusedConditioning:
    """Concatenate the lam-scaled bridged block ahead of the text features.

    lam == 0 drops the block entirely (zero-valued keys would still soak up
    softmax mass, so zero rows would not recover the text-only baseline).
    Negative lam is rejected; the sweep domain is [0, 2].
    """
    if lam < 0:
        raise ValueError(f"balance factor must be non-negative, got {lam}")
    if bridged.shape[1] != text_feats.shape[1]:
        raise ValueError(
            f"feature dims differ: bridged {bridged.shape} vs text {text_feats.shape}")
    if lam == 0.0:
        return FusedConditioning(sequence=text_feats, boundary=0, lam=0.0,
                                 text_start=0, llm_block=None, text_block=text_feats)
    seq = concat_rows(scale(bridged, lam), text_feats)
    return FusedConditioning(sequence=seq, boundary=bridged.shape[0], lam=lam,
                             text_start=bridged.shape[0], llm_block=bridged,
                             text_block=text_feats)


def baseline_conditioning(text_feats: Tensor) -> FusedConditioning:
    return FusedConditioning(sequence=text_feats, boundary=0, lam=0.0,
                             text_start=0, llm_block=None, text_block=text_feats)


def fusion_variant_forward(variant: FusionVariant, pair: ConditioningPair, params,
                           lam: float, att_scale: float | None = None) -> FusedConditioning:
    """Produce the conditioning sequence for one variant.

    Concat variants honor ``lam`` (with the drop-block rule at 0); the
    replace variants ignore it since there is no second block to balance.
    """
    text_feats, llm_feats = pair.text_feats, pair.llm_feats
    if variant is FusionVariant.BASELINE:
        if params is not None:
            raise ValueError("baseline takes no fusion parameters")
        return baseline_conditioning(text_feats)

    if variant in (FusionVariant.MLP_ONLY, FusionVariant.MLP_CONCAT):
        if not isinstance(params, MlpParams):
            raise ValueError(f"{variant.value} needs MlpParams, got {type(params).__name__}")
        projected = mlp_project(llm_feats, params)
        if variant is FusionVariant.MLP_ONLY:
            return FusedConditioning(sequence=projected, boundary=0, lam=lam, text_start=0)
        return fuse(projected, text_feats, lam)

    if not isinstance(params, AdapterParams):
        raise ValueError(f"{variant.value} needs AdapterParams, got {type(params).__name__}")

    if variant is FusionVariant.ADAPTER_Q_TEXT:
        # swapped roles: queries from text, keys/values from llm; the attended
        # block rides behind the raw text features
        attended = adapter_attention(text_feats, llm_feats, params, att_scale)
        if lam < 0:
            raise ValueError(f"balance factor must be non-negative, got {lam}")
        if lam == 0.0:
            return FusedConditioning(sequence=text_feats, boundary=0, lam=0.0,
                                     text_start=0, text_block=text_feats)
        seq = concat_rows(text_feats, scale(attended, lam))
        return FusedConditioning(sequence=seq, boundary=text_feats.shape[0], lam=lam,
                                 text_start=0, llm_block=attended, text_block=text_feats)

    bridged = adapter_attention(llm_feats, text_feats, params, att_scale)
    if variant is FusionVariant.CROSS_ATTN_ONLY:
        return FusedConditioning(sequence=bridged, boundary=0, lam=lam, text_start=0)
    return fuse(bridged, text_feats, lam)


# ---------------------------------------------------------------------------
# denoiser-side attention over the fused sequence


@dataclass
class AttnProjections:
    """Query/key/value projections of one denoiser cross-attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wq", "bq", "wk", "bk", "wv", "bv")}


def init_attn_projections(x_dim: int, cond_dim: int, rng: PhiloxStream) -> AttnProjections:
    return AttnProjections(
        wq=_init_weight(rng, x_dim, x_dim), bq=_init_bias(x_dim),
        wk=_init_weight(rng, cond_dim, x_dim), bk=_init_bias(x_dim),
        wv=_init_weight(rng, cond_dim, x_dim), bv=_init_bias(x_dim),
    )


def cross_attention(x: Tensor, context: Tensor, proj: AttnProjections,
                    att_scale: float) -> tuple[Tensor, Tensor]:
    """softmax(Q.K^T * scale).V with Q from x, K/V from context.

    Returns the attended values and the attention weights (latent positions
    by context rows); the weights are what the map regularizer reads.
    """
    q = linear(x, proj.wq, proj.bq)
    k = linear(context, proj.wk, proj.bk)
    v = linear(context, proj.wv, proj.bv)
    weights = softmax_rows(matmul(q, transpose(k)), att_scale)
    return matmul(weights, v), weights


def conditioned_cross_attention(x: Tensor, cond: FusedConditioning,
                                proj: AttnProjections, mode: str = "concat",
                                att_scale: float | None = None) -> Tensor:
    """Attend from latent rows to the fused conditioning, in either form.

    ``concat``: one normalized softmax over every row of ``cond.sequence``
    (the canonical, trained form). ``sum``: lam * CA(x, llm_block) +
    CA(x, text_block), the decomposed form; it needs the two source blocks,
    so single-block conditionings fall back to one attention, which makes
    the two modes agree exactly when the scaled block was dropped.
    """
    if att_scale is None:
        att_scale = 1.0 / math.sqrt(proj.wq.shape[1])
    if mode == "concat":
        out, _ = cross_attention(x, cond.sequence, proj, att_scale)
        return out
    if mode != "sum":
        raise ValueError(f"unknown attention mode {mode!r}")
    if cond.llm_block is None or cond.lam == 0.0:
        base = cond.text_block if cond.text_block is not None else cond.sequence
        out, _ = cross_attention(x, base, proj, att_scale)
        return out
    if cond.text_block is None:
        out, _ = cross_attention(x, cond.llm_block, proj, att_scale)
        return scale(out, cond.lam)
    out_llm, _ = cross_attention(x, cond.llm_block, proj, att_scale)
    out_text, _ = cross_attention(x, cond.text_block, proj, att_scale)
    return add(scale(out_llm, cond.lam), out_text)
