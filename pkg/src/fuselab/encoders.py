"""Frozen deterministic text encoders.

Two stand-in encoders produce the feature sequences consumed by the fusion
module: a short/narrow "text" encoder and a longer/wider "llm" encoder. Both
are pure functions of (seed, tokens): a per-token embedding table drawn once
from a seeded Philox stream, plus a fixed sinusoidal position signal. Neither
carries gradients; the fusion adapter is the only trainable bridge between
them and the denoiser.

The widths differ on purpose (default 32 vs 48) so the adapter's projections
cannot degenerate to identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import PhiloxStream, STREAM_LLM_TABLE, STREAM_TEXT_TABLE
from .tensor import Tensor

PAD = "<pad>"
UNK = "<unk>"

POSITION_AMPLITUDE = 0.1


class Vocabulary:
    """Dense token -> index map; ``<pad>`` is always index 0, ``<unk>`` index 1."""

    def __init__(self, words: list[str]):
        tokens = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary words must be unique")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[UNK])

    def word(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the index."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 2 or lines[0] != PAD or lines[1] != UNK:
            raise ValueError(f"vocabulary file {path} must start with {PAD} then {UNK}")
        return cls(lines[2:])


def default_word_list() -> list[str]:
    """Grammar words plus the parser lexicon's attribute and entity words."""
    words = {
        "a", "an", "the", "and",
        "red", "green", "blue", "yellow",
        "circle", "square", "triangle",
        "big", "small", "tiny",
        "striped", "dotted", "shiny",
        "sheep", "car", "dog", "cat",
    }
    return sorted(words)


def tokenize(prompt: str, vocab: Vocabulary, length: int) -> list[int]:
    """Lowercase, whitespace-split, look up, then pad/truncate to ``length``.

    Word position i lands at token position i, so parser positions are token
    positions directly.
    """
    ids = [vocab.id(w) for w in prompt.lower().split()][:length]
    return ids + [0] * (length - len(ids))


def sinusoid_positions(seq_len: int, dim: int) -> np.ndarray:
    """Fixed position signal: interleaved sin/cos with geometric wavelengths."""
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / dim)
    out = np.zeros((seq_len, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return POSITION_AMPLITUDE * out


class FrozenEncoder:
    """Embedding-table lookup plus position signal; never trainable."""

    def __init__(self, seed: int, stream: int, vocab_size: int, seq_len: int, dim: int):
        self.seq_len = seq_len
        self.dim = dim
        self.table = PhiloxStream(seed, stream).normal((vocab_size, dim))
        self.positions = sinusoid_positions(seq_len, dim)

    def encode(self, token_ids: list[int]) -> Tensor:
        if len(token_ids) > self.seq_len:
            raise ValueError(f"got {len(token_ids)} tokens for window {self.seq_len}")
        ids = np.asarray(token_ids + [0] * (self.seq_len - len(token_ids)), dtype=np.int64)
        return Tensor(self.table[ids] + self.positions)


@dataclass
class ConditioningPair:
    """The two frozen feature sequences for one prompt, plus token bookkeeping."""

    text_feats: Tensor
    llm_feats: Tensor
    token_ids: list[int]
    token_spans: dict[int, int] = field(default_factory=dict)


class EncoderPair:
    """Bundles the two frozen encoders behind one prompt -> features call."""

    def __init__(self, seed: int, vocab: Vocabulary,
                 text_seq: int = 16, text_dim: int = 32,
                 llm_seq: int = 32, llm_dim: int = 48):
        self.vocab = vocab
        self.text = FrozenEncoder(seed, STREAM_TEXT_TABLE, len(vocab), text_seq, text_dim)
        self.llm = FrozenEncoder(seed, STREAM_LLM_TABLE, len(vocab), llm_seq, llm_dim)

    def encode_prompt(self, prompt: str) -> ConditioningPair:
        words = prompt.lower().split()
        ids = tokenize(prompt, self.vocab, self.text.seq_len)
        spans = {i: i for i in range(min(len(words), self.text.seq_len))}
        llm_ids = tokenize(prompt, self.vocab, self.llm.seq_len)
        return ConditioningPair(
            text_feats=self.text.encode(ids),
            llm_feats=self.llm.encode(llm_ids),
            token_ids=ids,
            token_spans=spans,
        )
