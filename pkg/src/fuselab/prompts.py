"""Rule-based extraction of attribute-entity pairs from prompts.

A lexicon drives everything: attribute words (grouped as color, shape
adjective, texture), entity nouns, and stop words. The binding rule is
adjacency with stop words skipped: an attribute binds the next entity word
unless a non-stop, non-attribute word intervenes, and an entity takes only
the nearest preceding attribute. This is deterministic and exactly right on
the synthetic grammar the trainer uses; anything outside the grammar
degrades to fewer pairs, never to an error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

ATTRIBUTE_CATEGORIES = ("color", "shape_adj", "texture")

DEFAULT_STOP_WORDS = frozenset({"a", "an", "the", "and", "of", "with"})


@dataclass(frozen=True)
class Lexicon:
    attributes: dict[str, frozenset[str]]  # category -> words
    entities: frozenset[str]
    stop_words: frozenset[str] = DEFAULT_STOP_WORDS

    def __post_init__(self):
        attr_words = self.attribute_words()
        overlap = attr_words & self.entities
        if overlap:
            raise ValueError(f"attribute and entity sets overlap: {sorted(overlap)}")

    def attribute_words(self) -> frozenset[str]:
        out: set[str] = set()
        for words in self.attributes.values():
            out |= words
        return frozenset(out)

    def save(self, path: str | Path) -> None:
        """Line-delimited ``category<TAB>word``; stop words use category ``stop``."""
        lines = []
        for cat in sorted(self.attributes):
            for w in sorted(self.attributes[cat]):
                lines.append(f"{cat}\t{w}")
        lines += [f"entity\t{w}" for w in sorted(self.entities)]
        lines += [f"stop\t{w}" for w in sorted(self.stop_words)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        attributes: dict[str, set[str]] = {}
        entities: set[str] = set()
        stops: set[str] = set()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                category, word = line.split("\t")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'category<TAB>word'") from exc
            if category == "entity":
                entities.add(word)
            elif category == "stop":
                stops.add(word)
            else:
                attributes.setdefault(category, set()).add(word)
        return cls(attributes={c: frozenset(w) for c, w in attributes.items()},
                   entities=frozenset(entities), stop_words=frozenset(stops))


def default_lexicon() -> Lexicon:
    return Lexicon(
        attributes={
            "color": frozenset({"red", "green", "blue", "yellow"}),
            "shape_adj": frozenset({"big", "small", "tiny"}),
            "texture": frozenset({"striped", "dotted", "shiny"}),
        },
        entities=frozenset({"circle", "square", "triangle", "sheep", "car", "dog", "cat"}),
    )


@dataclass(frozen=True)
class AttributeEntityPair:
    attr_word: str
    entity_word: str
    attr_token_pos: int
    entity_token_pos: int

    def to_json(self) -> str:
        return json.dumps({
            "attr": self.attr_word, "entity": self.entity_word,
            "attr_pos": self.attr_token_pos, "entity_pos": self.entity_token_pos,
        }, sort_keys=True)


def parse(prompt: str, lexicon: Lexicon, window: int = 16) -> list[AttributeEntityPair]:
    """Scan left to right, binding each entity to the nearest preceding attribute.

    Stop words never break adjacency; any other non-lexicon word does. Word
    position equals token position under the toy tokenizer, and pairs whose
    positions fall outside the tokenizer window are dropped.
    """
    attr_words = lexicon.attribute_words()
    pairs: list[AttributeEntityPair] = []
    pending: tuple[str, int] | None = None
    for pos, word in enumerate(prompt.lower().split()):
        if word in lexicon.stop_words:
            continue
        if word in attr_words:
            pending = (word, pos)
        elif word in lexicon.entities:
            if pending is not None:
                attr_word, attr_pos = pending
                if attr_pos < window and pos < window:
                    pairs.append(AttributeEntityPair(attr_word, word, attr_pos, pos))
            pending = None
        else:
            pending = None
    return pairs
