"""Closed-vocabulary tokenizer and embedding lookup for the shape captions."""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")
SHAPES = ("circle", "square", "triangle")
POSITIONS = ("left", "right", "top", "bottom", "center")
FILLER = (
    "empty", "background", "and", "a", "the", "with", "on", "in", "at", "of",
    "image", "shape", "object", "small", "large", "black", "gray", "dark", "plain", "no",
)
UNK = "<unk>"
EMPTY = "<empty>"
PAD = "<pad>"
SPECIALS = (UNK, EMPTY, PAD)
GRAMMAR = COLORS + SHAPES + POSITIONS + FILLER

ROLES = ("local", "background", "global", "negative")

_STRIP = str.maketrans("", "", string.punctuation)


class Vocabulary:
    """Dense ids: specials first, then grammar words in declaration order."""

    def __init__(self, words=GRAMMAR):
        self.words: list[str] = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def empty_id(self) -> int:
        return self.index[EMPTY]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().translate(_STRIP).split()
        if not words:
            return [self.empty_id]
        return [self.index.get(w, self.unk_id) for w in words]

    def detokenize(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if self.words[i] not in (EMPTY, PAD))

    def init_table(self, dim: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.normal(0.0, 1.0, size=(len(self), dim))


@dataclass(frozen=True)
class PromptTokens:
    role: str
    ids: tuple[int, ...]
    embeddings: np.ndarray  # (n, d)

    @property
    def token_count(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    return (vocab or Vocabulary()).tokenize(text)


def encode(text: str, role: str, vocab: Vocabulary, table: np.ndarray) -> PromptTokens:
    if role not in ROLES:
        raise ValueError(f"unknown prompt role {role!r}")
    ids = tuple(vocab.tokenize(text))
    emb = np.asarray(table)[list(ids)].copy()
    emb.setflags(write=False)
    return PromptTokens(role, ids, emb)
