"""Bag-of-words prompt encoder standing in for the text encoder.

The vocabulary is closed; a prompt embeds to the mean of its token rows and the
empty prompt maps to a dedicated null row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Rng, derive_seed

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink")
STYLES = ("filled", "outline", "stripes", "checker")
COUNTS = ("one", "two", "three", "single")
FILLERS = (
    "a", "an", "the", "of", "with", "on", "in", "and",
    "image", "picture", "photo", "drawing", "shape", "style", "small", "large",
    "big", "left", "right", "top", "bottom", "center", "background", "bright",
    "dark", "painting", "sketch", "object",
)
DEFAULT_WORDS = SHAPES + COLORS + STYLES + COUNTS + FILLERS
NULL_TOKEN = "<null>"
EMBED_DIM = 32


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered word list plus an embedding table; row 0 is the null embedding."""

    words: tuple[str, ...]
    table: np.ndarray
    seed: int = 0

    @classmethod
    def build(cls, words=DEFAULT_WORDS, dim: int = EMBED_DIM, seed: int = 0) -> "Vocabulary":
        words = tuple(words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary words")
        # row i ~ N(0, 1/dim) from a seed-derived stream; null row first
        rng = Rng(derive_seed(seed, "vocab", dim))
        table = (rng.normal((len(words) + 1, dim), dtype=np.float64) / np.sqrt(dim)).astype(np.float32)
        table.flags.writeable = False
        return cls(words, table, seed)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def null(self) -> np.ndarray:
        return self.table[0]

    def index(self, word: str) -> int:
        try:
            return self._lookup[word] + 1
        except KeyError:
            raise VocabularyError(f"unknown token {word!r}") from None

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def digest(self) -> str:
        h = hashlib.sha256(" ".join(self.words).encode())
        h.update(np.ascontiguousarray(self.table, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def tokenize(text: str) -> list[str]:
    return text.split()


def encode_prompt(text: str, vocab: Vocabulary) -> np.ndarray:
    """Mean of the token rows; ``""`` returns the null row exactly."""
    tokens = tokenize(text)
    if not tokens:
        return vocab.null.copy()
    bad = [w for w in tokens if w not in vocab._lookup]
    if bad:
        raise VocabularyError(f"unknown token(s) {', '.join(repr(w) for w in bad)} in prompt {text!r}")
    rows = vocab.table[[vocab.index(w) for w in tokens]].astype(np.float64)
    # sorted accumulation makes the mean independent of token order bit-for-bit
    rows = rows[np.lexsort(rows.T[::-1])]
    acc = np.zeros(vocab.dim)
    for r in rows:
        acc = acc + r
    return (acc / len(tokens)).astype(np.float32)


def scale_condition(e_pos: np.ndarray, e_neg: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """``alpha * e_pos - beta * e_neg``."""
    if e_pos.shape != e_neg.shape:
        raise DimensionError(f"condition shapes differ: {e_pos.shape} vs {e_neg.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError(f"scaling factors must be non-negative, got alpha={alpha}, beta={beta}")
    return float(alpha) * e_pos - float(beta) * e_neg


@dataclass(frozen=True)
class ConditionBundle:
    e_pos: np.ndarray
    e_neg: np.ndarray
    n: np.ndarray
    c_scaled: np.ndarray
    alpha: float
    beta: float

    @property
    def c_tilde(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Conditions in chunk order (src, pos, neg)."""
        return (self.n, self.e_pos, self.e_neg)


def bundle(p_pos: str, p_neg: str, alpha: float, beta: float, vocab: Vocabulary) -> ConditionBundle:
    e_pos = encode_prompt(p_pos, vocab)
    e_neg = encode_prompt(p_neg, vocab)
    n = encode_prompt("", vocab)
    return ConditionBundle(e_pos, e_neg, n, scale_condition(e_pos, e_neg, alpha, beta), alpha, beta)
