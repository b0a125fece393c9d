"""Hashed n-gram text featurizer: the trainable encoders' input representation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_SEED_MIX = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class FeaturizerConfig:
    word_orders: tuple[int, ...] = (1,)
    char_orders: tuple[int, ...] = (3,)
    num_buckets: int = 1 << 18
    hash_seed: int = 0x5EED

    def __post_init__(self):
        d = self.num_buckets
        if d < (1 << 10) or (d & (d - 1)) != 0:
            raise ValueError("num_buckets must be a power of two >= 2**10")

    def to_json(self) -> dict:
        return {
            "word_orders": list(self.word_orders),
            "char_orders": list(self.char_orders),
            "num_buckets": self.num_buckets,
            "hash_seed": self.hash_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeaturizerConfig":
        return cls(
            word_orders=tuple(obj["word_orders"]),
            char_orders=tuple(obj["char_orders"]),
            num_buckets=int(obj["num_buckets"]),
            hash_seed=int(obj["hash_seed"]),
        )


@dataclass
class SparseFeatures:
    """Aggregated (index, weight) pairs; indices unique and sorted, weights unit L2."""

    indices: np.ndarray  # int64
    weights: np.ndarray  # float32
    num_buckets: int

    def __len__(self) -> int:
        return len(self.indices)


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """Seeded 64-bit FNV-1a (multiplicative hash)."""
    h = (_FNV_OFFSET ^ ((seed * _SEED_MIX) & _MASK64)) & _MASK64
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def ngram_keys(text: str, config: FeaturizerConfig) -> list[str]:
    """Enumerate namespaced word and char n-grams of the lowercased text.

    Word grams join tokens with spaces; char grams run over each token padded
    with '<' and '>' (exact-length windows only). Namespaces keep word and
    char grams from colliding pre-hash.
    """
    tokens = tokenize(text)
    keys: list[str] = []
    for n in config.word_orders:
        for i in range(len(tokens) - n + 1):
            keys.append(f"w{n}\x1f" + " ".join(tokens[i : i + n]))
    for n in config.char_orders:
        for tok in tokens:
            padded = "<" + tok + ">"
            for i in range(len(padded) - n + 1):
                keys.append(f"c{n}\x1f" + padded[i : i + n])
    return keys


def featurize(text: str, config: FeaturizerConfig) -> SparseFeatures:
    """Hash all n-grams of the text into [0, num_buckets) with L2-normalized counts."""
    counts: dict[int, int] = {}
    mask = config.num_buckets - 1
    for key in ngram_keys(text, config):
        idx = fnv1a64(key.encode("utf-8"), config.hash_seed) & mask
        counts[idx] = counts.get(idx, 0) + 1
    if not counts:
        return SparseFeatures(
            indices=np.empty(0, dtype=np.int64),
            weights=np.empty(0, dtype=np.float32),
            num_buckets=config.num_buckets,
        )
    indices = np.array(sorted(counts), dtype=np.int64)
    weights = np.array([counts[i] for i in indices], dtype=np.float64)
    weights /= np.linalg.norm(weights)
    return SparseFeatures(indices=indices, weights=weights.astype(np.float32), num_buckets=config.num_buckets)


class FeatureBatch:
    """Flat CSR-like packing of many SparseFeatures for vectorized encoder math."""

    def __init__(self, features: list[SparseFeatures]):
        self.n = len(features)
        self.starts = np.zeros(self.n + 1, dtype=np.int64)
        for i, f in enumerate(features):
            self.starts[i + 1] = self.starts[i] + len(f)
        total = int(self.starts[-1])
        self.indices = np.empty(total, dtype=np.int64)
        self.weights = np.empty(total, dtype=np.float32)
        self.rows = np.empty(total, dtype=np.int64)
        for i, f in enumerate(features):
            lo, hi = self.starts[i], self.starts[i + 1]
            self.indices[lo:hi] = f.indices
            self.weights[lo:hi] = f.weights
            self.rows[lo:hi] = i

    def subset(self, row_ids: np.ndarray) -> "FeatureBatch":
        out = FeatureBatch.__new__(FeatureBatch)
        out.n = len(row_ids)
        lens = self.starts[row_ids + 1] - self.starts[row_ids]
        out.starts = np.zeros(out.n + 1, dtype=np.int64)
        np.cumsum(lens, out=out.starts[1:])
        total = int(out.starts[-1])
        out.indices = np.empty(total, dtype=np.int64)
        out.weights = np.empty(total, dtype=np.float32)
        out.rows = np.empty(total, dtype=np.int64)
        for j, r in enumerate(row_ids):
            src_lo, src_hi = self.starts[r], self.starts[r + 1]
            lo, hi = out.starts[j], out.starts[j + 1]
            out.indices[lo:hi] = self.indices[src_lo:src_hi]
            out.weights[lo:hi] = self.weights[src_lo:src_hi]
            out.rows[lo:hi] = j
        return out
