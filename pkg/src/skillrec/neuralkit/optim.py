"""Gradient accumulation and Adam with lazy updates for row-sparse tensors."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .params import ParamSet


class GradientError(RuntimeError):
    """A gradient became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 128
    epochs: int = 10
    patience: int = 2
    dropout: float = 0.2
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class GradBag:
    """Accumulates dense gradients and (rows, values) chunks for embedding tables."""

    def __init__(self):
        self._dense: dict[str, np.ndarray] = {}
        self._rows: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}

    def add(self, name: str, grad: np.ndarray) -> None:
        if name in self._dense:
            self._dense[name] += grad
        else:
            self._dense[name] = np.array(grad, copy=True)

    def add_rows(self, name: str, rows: np.ndarray, grad: np.ndarray) -> None:
        self._rows.setdefault(name, []).append((np.asarray(rows), grad))

    def dense_items(self):
        return self._dense.items()

    def row_items(self):
        """Yield (name, unique_rows, summed_grads) per sparse tensor."""
        for name, chunks in self._rows.items():
            rows = np.concatenate([r for r, _ in chunks])
            vals = np.concatenate([g for _, g in chunks], axis=0)
            uniq, inv = np.unique(rows, return_inverse=True)
            summed = np.zeros((uniq.shape[0], vals.shape[1]), dtype=vals.dtype)
            np.add.at(summed, inv, vals)
            yield name, uniq, summed

    def names(self) -> list[str]:
        return sorted(set(self._dense) | set(self._rows))

    def materialize(self, name: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        """Full-shape gradient for one tensor, scattering any row chunks."""
        out = np.zeros(shape, dtype=dtype)
        if name in self._dense:
            out += self._dense[name]
        for rows, vals in self._rows.get(name, []):
            np.add.at(out, rows, vals)
        return out


class Adam:
    """Adam with bias correction; sparse tensors update only the touched rows."""

    def __init__(self, params: ParamSet, learning_rate: float = 3e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._m:
            shape = self.params[name].shape
            dtype = self.params[name].dtype
            self._m[name] = np.zeros(shape, dtype=dtype)
            self._v[name] = np.zeros(shape, dtype=dtype)
        return self._m[name], self._v[name]

    def step(self, grads: GradBag) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.dense_items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for tensor {name!r}")
            m, v = self._state(name)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p = self.params[name]
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        for name, rows, g in grads.row_items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for tensor {name!r}")
            m, v = self._state(name)
            m_r = self.beta1 * m[rows] + (1.0 - self.beta1) * g
            v_r = self.beta2 * v[rows] + (1.0 - self.beta2) * (g * g)
            m[rows] = m_r
            v[rows] = v_r
            p = self.params[name]
            p[rows] -= self.lr * (m_r / bc1) / (np.sqrt(v_r / bc2) + self.eps)
