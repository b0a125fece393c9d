"""Forward/backward building blocks: dense, relu, dropout, MLP, masked bidirectional GRU."""
from __future__ import annotations

import numpy as np

from .params import ParamSet


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -softplus(-x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = x @ W
    if b is not None:
        y = y + b
    return y


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray, grads, w_name: str,
                   b_name: str | None = None) -> np.ndarray:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads.add(w_name, x2.T @ dy2)
    if b_name is not None:
        grads.add(b_name, dy2.sum(axis=0))
    return dy @ W.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Inverted-dropout keep mask; multiply activations by it during training."""
    if p <= 0.0:
        return np.ones(shape, dtype=dtype)
    keep = (rng.random(shape) >= p).astype(dtype)
    return keep / np.asarray(1.0 - p, dtype=dtype)


def embed_bag_forward(batch, table: np.ndarray) -> np.ndarray:
    """Per-row weighted sum of embedding rows for a FeatureBatch."""
    out = np.zeros((batch.n, table.shape[1]), dtype=table.dtype)
    if batch.indices.shape[0]:
        np.add.at(out, batch.rows, table[batch.indices] * batch.weights[:, None])
    return out


def embed_bag_backward(d_out: np.ndarray, batch, grads, name: str) -> None:
    if batch.indices.shape[0]:
        grads.add_rows(name, batch.indices, d_out[batch.rows] * batch.weights[:, None])


class MLP:
    """Fully connected stack with relu between layers and no output activation."""

    def __init__(self, prefix: str, sizes: tuple[int, ...], params: ParamSet,
                 rng: np.random.Generator, hidden_dropout: float = 0.0):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = tuple(sizes)
        self.hidden_dropout = float(hidden_dropout)
        for i in range(len(sizes) - 1):
            params.glorot(f"{prefix}.W{i}", (sizes[i], sizes[i + 1]), rng)
            params.zeros(f"{prefix}.b{i}", (sizes[i + 1],))

    @classmethod
    def attach(cls, prefix: str, sizes: tuple[int, ...], hidden_dropout: float = 0.0) -> "MLP":
        """Bind to already-initialized parameters (e.g. after loading a model)."""
        mlp = cls.__new__(cls)
        mlp.prefix = prefix
        mlp.sizes = tuple(sizes)
        mlp.hidden_dropout = float(hidden_dropout)
        return mlp

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray, params: ParamSet, train: bool = False,
                rng: np.random.Generator | None = None):
        cache = []
        h = x
        for i in range(self.num_layers):
            x_in = h
            h = dense_forward(h, params[f"{self.prefix}.W{i}"], params[f"{self.prefix}.b{i}"])
            mask = None
            if i < self.num_layers - 1:
                h = relu(h)
                if train and self.hidden_dropout > 0.0:
                    if rng is None:
                        raise ValueError("training forward needs an rng for dropout")
                    mask = dropout_mask(h.shape, self.hidden_dropout, rng, dtype=h.dtype)
                    h = h * mask
            cache.append((x_in, h, mask))
        return h, cache

    def backward(self, dy: np.ndarray, cache, params: ParamSet, grads) -> np.ndarray:
        for i in range(self.num_layers - 1, -1, -1):
            x_in, h_out, mask = cache[i]
            if i < self.num_layers - 1:
                if mask is not None:
                    dy = dy * mask
                # post-dropout h_out has zeros exactly where dy already has them,
                # so gating on it matches gating on the pre-dropout relu output
                dy = relu_backward(dy, h_out)
            dy = dense_backward(dy, x_in, params[f"{self.prefix}.W{i}"], grads,
                                f"{self.prefix}.W{i}", f"{self.prefix}.b{i}")
        return dy


class GRUDirection:
    """Single-direction gated recurrent layer with two gates and masked state holding.

    Gates: g = [x, h] @ Wg + bg split into update z and reset r; candidate
    c = tanh([x, r*h] @ Wc + bc); new state h' = (1-z)*h + z*c. Padded steps
    (mask 0) keep the previous state.
    """

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int, params: ParamSet,
                 rng: np.random.Generator):
        self.prefix = prefix
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        params.glorot(f"{prefix}.Wg", (input_dim + hidden_dim, 2 * hidden_dim), rng)
        params.zeros(f"{prefix}.bg", (2 * hidden_dim,))
        params.glorot(f"{prefix}.Wc", (input_dim + hidden_dim, hidden_dim), rng)
        params.zeros(f"{prefix}.bc", (hidden_dim,))

    @classmethod
    def attach(cls, prefix: str, input_dim: int, hidden_dim: int) -> "GRUDirection":
        """Bind to already-initialized parameters without creating tensors."""
        self = cls.__new__(cls)
        self.prefix = prefix
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        return self

    def forward(self, x: np.ndarray, mask: np.ndarray, params: ParamSet, reverse: bool = False):
        # the input-side halves of Wg/Wc apply to every step at once, so those
        # products are hoisted out of the recurrence as single large matmuls
        B, T, Din = x.shape
        H = self.hidden_dim
        Wg = params[f"{self.prefix}.Wg"]
        bg = params[f"{self.prefix}.bg"]
        Wc = params[f"{self.prefix}.Wc"]
        bc = params[f"{self.prefix}.bc"]
        Xg = x @ Wg[:Din] + bg
        Xc = x @ Wc[:Din] + bc
        h = np.zeros((B, H), dtype=x.dtype)
        outputs = np.zeros((B, T, H), dtype=x.dtype)
        order = range(T - 1, -1, -1) if reverse else range(T)
        steps = []
        for t in order:
            m_t = mask[:, t, None].astype(x.dtype)
            h_prev = h
            g = Xg[:, t] + h_prev @ Wg[Din:]
            z = sigmoid(g[:, :H])
            r = sigmoid(g[:, H:])
            c = np.tanh(Xc[:, t] + (r * h_prev) @ Wc[Din:])
            h_new = (1.0 - z) * h_prev + z * c
            h = m_t * h_new + (1.0 - m_t) * h_prev
            outputs[:, t, :] = h
            steps.append((t, h_prev, z, r, c, m_t))
        cache = (x, steps)
        return outputs, cache

    def backward(self, d_out: np.ndarray, cache, params: ParamSet, grads) -> np.ndarray:
        x, steps = cache
        B, T, Din = x.shape
        H = self.hidden_dim
        Wg = params[f"{self.prefix}.Wg"]
        Wc = params[f"{self.prefix}.Wc"]
        dWg_h = np.zeros((H, 2 * H), dtype=Wg.dtype)
        dWc_h = np.zeros((H, H), dtype=Wc.dtype)
        dg_all = np.zeros((B, T, 2 * H), dtype=x.dtype)
        dc_pre_all = np.zeros((B, T, H), dtype=x.dtype)
        dh = np.zeros((B, H), dtype=x.dtype)
        for t, h_prev, z, r, c, m_t in reversed(steps):
            dh = dh + d_out[:, t, :]
            dh_new = dh * m_t
            dh_prev = dh * (1.0 - m_t)
            dz = dh_new * (c - h_prev)
            dc = dh_new * z
            dh_prev = dh_prev + dh_new * (1.0 - z)
            dc_pre = dc * (1.0 - c * c)
            dc_pre_all[:, t, :] = dc_pre
            dWc_h += (r * h_prev).T @ dc_pre
            d_rh = dc_pre @ Wc[Din:].T
            dr = d_rh * h_prev
            dh_prev = dh_prev + d_rh * r
            dg = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dg_all[:, t, :] = dg
            dWg_h += h_prev.T @ dg
            dh = dh_prev + dg @ Wg[Din:].T
        x2 = x.reshape(-1, Din)
        dWg = np.concatenate([x2.T @ dg_all.reshape(-1, 2 * H), dWg_h])
        dWc = np.concatenate([x2.T @ dc_pre_all.reshape(-1, H), dWc_h])
        dx = dg_all @ Wg[:Din].T + dc_pre_all @ Wc[:Din].T
        grads.add(f"{self.prefix}.Wg", dWg)
        grads.add(f"{self.prefix}.bg", dg_all.sum(axis=(0, 1)))
        grads.add(f"{self.prefix}.Wc", dWc)
        grads.add(f"{self.prefix}.bc", dc_pre_all.sum(axis=(0, 1)))
        return dx


class BiGRU:
    """Bidirectional GRU; output concatenates forward and backward states per step."""

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int, params: ParamSet,
                 rng: np.random.Generator):
        self.hidden_dim = int(hidden_dim)
        self.fwd = GRUDirection(f"{prefix}.fwd", input_dim, hidden_dim, params, rng)
        self.bwd = GRUDirection(f"{prefix}.bwd", input_dim, hidden_dim, params, rng)

    @classmethod
    def attach(cls, prefix: str, input_dim: int, hidden_dim: int) -> "BiGRU":
        """Bind to already-initialized parameters without creating tensors."""
        self = cls.__new__(cls)
        self.hidden_dim = int(hidden_dim)
        self.fwd = GRUDirection.attach(f"{prefix}.fwd", input_dim, hidden_dim)
        self.bwd = GRUDirection.attach(f"{prefix}.bwd", input_dim, hidden_dim)
        return self

    def forward(self, x: np.ndarray, mask: np.ndarray, params: ParamSet):
        out_f, cache_f = self.fwd.forward(x, mask, params, reverse=False)
        out_b, cache_b = self.bwd.forward(x, mask, params, reverse=True)
        return np.concatenate([out_f, out_b], axis=2), (cache_f, cache_b)

    def backward(self, d_out: np.ndarray, cache, params: ParamSet, grads) -> np.ndarray:
        cache_f, cache_b = cache
        H = self.hidden_dim
        dx_f = self.fwd.backward(d_out[:, :, :H], cache_f, params, grads)
        dx_b = self.bwd.backward(d_out[:, :, H:], cache_b, params, grads)
        return dx_f + dx_b
