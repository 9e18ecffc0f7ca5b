"""
layers.py

Minimal NumPy neural-network layers with hand-written backward passes, used
by the masked autoencoder. Every layer works in float64 on batched arrays:
sequence layers take (batch, channels, length), dense layers (batch, features).

`forward` caches what `backward` needs; `backward(dy)` stores parameter
gradients in `self.grads` (same keys as `self.params`) and returns dx.
"""
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self) -> str:
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.params = {"weight": _uniform(rng, n_in, (n_out, n_in)), "bias": np.zeros(n_out)}

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] = dy.T @ self._x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._positive = x > 0
        return np.where(self._positive, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._positive, dy, self.slope * dy)


class Reshape(Layer):
    """Reshape the non-batch dimensions."""

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Conv1d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int, padding: int,
                 rng: np.random.Generator):
        super().__init__()
        self.stride, self.padding, self.kernel_size = stride, padding, kernel_size
        self.params = {
            "weight": _uniform(rng, c_in * kernel_size, (c_out, c_in, kernel_size)),
            "bias": np.zeros(c_out),
        }

    def forward(self, x):
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        windows = sliding_window_view(xp, k, axis=2)[:, :, ::s, :]
        self._in_len = x.shape[2]
        self._windows = windows
        y = np.einsum("bclk,ock->bol", windows, self.params["weight"], optimize=True)
        return y + self.params["bias"][None, :, None]

    def backward(self, dy):
        p, s, k = self.padding, self.stride, self.kernel_size
        windows = self._windows
        self.grads["weight"] = np.einsum("bol,bclk->ock", dy, windows, optimize=True)
        self.grads["bias"] = dy.sum(axis=(0, 2))
        dwin = np.einsum("bol,ock->bclk", dy, self.params["weight"], optimize=True)
        b, c, n_out, _ = dwin.shape
        dxp = np.zeros((b, c, self._in_len + 2 * p))
        for j in range(k):
            dxp[:, :, j:j + s * (n_out - 1) + 1:s] += dwin[:, :, :, j]
        return dxp[:, :, p:p + self._in_len]


class ConvTranspose1d(Layer):
    """Adjoint of Conv1d; output length (L - 1) * stride - 2 * padding + kernel + output_padding."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int, padding: int,
                 output_padding: int, rng: np.random.Generator):
        super().__init__()
        if output_padding > padding:
            raise ValueError("output_padding must not exceed padding")
        self.stride, self.padding, self.kernel_size = stride, padding, kernel_size
        self.output_padding = output_padding
        self.params = {
            "weight": _uniform(rng, c_out * kernel_size, (c_in, c_out, kernel_size)),
            "bias": np.zeros(c_out),
        }

    def _out_len(self, n_in: int) -> int:
        return (n_in - 1) * self.stride - 2 * self.padding + self.kernel_size + self.output_padding

    def forward(self, x):
        p, s, k = self.padding, self.stride, self.kernel_size
        self._x = x
        b, _, n_in = x.shape
        contrib = np.einsum("bil,iok->bolk", x, self.params["weight"], optimize=True)
        full = np.zeros((b, contrib.shape[1], (n_in - 1) * s + k))
        for j in range(k):
            full[:, :, j:j + s * (n_in - 1) + 1:s] += contrib[:, :, :, j]
        n_out = self._out_len(n_in)
        return full[:, :, p:p + n_out] + self.params["bias"][None, :, None]

    def backward(self, dy):
        p, s, k = self.padding, self.stride, self.kernel_size
        x = self._x
        b, _, n_in = x.shape
        full = np.zeros((b, dy.shape[1], (n_in - 1) * s + k))
        full[:, :, p:p + dy.shape[2]] = dy
        dcontrib = np.stack([full[:, :, j:j + s * (n_in - 1) + 1:s] for j in range(k)], axis=-1)
        self.grads["weight"] = np.einsum("bil,bolk->iok", x, dcontrib, optimize=True)
        self.grads["bias"] = dy.sum(axis=(0, 2))
        return np.einsum("bolk,iok->bil", dcontrib, self.params["weight"], optimize=True)


class Upsample(Layer):
    """Nearest-neighbour temporal upsampling by an integer factor."""

    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return np.repeat(x, self.factor, axis=2)

    def backward(self, dy):
        b, c, n = dy.shape
        return dy.reshape(b, c, n // self.factor, self.factor).sum(axis=-1)


class TemporalMean(Layer):
    """Global average over the time axis: (B, C, L) -> (B, C)."""

    def forward(self, x):
        self._len = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy):
        return np.repeat(dy[:, :, None] / self._len, self._len, axis=2)


class SqueezeExcite(Layer):
    """Channel attention: per-channel gates from the time-averaged activations."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, slope: float = 0.01):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.slope = slope
        self.params = {
            "w1": _uniform(rng, channels, (hidden, channels)),
            "b1": np.zeros(hidden),
            "w2": _uniform(rng, hidden, (channels, hidden)),
            "b2": np.zeros(channels),
        }

    def forward(self, x):
        w1, b1, w2, b2 = (self.params[k] for k in ("w1", "b1", "w2", "b2"))
        s = x.mean(axis=2)
        z1 = s @ w1.T + b1
        a1 = np.where(z1 > 0, z1, self.slope * z1)
        g = expit(a1 @ w2.T + b2)
        self._cache = (x, s, z1, a1, g)
        return x * g[:, :, None]

    def backward(self, dy):
        x, s, z1, a1, g = self._cache
        w1, w2 = self.params["w1"], self.params["w2"]
        dg = (dy * x).sum(axis=2)
        dz2 = dg * g * (1.0 - g)
        self.grads["w2"] = dz2.T @ a1
        self.grads["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ w2) * np.where(z1 > 0, 1.0, self.slope)
        self.grads["w1"] = dz1.T @ s
        self.grads["b1"] = dz1.sum(axis=0)
        ds = dz1 @ w1
        return dy * g[:, :, None] + ds[:, :, None] / x.shape[2]


class SelfAttention(Layer):
    """Single-head scaled dot-product self-attention over time steps, with a residual."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        for name in ("q", "k", "v", "o"):
            self.params[f"w{name}"] = _uniform(rng, channels, (channels, channels))
            self.params[f"b{name}"] = np.zeros(channels)

    def forward(self, x):
        p = self.params
        X = x.transpose(0, 2, 1)
        Q = X @ p["wq"].T + p["bq"]
        K = X @ p["wk"].T + p["bk"]
        V = X @ p["wv"].T + p["bv"]
        scale = 1.0 / math.sqrt(X.shape[2])
        A = softmax(Q @ K.transpose(0, 2, 1) * scale, axis=-1)
        H = A @ V
        self._cache = (X, Q, K, V, A, H, scale)
        return (X + H @ p["wo"].T + p["bo"]).transpose(0, 2, 1)

    def backward(self, dy):
        p = self.params
        X, Q, K, V, A, H, scale = self._cache
        dY = dy.transpose(0, 2, 1)
        self.grads["wo"] = np.einsum("blo,blc->oc", dY, H, optimize=True)
        self.grads["bo"] = dY.sum(axis=(0, 1))
        dH = dY @ p["wo"]
        dA = dH @ V.transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dH
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        dX = dY.copy()
        for name, d in (("q", dQ), ("k", dK), ("v", dV)):
            self.grads[f"w{name}"] = np.einsum("blo,blc->oc", d, X, optimize=True)
            self.grads[f"b{name}"] = d.sum(axis=(0, 1))
            dX += d @ p[f"w{name}"]
        return dX.transpose(0, 2, 1)


class Sequential(Layer):
    def __init__(self, layers: List[Layer]):
        super().__init__()
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{i}.{name}", layer.params[name]

    def named_grads(self) -> Iterator[Tuple[str, Optional[np.ndarray]]]:
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{i}.{name}", layer.grads.get(name)

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def flat(self) -> np.ndarray:
        params = [p.ravel() for _, p in self.named_parameters()]
        return np.concatenate(params) if params else np.zeros(0)

    def load_flat(self, vector: np.ndarray) -> None:
        offset = 0
        for _, p in self.named_parameters():
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vector.size:
            raise ValueError(f"parameter vector has {vector.size} values, network needs {offset}")
