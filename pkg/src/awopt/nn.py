"""Small dense networks in float64 numpy.

Weights are stored input-major, shape ``(fan_in, fan_out)``, so a batch of
row vectors goes through a layer as ``x @ W + b``.  Every function accepts a
single vector ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
FORMAT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise ShapeError("final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order (W0, b0, W1, b1, ...)."""
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        layers = []
        for i, l in enumerate(self.layers):
            layers.append(Layer(arrays[2 * i], arrays[2 * i + 1], l.activation))
        return MlpParams(layers)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
) -> MlpParams:
    """Glorot-uniform weights, zero biases, identity output layer."""
    if len(sizes) < 2:
        raise ShapeError("sizes needs an input and an output dimension")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = "identity" if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {params.in_dim}")
    return x, single


def forward(params: MlpParams, x) -> np.ndarray:
    h, single = _as_batch(params, x)
    for layer in params.layers:
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
    return h[0] if single else h


def forward_cached(params: MlpParams, x) -> tuple[np.ndarray, list]:
    """Forward pass that also returns the activations needed by ``backward_cached``."""
    h, single = _as_batch(params, x)
    cache = []
    for layer in params.layers:
        z = h @ layer.weight + layer.bias
        a = _activate(z, layer.activation)
        cache.append((h, z, a))
        h = a
    return (h[0] if single else h), cache


def backward_cached(params: MlpParams, cache: list, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    g = np.asarray(upstream, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape[1] != params.out_dim or g.shape[0] != cache[0][0].shape[0]:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output")
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        h, z, a = cache[i]
        if layer.activation != "identity":
            g = g * _activate_grad(z, a, layer.activation)
        grads[2 * i] = h.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, (g[0] if single else g)


def backward(params: MlpParams, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of ``sum(forward(x) * upstream)``.

    Returns parameter gradients in ``MlpParams.arrays()`` order, summed over
    the batch, and the gradient with respect to the input.
    """
    _, cache = forward_cached(params, x)
    return backward_cached(params, cache, upstream)


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def apply_gradients(params: MlpParams, grads: Sequence[np.ndarray], state: OptimizerState) -> MlpParams:
    """One descent step. Returns new params; ``state`` accumulates moments in place."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(g.shape != p.shape for g, p in zip(grads, arrays)):
        raise ShapeError("gradient shapes do not mirror parameter shapes")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry")
    lr = state.learning_rate
    if state.kind == "sgd":
        return params.with_arrays([p - lr * g for p, g in zip(arrays, grads)])

    if state.m is None:
        state.m = [np.zeros_like(p) for p in arrays]
        state.v = [np.zeros_like(p) for p in arrays]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params.with_arrays(new)


def polyak(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """``tau * online + (1 - tau) * target`` entrywise."""
    if tau == 1.0:
        return online.copy()
    return target.with_arrays(
        [tau * o + (1.0 - tau) * t for t, o in zip(target.arrays(), online.arrays())]
    )


# Checkpoint layout (little endian):
#   u8 version | u32 n_layers | n_layers * (u32 rows, u32 cols, u8 activation)
#   | float64 values: W0 row-major, b0, W1, b1, ...
def save_params(params: MlpParams, path) -> None:
    parts = [struct.pack("<BI", FORMAT_VERSION, len(params.layers))]
    for l in params.layers:
        parts.append(struct.pack("<IIB", l.in_dim, l.out_dim, ACTIVATIONS.index(l.activation)))
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> MlpParams:
    data = Path(path).read_bytes()
    version, n = struct.unpack_from("<BI", data, 0)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = struct.calcsize("<BI")
    shapes = []
    for _ in range(n):
        rows, cols, act = struct.unpack_from("<IIB", data, off)
        off += struct.calcsize("<IIB")
        shapes.append((rows, cols, ACTIVATIONS[act]))
    values = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    layers, pos = [], 0
    for rows, cols, act in shapes:
        w = values[pos:pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        b = values[pos:pos + cols]
        pos += cols
        layers.append(Layer(w.copy(), b.copy(), act))
    if pos != values.size:
        raise ValueError("checkpoint has trailing or missing values")
    return MlpParams(layers)
