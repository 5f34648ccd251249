"""A small reverse-mode layer stack: 1D convolution, dense, flatten and activations.

Activations between convolutions are kept channel-last, ``(n, P, C)``.
Flatten emits channel-major order ``(n, C * P)`` so dense weights line up
with the conventional ``(C, P)`` flattening.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

LINEAR = "linear"
NET_A = "neta"
NET_B = "netb"
NET_C = "netc"
ARCHS = (LINEAR, NET_A, NET_B, NET_C)

RELU = "relu"
SIGMOID = "sigmoid"
SWISH = "swish"
ACTIVATION_OF = {NET_A: RELU, NET_B: SIGMOID, NET_C: SWISH}

CHECKPOINT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(Exception):
    code = "checkpoint_error"


def _arch_key(arch: str) -> str:
    key = arch.lower()
    if key not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    return key


@dataclass(frozen=True)
class NetworkConfig:
    arch: str
    input_len: int
    output_len: int
    blocks: int = 0
    filters: int = 32
    kernel_size: int = 5
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch", _arch_key(self.arch))
        if self.blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {self.blocks}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("input_len and output_len must be positive")

    @property
    def stride(self) -> int:
        return 1

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def activation(self) -> str | None:
        return ACTIVATION_OF.get(self.arch)

    def to_dict(self) -> dict:
        return asdict(self)


class Parameter:
    """A trainable array and its accumulated gradient."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    params: tuple = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape


class Conv1D(Layer):
    """Stride-1 cross-correlation with zero padding.

    ``weight`` has shape ``(C_out, C_in, k)``. Inputs are ``(n, P, C_in)``.
    """

    def __init__(self, weight, bias, padding):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.padding = int(padding)
        self.params = (self.weight, self.bias)
        self._cache = None

    def out_shape(self, shape):
        P, C = shape
        c_out, c_in, k = self.weight.shape
        if C != c_in:
            raise ValueError(f"conv expects {c_in} input channels, got {C}")
        out_len = P + 2 * self.padding - k + 1
        if out_len < 1:
            raise ValueError(f"kernel {k} too wide for length {P} with padding {self.padding}")
        return (out_len, c_out)

    def forward(self, x):
        n, P, c_in = x.shape
        c_out, w_in, k = self.weight.shape
        if c_in != w_in:
            raise ValueError(f"conv expects {w_in} input channels, got {c_in}")
        p = self.padding
        span = P + 2 * p
        out_len = span - k + 1
        buf = np.zeros((n, span, c_in))
        buf[:, p : p + P] = x
        W = self.weight.value
        if c_in == 1:
            # single input channel: one (n*out_len, k) @ (k, c_out) product
            cols = sliding_window_view(buf[:, :, 0], k, axis=1).reshape(n * out_len, k)
            out = (cols @ np.ascontiguousarray(W[:, 0, :].T)).reshape(n, out_len, c_out) + self.bias.value
            self._cache = ("cols", cols, n, P, span, out_len)
            return out
        X = buf.reshape(n * span, c_in)
        # rows t = s*span + i with i < out_len are valid windows of sample s
        L = n * span - k + 1
        # per-tap (c_in, c_out) blocks; strided operands would miss BLAS
        taps = np.ascontiguousarray(W.transpose(2, 1, 0))
        acc = X[0:L] @ taps[0]
        for j in range(1, k):
            acc += X[j : j + L] @ taps[j]
        full = np.empty((n * span, c_out))
        full[:L] = acc
        full[L:] = 0.0
        out = full.reshape(n, span, c_out)[:, :out_len] + self.bias.value
        self._cache = ("shift", X, n, P, span, out_len)
        return out

    def backward(self, grad):
        mode, X, n, P, span, out_len = self._cache
        self._cache = None
        c_out, c_in, k = self.weight.shape
        p = self.padding
        W = self.weight.value
        self.bias.grad += grad.sum(axis=(0, 1))
        if mode == "cols":
            G = np.ascontiguousarray(grad).reshape(n * out_len, c_out)
            self.weight.grad[:, 0, :] += G.T @ X
            dcols = (G @ np.ascontiguousarray(W[:, 0, :])).reshape(n, out_len, k)
            dbuf = np.zeros((n, span))
            for j in range(k):
                dbuf[:, j : j + out_len] += dcols[:, :, j]
            return dbuf[:, p : p + P, None]
        L = n * span - k + 1
        G = np.zeros((n, span, c_out))
        G[:, :out_len] = grad
        G = G.reshape(n * span, c_out)[:L]
        for j in range(k):
            self.weight.grad[:, :, j] += G.T @ X[j : j + L]
        taps = np.ascontiguousarray(W.transpose(2, 0, 1))
        dX = np.zeros_like(X)
        for j in range(k):
            dX[j : j + L] += G @ taps[j]
        return dX.reshape(n, span, c_in)[:, p : p + P]


class Activation(Layer):
    def __init__(self, kind):
        if kind not in (RELU, SIGMOID, SWISH):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x):
        self._cache = x
        return activation_forward(self.kind, x)

    def backward(self, grad):
        x = self._cache
        self._cache = None
        return grad * activation_grad(self.kind, x)


class Flatten(Layer):
    def out_shape(self, shape):
        return (shape[0] * shape[1],)

    def forward(self, x):
        self._shape = x.shape
        return x.transpose(0, 2, 1).reshape(x.shape[0], -1)

    def backward(self, grad):
        n, P, C = self._shape
        return grad.reshape(n, C, P).transpose(0, 2, 1)


class Dense(Layer):
    """``y = x W^T + b`` with ``weight`` of shape ``(out, in)``."""

    def __init__(self, weight, bias):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.params = (self.weight, self.bias)
        self._cache = None

    def out_shape(self, shape):
        if shape != (self.weight.shape[1],):
            raise ValueError(f"dense expects input {self.weight.shape[1]}, got {shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        x = self._cache
        self._cache = None
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


def activation_forward(kind: str, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == RELU:
        return np.maximum(x, 0.0)
    if kind == SIGMOID:
        return expit(x)
    if kind == SWISH:
        return x * expit(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x):
    """Elementwise derivative; ReLU uses 0 at the kink."""
    x = np.asarray(x, dtype=np.float64)
    if kind == RELU:
        return (x > 0).astype(np.float64)
    s = expit(x)
    if kind == SIGMOID:
        return s * (1.0 - s)
    if kind == SWISH:
        return s + x * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


def conv1d_forward(x, weight, bias, stride: int = 1, padding: int = 0):
    """Functional cross-correlation on a single ``(C_in, P)`` input.

    ``out[c, i] = bias[c] + sum_{c', j} weight[c, c', j] * x_pad[c', i + j]``.
    """
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim == 1:
        weight = weight[None, None, :]
    bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (weight.shape[0],))
    if weight.shape[1] != x.shape[0]:
        raise ValueError(f"weight expects {weight.shape[1]} channels, input has {x.shape[0]}")
    layer = Conv1D(weight, bias, padding)
    return layer.forward(x.T[None])[0].T


class Network:
    """Ordered layer stack mapping ``(n, P)`` forcings to ``(n, N_modes)`` coefficients.

    ``input_norm`` optionally records the affine input normalization the
    network was trained with; :meth:`predict` applies it, :meth:`forward`
    does not.
    """

    def __init__(self, config: NetworkConfig, layers, input_norm=None):
        self.config = config
        self.layers = list(layers)
        self.input_norm = input_norm
        self._forward_done = False
        shape = (config.input_len, 1)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (config.output_len,):
            raise ValueError(f"layer chain ends in shape {shape}, expected ({config.output_len},)")

    @property
    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    @property
    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters)

    def describe(self) -> str:
        names = []
        for layer in self.layers:
            if isinstance(layer, Activation):
                names.append(layer.kind)
            else:
                names.append(type(layer).__name__)
        c = self.config
        return (f"arch={c.arch} blocks={c.blocks} filters={c.filters} kernel_size={c.kernel_size} "
                f"params={self.num_parameters} layers=[{', '.join(names)}]")

    def forward(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_len:
            raise ValueError(f"expected a batch of shape (n, {self.config.input_len}), got {x.shape}")
        out = x[:, :, None]
        for layer in self.layers:
            out = layer.forward(out)
        self._forward_done = True
        return out

    __call__ = forward

    def backward(self, output_grad):
        """Accumulate parameter gradients and return the input gradient."""
        if not self._forward_done:
            raise RuntimeError("backward called without a preceding forward pass")
        g = np.asarray(output_grad, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._forward_done = False
        return g[:, :, 0]

    def predict(self, forcings):
        x = np.asarray(forcings, dtype=np.float64)
        if self.input_norm is not None:
            x = self.input_norm.apply(x)
        out = self.forward(x)
        self._clear()
        return out

    def _clear(self):
        for layer in self.layers:
            if hasattr(layer, "_cache"):
                layer._cache = None
        self._forward_done = False

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.parameters])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_parameters,):
            raise ValueError(f"expected {self.num_parameters} parameters, got {vec.shape}")
        i = 0
        for p in self.parameters:
            p.value = vec[i : i + p.value.size].reshape(p.value.shape).copy()
            i += p.value.size

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self.parameters])

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "num_parameters": self.num_parameters,
            "input_norm": None if self.input_norm is None else
            {"mean": self.input_norm.mean, "std": self.input_norm.std},
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.get_flat().astype(_DTYPE).tofile(path / "params.bin")
        return path

    @classmethod
    def load(cls, path) -> "Network":
        from .data import NormStats

        path = Path(path)
        try:
            meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
            if not isinstance(meta, dict):
                raise CheckpointError(f"{path}/meta.json must hold an object")
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
            config = NetworkConfig(**meta["config"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from exc
        net = build_network(config)
        raw = np.fromfile(path / "params.bin", dtype=_DTYPE)
        if raw.size != net.num_parameters or (path / "params.bin").stat().st_size != raw.size * 8:
            raise CheckpointError(f"{path}/params.bin holds {raw.size} values, expected {net.num_parameters}")
        net.set_flat(raw.astype(np.float64))
        if meta.get("input_norm") is not None:
            net.input_norm = NormStats(**meta["input_norm"])
        return net


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_network(config: NetworkConfig) -> Network:
    """Build and seed-initialize the layer stack for ``config``.

    ``linear``: (B+1) convolutions, flatten, dense; no activations.
    ``neta``/``netb``/``netc``: B blocks of conv + ReLU/sigmoid/Swish, one
    more conv without activation, flatten, dense.
    """
    rng = np.random.default_rng(config.init_seed)
    F, k, P = config.filters, config.kernel_size, config.input_len
    act = config.activation
    layers = []
    c_in = 1
    for i in range(config.blocks + 1):
        w = _uniform(rng, (F, c_in, k), c_in * k)
        b = _uniform(rng, (F,), c_in * k)
        layers.append(Conv1D(w, b, config.padding))
        if act is not None and i < config.blocks:
            layers.append(Activation(act))
        c_in = F
    layers.append(Flatten())
    fan_in = F * P
    w = _uniform(rng, (config.output_len, fan_in), fan_in)
    b = _uniform(rng, (config.output_len,), fan_in)
    layers.append(Dense(w, b))
    return Network(config, layers)
