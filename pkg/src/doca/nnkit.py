"""Small reverse-mode network kit: column-wise 1D conv, 2D conv, dense, activations.

Arrays are float64 numpy arrays with a leading batch axis. Each layer's
``forward`` returns ``(output, cache)`` and ``backward(cache, grad_out)``
returns ``(grad_in, param_grads)``.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """``kind`` is one of CONV1D, CONV2D, DENSE, ACT.

    CONV1D runs an independent single-channel convolution down every input
    column and stacks the results as channels: ``(B, R, C) -> (B, C, R', F)``.
    """

    kind: str
    filters: int = 0
    kernel: tuple[int, ...] = (3,)
    stride: tuple[int, ...] = (1,)
    units: int = 0
    activation: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        d["stride"] = list(self.stride)
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "LayerSpec":
        return cls(kind=d["kind"], filters=d["filters"], kernel=tuple(d["kernel"]),
                   stride=tuple(d["stride"]), units=d["units"], activation=d["activation"])


def glorot(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _out_len(n: int, k: int, s: int) -> int:
    return (n + k - 1 - k) // s + 1


class Layer:
    params: dict[str, np.ndarray]

    def init(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError


class ColumnConv1D(Layer):
    def __init__(self, filters: int, kernel: int = 3, stride: int = 1):
        self.filters, self.kernel, self.stride = filters, kernel, stride
        self.params = {}

    def init(self, in_shape, rng):
        rows, cols = in_shape
        k, f = self.kernel, self.filters
        # one (kernel, filters) bank per column
        self.params = {"W": glorot((cols, k, f), k, k * f, rng), "b": np.zeros((cols, f))}
        return cols, _out_len(rows, k, self.stride), f

    def forward(self, x):
        k, s = self.kernel, self.stride
        lp, rp = _same_pad(k)
        xp = np.pad(x, ((0, 0), (lp, rp), (0, 0)))
        win = sliding_window_view(xp, k, axis=1)[:, ::s]  # (B, L', C, k)
        y = np.einsum("blck,ckf->bclf", win, self.params["W"]) + self.params["b"][None, :, None, :]
        return y, (x.shape, win)

    def backward(self, cache, gy):
        x_shape, win = cache
        k, s = self.kernel, self.stride
        lp, rp = _same_pad(k)
        W = self.params["W"]
        gW = np.einsum("blck,bclf->ckf", win, gy)
        gb = gy.sum(axis=(0, 2))
        B, L, C = x_shape
        gxp = np.zeros((B, L + lp + rp, C))
        n_out = gy.shape[2]
        for kk in range(k):
            gxp[:, kk:kk + s * (n_out - 1) + 1:s, :] += np.einsum("bclf,cf->blc", gy, W[:, kk, :])
        return gxp[:, lp:lp + L, :], {"W": gW, "b": gb}


class Conv2D(Layer):
    def __init__(self, filters: int, kernel=(3, 3), stride=(1, 1)):
        self.filters = filters
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.params = {}

    def init(self, in_shape, rng):
        c, h, w = in_shape
        kh, kw = self.kernel
        f = self.filters
        self.params = {"W": glorot((f, c, kh, kw), c * kh * kw, f * kh * kw, rng), "b": np.zeros(f)}
        return f, _out_len(h, kh, self.stride[0]), _out_len(w, kw, self.stride[1])

    def forward(self, x):
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (t, bo), (le, ri) = _same_pad(kh), _same_pad(kw)
        xp = np.pad(x, ((0, 0), (0, 0), (t, bo), (le, ri)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]  # (B,C,H',W',kh,kw)
        y = np.tensordot(win, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))  # (B,H',W',F)
        y = y.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]
        return y, (x.shape, win)

    def backward(self, cache, gy):
        x_shape, win = cache
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (t, bo), (le, ri) = _same_pad(kh), _same_pad(kw)
        W = self.params["W"]
        gW = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
        gb = gy.sum(axis=(0, 2, 3))
        B, C, H, Wd = x_shape
        gxp = np.zeros((B, C, H + t + bo, Wd + le + ri))
        ho, wo = gy.shape[2], gy.shape[3]
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(gy, W[:, :, i, j], axes=([1], [0]))  # (B,H',W',C)
                gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += contrib.transpose(0, 3, 1, 2)
        return gxp[:, :, t:t + H, le:le + Wd], {"W": gW, "b": gb}


class Dense(Layer):
    def __init__(self, units: int):
        self.units = units
        self.params = {}

    def init(self, in_shape, rng):
        n = int(np.prod(in_shape))
        self.params = {"W": glorot((n, self.units), n, self.units, rng), "b": np.zeros(self.units)}
        return (self.units,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], (x.shape, flat)

    def backward(self, cache, gy):
        shape, flat = cache
        return (gy @ self.params["W"].T).reshape(shape), {"W": flat.T @ gy, "b": gy.sum(axis=0)}


class Activation(Layer):
    def __init__(self, fn: str):
        if fn not in ("tanh", "softmax", "linear"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn
        self.params = {}

    def init(self, in_shape, rng):
        return in_shape

    def forward(self, x):
        if self.fn == "tanh":
            y = np.tanh(x)
        elif self.fn == "softmax":
            y = softmax(x)
        else:
            y = x
        return y, y

    def backward(self, y, gy):
        if self.fn == "tanh":
            return gy * (1.0 - y * y), {}
        if self.fn == "softmax":
            return y * (gy - np.sum(gy * y, axis=-1, keepdims=True)), {}
        return gy, {}


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def make_layer(spec: LayerSpec) -> Layer:
    if spec.kind == "CONV1D":
        return ColumnConv1D(spec.filters, spec.kernel[0], spec.stride[0])
    if spec.kind == "CONV2D":
        return Conv2D(spec.filters, spec.kernel, spec.stride)
    if spec.kind == "DENSE":
        return Dense(spec.units)
    if spec.kind == "ACT":
        return Activation(spec.activation)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


class Network:
    """A chain of layers with flat ``"<index>.<name>"`` parameter names."""

    def __init__(self, specs: Iterable[LayerSpec], input_shape: tuple[int, ...], rng: np.random.Generator):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layers = [make_layer(s) for s in self.specs]
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.init(shape, rng)
        self.output_shape = shape

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for name, value in params.items():
            i, k = name.split(".", 1)
            layer = self.layers[int(i)]
            if layer.params[k].shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {layer.params[k].shape}")
            layer.params[k] = value

    def forward(self, x: np.ndarray, upto: int | None = None):
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        caches = []
        for layer in self.layers[:upto]:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, gy: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients; ``caches`` may cover a prefix of the layers (see ``forward(upto=)``)."""
        if caches is None:
            raise ValueError("backward needs the cache of a forward pass")
        grads = {}
        for i in range(len(caches) - 1, -1, -1):
            gy, g = self.layers[i].backward(caches[i], gy)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grads

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")


def apply_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 step_size: float) -> dict[str, np.ndarray]:
    """Plain gradient-descent step; returns new arrays and leaves ``params`` untouched."""
    check_finite(grads)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        out[name] = p - step_size * g
    return out


@dataclass
class RMSProp:
    """RMSProp with optional momentum; one set of statistics shared by every worker that reports to it.

    Plain form: ``mom = momentum * mom + g / (sqrt(ms) + eps)`` and the step is
    ``step_size * mom``. With ``debias`` the momentum term is an exponential
    average of the gradients and both averages are bias-corrected by the
    number of steps taken (the Adam variant).
    """

    decay: float = 0.99
    eps: float = 1e-5
    momentum: float = 0.0
    sq: dict[str, np.ndarray] = field(default_factory=dict)
    mom: dict[str, np.ndarray] = field(default_factory=dict)
    debias: bool = False
    steps: int = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             step_size: float) -> dict[str, np.ndarray]:
        check_finite(grads)
        self.steps += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
            s = self.sq.get(name)
            s = (1.0 - self.decay) * g * g if s is None else self.decay * s + (1.0 - self.decay) * g * g
            self.sq[name] = s
            m = self.mom.get(name)
            if self.debias:
                m = (1.0 - self.momentum) * g if m is None else self.momentum * m + (1.0 - self.momentum) * g
                self.mom[name] = m
                m_hat = m / (1.0 - self.momentum ** self.steps)
                s_hat = s / (1.0 - self.decay ** self.steps)
                d = m_hat / (np.sqrt(s_hat) + self.eps)
            else:
                d = g / (np.sqrt(s) + self.eps)
                if self.momentum:
                    d = d if m is None else self.momentum * m + d
                    self.mom[name] = d
            out[name] = p - step_size * d
        return out


@dataclass
class SGD:
    """Stateless plain gradient descent with the optimizer interface of :class:`RMSProp`."""

    sq: dict[str, np.ndarray] = field(default_factory=dict)
    mom: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             step_size: float) -> dict[str, np.ndarray]:
        self.steps += 1
        return apply_update(params, grads, step_size)


def learning_rate(epoch: int, base: float = 1e-3, decay: float = 0.01, power: float = 1.1) -> float:
    """Step-size schedule ``base / (1 + decay * epoch**power)``."""
    return base / (1.0 + decay * float(epoch) ** power)


def gradient_check(net: Network, x: np.ndarray, out_weights: np.ndarray, rng: np.random.Generator,
                   samples_per_tensor: int = 20, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    The scalar loss is ``sum(out_weights * net(x))``. For each parameter tensor
    a random subset of coordinates is perturbed; the error for the tensor is
    ``|g_bp - g_fd| / max(|g_bp| + |g_fd|, 1e-12)`` over the sampled vector.
    """
    out, caches = net.forward(x)
    grads = net.backward(caches, out_weights)

    def loss() -> float:
        return float(np.sum(out_weights * net.forward(x)[0]))

    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            num[n] = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


# --- checkpoints -------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Write a versioned zip: ``meta.json`` plus one ``.npy`` per array, byte-stable."""
    meta = dict(meta)
    meta["version"] = CHECKPOINT_VERSION
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(arrays[name]))


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        for n in zf.namelist():
            if n.startswith("arrays/"):
                arrays[n[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
    return meta, arrays
