"""Small dense reverse-mode differentiation core.

Everything runs in float64 on numpy arrays. A ``Tensor`` remembers the
tensors it was computed from together with a closure that maps the output
gradient to input gradients; ``backward`` walks that tape in reverse
topological order.

Layers are described by plain dataclasses (``Affine``, ``Conv2d``, ...) and
run in sequence by ``forward`` against the parameters held in a
``ParamStore``.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, InputError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reached leaf that
    requires a gradient. Frozen leaves (``requires_grad`` False) get nothing."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` (n, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data

    def back(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


def _pad_amount(kernel, padding):
    if padding == "same":
        return kernel // 2
    if padding == "valid":
        return 0
    raise InputError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding="same") -> Tensor:
    """2-D cross-correlation. ``x`` (n, c, h, w), ``w`` (o, c, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise DimensionError("conv2d: only square kernels are supported")
    p = _pad_amount(k, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {k}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gwin = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[..., i, j]
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _channel_view(arr, ndim):
    # broadcast a per-channel vector against (n, c) or (n, c, h, w)
    return arr.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_axes(ndim):
    return (0,) if ndim == 2 else (0, 2, 3)


@dataclass
class BNStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BNStats | None,
              train: bool, update_stats: bool = True) -> Tensor:
    """Batch normalisation over every axis except the channel axis (1)."""
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm: input {x.shape} does not match {gamma.shape[0]} channels")
    axes = _reduce_axes(x.ndim)
    gv = _channel_view(gamma.data, x.ndim)
    bv = _channel_view(beta.data, x.ndim)
    if train:
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats and stats is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mean
            stats.var = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - _channel_view(mean, x.ndim)) * _channel_view(inv, x.ndim)

        def back(g):
            gxhat = g * gv
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = _channel_view(inv, x.ndim) / m * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if stats is None:
            raise StateError("batchnorm in eval mode needs running statistics")
        inv = 1.0 / np.sqrt(stats.var + BN_EPS)
        xhat = (x.data - _channel_view(stats.mean, x.ndim)) * _channel_view(inv, x.ndim)

        def back(g):
            gx = g * gv * _channel_view(inv, x.ndim)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(xhat * gv + bv, (x, gamma, beta), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (n, c, h, w), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def sigmoid(z):
    return expit(z)


def channel_gate(x: Tensor, e: Tensor, s: float) -> Tensor:
    """Multiply each channel of ``x`` by ``sigmoid(s * e)``."""
    if x.ndim < 2 or x.shape[1] != e.shape[0]:
        raise DimensionError(f"channel gate: input {x.shape} vs {e.shape[0]} mask entries")
    gate = sigmoid(s * e.data)
    gv = _channel_view(gate, x.ndim)
    axes = _reduce_axes(x.ndim)

    def back(g):
        dgate = (g * x.data).sum(axis=axes)
        return g * gv, dgate * s * gate * (1.0 - gate)

    return _result(x.data * gv, (x, e), back)


def concat(parts: Sequence[Tensor], axis=1) -> Tensor:
    if not parts:
        raise InputError("concat of nothing")
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return tuple(res)

    return _result(out, tuple(parts), back)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, temperature: float = 1.0) -> Tensor:
    """Mean over rows of ``-log softmax(logits / temperature)[label]``."""
    if temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data / temperature)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / (n * temperature)),)

    return _result(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameters plus batchnorm running statistics and SGD buffers.

    Names in ``frozen`` never receive gradients or updates. Names in ``plain``
    are updated by vanilla SGD (no momentum, no weight decay).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.plain: set[str] = set()
        self.bn_stats: dict[str, BNStats] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name, value, plain=False):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        if plain:
            self.plain.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def freeze(self, names: Iterable[str] | None = None):
        for n in (self.params if names is None else names):
            self.frozen.add(n)
            self.params[n].requires_grad = False
            self.params[n].grad = None
        if names is None:
            self.frozen.update(self.bn_stats)

    def is_frozen(self, name):
        return name in self.frozen

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def numel(self, names=None):
        return sum(self.params[n].data.size for n in (self.params if names is None else names))

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n, t in self.params.items():
            nt = new.add(n, t.data.copy(), plain=n in self.plain)
            nt.requires_grad = t.requires_grad
        new.frozen = set(self.frozen)
        new.bn_stats = {n: BNStats(s.mean.copy(), s.var.copy(), s.momentum)
                        for n, s in self.bn_stats.items()}
        new.momentum = {n: b.copy() for n, b in self.momentum.items()}
        return new


# ---------------------------------------------------------------------------
# layer specs and sequential forward


@dataclass(frozen=True)
class Affine:
    name: str
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: str = "same"
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BatchNorm:
    name: str
    channels: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class ChannelMask:
    """Hook that gates channels with ``sigmoid(s * e)``; ``e`` is the
    parameter ``<name>.e`` and ``s`` comes from ``forward(mask_scale=...)``."""
    name: str
    channels: int


@dataclass(frozen=True)
class Concat:
    branches: tuple = field(default_factory=tuple)


LayerSpec = Affine | Conv2d | ReLU | BatchNorm | GlobalAvgPool | ChannelMask | Concat


def he_uniform(rng: np.random.Generator, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(layers: Sequence, store: ParamStore, rng: np.random.Generator) -> ParamStore:
    """He-uniform weights, zero biases, unit/zero batchnorm affine, fresh
    running statistics. Channel-mask parameters are left to the caller."""
    for layer in layers:
        if isinstance(layer, Affine):
            store.add(f"{layer.name}.weight",
                      he_uniform(rng, (layer.in_features, layer.out_features), layer.in_features))
            if layer.bias:
                store.add(f"{layer.name}.bias", np.zeros(layer.out_features))
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            store.add(f"{layer.name}.weight",
                      he_uniform(rng, (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), fan_in))
            if layer.bias:
                store.add(f"{layer.name}.bias", np.zeros(layer.out_channels))
        elif isinstance(layer, BatchNorm):
            store.add(f"{layer.name}.gamma", np.ones(layer.channels))
            store.add(f"{layer.name}.beta", np.zeros(layer.channels))
            store.bn_stats[layer.name] = BNStats(np.zeros(layer.channels), np.ones(layer.channels))
        elif isinstance(layer, Concat):
            for branch in layer.branches:
                init_params(branch, store, rng)
    return store


def _check_channels(i, layer, x, expected, ndim):
    if x.ndim != ndim or x.shape[1] != expected:
        raise DimensionError(
            f"layer {i} ({type(layer).__name__}): expected {ndim}-d input with "
            f"{expected} channels, got shape {x.shape}")


def forward(layers: Sequence, params: ParamStore, x: Tensor, mode: str = "train",
            mask_scale: float | None = None) -> Tensor:
    """Run ``layers`` in order. ``mode`` is ``"train"`` (tape recorded, batch
    statistics) or ``"eval"`` (no tape, running statistics)."""
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        with no_grad():
            return _run(layers, params, x, False, mask_scale)
    return _run(layers, params, x, True, mask_scale)


def _run(layers, params, x, train, mask_scale):
    for i, layer in enumerate(layers):
        if isinstance(layer, Affine):
            _check_channels(i, layer, x, layer.in_features, 2)
            b = params[f"{layer.name}.bias"] if layer.bias else None
            x = affine(x, params[f"{layer.name}.weight"], b)
        elif isinstance(layer, Conv2d):
            _check_channels(i, layer, x, layer.in_channels, 4)
            b = params[f"{layer.name}.bias"] if layer.bias else None
            x = conv2d(x, params[f"{layer.name}.weight"], b, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            x = relu(x)
        elif isinstance(layer, BatchNorm):
            if x.ndim not in (2, 4):
                raise DimensionError(f"layer {i} (BatchNorm): bad input shape {x.shape}")
            _check_channels(i, layer, x, layer.channels, x.ndim)
            stats = params.bn_stats.get(layer.name)
            if not train and stats is None:
                raise StateError(f"layer {i} (BatchNorm '{layer.name}'): running statistics not initialised")
            update = train and layer.name not in params.frozen
            x = batchnorm(x, params[f"{layer.name}.gamma"], params[f"{layer.name}.beta"],
                          stats, train, update)
        elif isinstance(layer, GlobalAvgPool):
            if x.ndim != 4:
                raise DimensionError(f"layer {i} (GlobalAvgPool): expected 4-d input, got {x.shape}")
            x = global_avg_pool(x)
        elif isinstance(layer, ChannelMask):
            if x.ndim < 2 or x.shape[1] != layer.channels:
                raise DimensionError(f"layer {i} (ChannelMask '{layer.name}'): expected {layer.channels} channels, got {x.shape}")
            if mask_scale is None:
                raise StateError(f"layer {i} (ChannelMask '{layer.name}'): no mask scale given")
            x = channel_gate(x, params[f"{layer.name}.e"], mask_scale)
        elif isinstance(layer, Concat):
            x = concat([_run(branch, params, x, train, mask_scale) for branch in layer.branches])
        else:
            raise InputError(f"layer {i}: unsupported layer {layer!r}")
    return x


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class SgdConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 0
    warmup_end_lr: float = 0.1
    decay_epochs: tuple = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.base_lr <= 0 or self.warmup_end_lr <= 0:
            raise InputError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight decay must be non-negative")
        if self.warmup_epochs < 0:
            raise InputError("warmup_epochs must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise InputError("decay_factor must lie in (0, 1]")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise InputError("decay_epochs must be strictly increasing")
        if d and d[0] < self.warmup_epochs:
            raise InputError("decay epochs must come after warmup")


def lr_at(cfg: SgdConfig, epoch: int) -> float:
    """Linear warmup from ``base_lr / warmup_epochs`` to ``warmup_end_lr`` over
    the warmup epochs, then step decay at each listed epoch."""
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    w = cfg.warmup_epochs
    if epoch < w:
        start = cfg.base_lr / w
        if w == 1:
            return cfg.warmup_end_lr
        return start + (cfg.warmup_end_lr - start) * epoch / (w - 1)
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.warmup_end_lr * cfg.decay_factor ** passed


def sgd_step(params: ParamStore, cfg: SgdConfig, lr: float, require: Iterable[str] = ()) -> None:
    """One SGD update over every unfrozen parameter holding a gradient.

    Weight decay is added to the gradient before the momentum buffer. Names
    in ``require`` must carry a gradient. Gradients are cleared afterwards.
    """
    for name in require:
        if name not in params.frozen and params[name].grad is None:
            raise StateError(f"parameter '{name}' has no gradient")
    for name, t in params.params.items():
        if name in params.frozen or t.grad is None:
            continue
        g = t.grad
        if name in params.plain:
            t.data = t.data - lr * g
        else:
            if cfg.weight_decay:
                g = g + cfg.weight_decay * t.data
            if cfg.momentum:
                buf = params.momentum.get(name)
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                params.momentum[name] = buf
                g = buf
            t.data = t.data - lr * g
        t.grad = None


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``arr``
    (modified in place and restored)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out
