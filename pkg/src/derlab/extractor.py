"""Masked feature extractors: channel gating, scale annealing, gradient
compensation, the sparsity loss and binarise-and-prune."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .errors import DimensionError, InputError

S_MAX_DEFAULT = 400.0
MASK_INIT = 0.05
COMPENSATION_FLOOR = 1e-12


@dataclass(frozen=True)
class BlockSpec:
    """One extractor block: conv/affine -> batchnorm -> channel mask -> relu."""
    kind: str
    out_channels: int
    kernel_size: int = 1
    has_bn: bool = True
    has_relu: bool = True
    masked: bool = True
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "affine"):
            raise InputError(f"block kind must be 'conv' or 'affine', got {self.kind!r}")
        if self.out_channels < 1:
            raise InputError("out_channels must be >= 1")
        if self.kind == "affine" and self.kernel_size != 1:
            raise InputError("affine blocks have kernel_size 1")
        if self.kind == "conv" and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise InputError("conv kernel_size must be odd")
        if self.stride < 1:
            raise InputError("stride must be >= 1")

    @property
    def kernel_elements(self) -> int:
        return self.kernel_size * self.kernel_size


@dataclass
class ChannelMask:
    e: Tensor
    s: float
    s_max: float = S_MAX_DEFAULT

    @property
    def gates(self) -> np.ndarray:
        return dc.sigmoid(self.s * self.e.data)


def build_layers(specs: Sequence[BlockSpec], input_shape, masked=True):
    """Translate block specs into a diffcore layer list.

    A global-average-pool is inserted wherever a spatial map meets an affine
    block and after a trailing conv block.
    """
    layers = []
    spatial = len(input_shape) == 3
    if len(input_shape) not in (1, 3):
        raise DimensionError(f"input shape must be (d,) or (c, h, w), got {input_shape}")
    c_in = input_shape[0]
    for i, spec in enumerate(specs):
        c_out = spec.out_channels
        if spec.kind == "conv":
            if not spatial:
                raise DimensionError(f"block {i}: conv block needs a (c, h, w) input")
            layers.append(dc.Conv2d(f"b{i}.conv", c_in, c_out, spec.kernel_size, spec.stride))
        else:
            if spatial:
                layers.append(dc.GlobalAvgPool())
                spatial = False
            layers.append(dc.Affine(f"b{i}.fc", c_in, c_out))
        if spec.has_bn:
            layers.append(dc.BatchNorm(f"b{i}.bn", c_out))
        if masked and spec.masked:
            layers.append(dc.ChannelMask(f"b{i}.mask", c_out))
        if spec.has_relu:
            layers.append(dc.ReLU())
        c_in = c_out
    if spatial:
        layers.append(dc.GlobalAvgPool())
    return layers


def _block_param_prefix(spec, i):
    return f"b{i}.conv" if spec.kind == "conv" else f"b{i}.fc"


class MaskedExtractor:
    """Trainable extractor whose masked blocks carry gate parameters ``e``."""

    def __init__(self, specs: Sequence[BlockSpec], input_shape, rng: np.random.Generator,
                 s_max: float = S_MAX_DEFAULT):
        if not specs:
            raise InputError("an extractor needs at least one block")
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.s_max = s_max
        self.layers = build_layers(self.specs, self.input_shape)
        self.store = dc.init_params(self.layers, ParamStore(), rng)
        for i, spec in enumerate(self.specs):
            if spec.masked:
                self.store.add(f"b{i}.mask.e", rng.uniform(-MASK_INIT, MASK_INIT, spec.out_channels),
                               plain=True)

    @property
    def output_dim(self) -> int:
        return self.specs[-1].out_channels

    @property
    def input_channels(self) -> int:
        return self.input_shape[0]

    def mask_names(self):
        return [f"b{i}.mask.e" for i, s in enumerate(self.specs) if s.masked]

    def masks(self, s: float) -> list[ChannelMask | None]:
        """One entry per block; ``None`` for unmasked blocks."""
        return [ChannelMask(self.store[f"b{i}.mask.e"], s, self.s_max) if spec.masked else None
                for i, spec in enumerate(self.specs)]

    def forward(self, x: Tensor, mode="train", s: float | None = None) -> Tensor:
        if s is None:
            s = self.s_max
        return dc.forward(self.layers, self.store, x, mode, mask_scale=s)

    def __call__(self, x, mode="eval", s=None):
        return self.forward(x, mode, s)


def apply_mask(f: Tensor, mask: ChannelMask, layer: int | None = None) -> Tensor:
    """Channel-wise modulation ``f * sigmoid(s * e)``."""
    if f.ndim < 2 or f.shape[1] != mask.e.shape[0]:
        where = f" at layer {layer}" if layer is not None else ""
        raise DimensionError(f"mask{where} has {mask.e.shape[0]} channels, feature map {f.shape}")
    return dc.channel_gate(f, mask.e, mask.s)


def anneal_scale(b: int, B: int, s_max: float) -> float:
    """Gate sharpness for batch ``b`` (1-based) of ``B`` in the current epoch."""
    if B < 1 or not 1 <= b <= B:
        raise InputError(f"batch index {b} outside [1, {B}]")
    if s_max <= 1:
        raise InputError("s_max must exceed 1")
    if B == 1:
        return s_max
    # lerp form of the linear ramp, exact at both endpoints
    f = (b - 1) / (B - 1)
    return (1.0 / s_max) * (1.0 - f) + s_max * f


def compensate_gradient(g, e, s: float) -> np.ndarray:
    """Rescale a gate-parameter gradient so it no longer depends on ``s``."""
    g = np.asarray(g, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if g.shape != e.shape:
        raise DimensionError("gradient and mask parameters differ in shape")
    se = dc.sigmoid(e)
    sse = dc.sigmoid(s * e)
    num = se * (1.0 - se)
    den = np.maximum(s * sse * (1.0 - sse), COMPENSATION_FLOOR)
    return g * num / den


def sparsity_loss(masks: Sequence[ChannelMask | None], specs: Sequence[BlockSpec],
                  input_channels: int) -> Tensor:
    """Fraction of weights left switched on by the gates.

    Unmasked blocks count with all channels on; the input layer counts
    ``input_channels``.
    """
    if not specs:
        raise InputError("sparsity loss over an empty layer list")
    if len(masks) != len(specs):
        raise InputError("need one mask entry (or None) per block")
    norms = [float(input_channels)]
    widths = [input_channels]
    gate_vals = []
    for m, spec in zip(masks, specs):
        widths.append(spec.out_channels)
        if m is None:
            norms.append(float(spec.out_channels))
            gate_vals.append(None)
        else:
            if m.e.shape != (spec.out_channels,):
                raise DimensionError(f"mask has {m.e.shape} entries, block has {spec.out_channels}")
            gv = m.gates
            gate_vals.append(gv)
            norms.append(float(gv.sum()))
    K = [s.kernel_elements for s in specs]
    denom = float(sum(k * widths[l] * widths[l + 1] for l, k in enumerate(K)))
    numer = sum(k * norms[l] * norms[l + 1] for l, k in enumerate(K))
    value = numer / denom

    parents = [m.e for m in masks if m is not None]

    def back(g):
        g = float(g)
        out = []
        for l, m in enumerate(masks):
            if m is None:
                continue
            # norms index l+1 is this block's output
            d = K[l] * norms[l]
            if l + 1 < len(K):
                d += K[l + 1] * norms[l + 2]
            gv = gate_vals[l]
            out.append(g * d / denom * m.s * gv * (1.0 - gv))
        return tuple(out)

    if not parents:
        return Tensor(np.asarray(value))
    return dc._result(np.asarray(value), tuple(parents), back)


# ---------------------------------------------------------------------------
# pruning


class PrunedExtractor:
    """Frozen, channel-sliced copy of a trained ``MaskedExtractor``.

    Kept gates are folded into the batchnorm affine (or the block weights
    when there is no batchnorm), so the output equals the gated network at
    ``s_max`` apart from the dropped channels.
    """

    def __init__(self, specs, input_shape, kept, store: ParamStore):
        self.kept = [np.asarray(k, dtype=np.int64) for k in kept]
        self.specs = tuple(replace(s, out_channels=len(k), masked=False)
                           for s, k in zip(specs, self.kept))
        self.input_shape = tuple(input_shape)
        self.layers = build_layers(self.specs, self.input_shape, masked=False)
        self.store = store
        self.store.freeze()

    @property
    def output_dim(self) -> int:
        return int(len(self.kept[-1]))

    def forward(self, x: Tensor, mode="eval", s=None) -> Tensor:
        # always inference behaviour: frozen batchnorm statistics, no tape
        return dc.forward(self.layers, self.store, x, "eval")

    def __call__(self, x, mode="eval", s=None):
        return self.forward(x)


def kept_channels(e: np.ndarray) -> np.ndarray:
    kept = np.flatnonzero(e > 0)
    if kept.size == 0:
        kept = np.array([int(np.argmax(e))])
    return kept


def binarize_and_prune(ext: MaskedExtractor) -> PrunedExtractor:
    """Drop every channel whose gate parameter is not positive and slice all
    parameters and batchnorm statistics accordingly."""
    src = ext.store
    new = ParamStore()
    kept = []
    prev = np.arange(ext.input_channels)
    for i, spec in enumerate(ext.specs):
        if spec.masked:
            e = src[f"b{i}.mask.e"].data
            keep = kept_channels(e)
            gate = dc.sigmoid(ext.s_max * e[keep])
        else:
            keep = np.arange(spec.out_channels)
            gate = None
        p = _block_param_prefix(spec, i)
        w = src[f"{p}.weight"].data
        b = src[f"{p}.bias"].data
        if spec.kind == "conv":
            w = w[keep][:, prev]
        else:
            w = w[prev][:, keep]
        b = b[keep]
        if spec.has_bn:
            gamma = src[f"b{i}.bn.gamma"].data[keep]
            beta = src[f"b{i}.bn.beta"].data[keep]
            if gate is not None:
                gamma, beta = gamma * gate, beta * gate
            new.add(f"b{i}.bn.gamma", gamma)
            new.add(f"b{i}.bn.beta", beta)
            st = src.bn_stats[f"b{i}.bn"]
            new.bn_stats[f"b{i}.bn"] = dc.BNStats(st.mean[keep].copy(), st.var[keep].copy(), st.momentum)
        elif gate is not None:
            w = w * (gate.reshape(-1, 1, 1, 1) if spec.kind == "conv" else gate)
            b = b * gate
        new.add(f"{p}.weight", w.copy())
        new.add(f"{p}.bias", b.copy())
        kept.append(keep)
        prev = keep
    return PrunedExtractor(ext.specs, ext.input_shape, kept, new)


def count_params(ext) -> int:
    """Inference parameter count: weights, biases and batchnorm scale/shift.
    Gate parameters and running statistics are not counted."""
    store = ext.store if hasattr(ext, "store") else ext
    return sum(t.data.size for n, t in store.params.items() if not n.endswith(".e"))


def expected_param_count(specs: Sequence[BlockSpec], input_channels: int, widths=None) -> int:
    """Parameter count computed from block shapes alone (no tensors)."""
    total = 0
    c_in = input_channels
    for i, spec in enumerate(specs):
        c = spec.out_channels if widths is None else widths[i]
        total += c_in * c * spec.kernel_elements + c
        if spec.has_bn:
            total += 2 * c
        c_in = c
    return total

