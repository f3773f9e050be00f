"""The expandable model: frozen pruned extractors, one trainable extractor,
a linear classifier over the concatenated features and an auxiliary head
that only sees the newest extractor."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .errors import DimensionError, InputError, StateError
from .extractor import (S_MAX_DEFAULT, BlockSpec, MaskedExtractor, PrunedExtractor,
                        binarize_and_prune, count_params)


def new_head(rng: np.random.Generator, in_dim: int, out_dim: int) -> ParamStore:
    head = ParamStore()
    head.add("weight", dc.he_uniform(rng, (in_dim, out_dim), in_dim))
    head.add("bias", np.zeros(out_dim))
    return head


def head_forward(head: ParamStore, u: Tensor) -> Tensor:
    return dc.affine(u, head["weight"], head["bias"])


class DERModel:
    """State of the learner across incremental steps.

    With ``expandable=False`` the model keeps a single extractor that is
    trained at every step (the finetune reference learner).
    """

    def __init__(self, input_shape, s_max: float = S_MAX_DEFAULT, expandable: bool = True):
        self.input_shape = tuple(input_shape)
        self.s_max = s_max
        self.expandable = expandable
        self.frozen: list[PrunedExtractor] = []
        self.current: MaskedExtractor | None = None
        self.warm_source: MaskedExtractor | None = None
        self.classifier: ParamStore | None = None
        self.aux: ParamStore | None = None
        self.classes: list[int] = []
        self.new_classes: list[int] = []
        self.step = 0

    @property
    def segment_dims(self) -> list[int]:
        dims = [f.output_dim for f in self.frozen]
        if self.current is not None:
            dims.append(self.current.output_dim)
        return dims

    @property
    def feature_dim(self) -> int:
        return sum(self.segment_dims)

    def column_of(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(y)] for y in np.ravel(labels)], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"label {exc.args[0]} has not been seen by the model") from None

    def extractor_stores(self) -> list[ParamStore]:
        stores = [f.store for f in self.frozen]
        if self.current is not None:
            stores.append(self.current.store)
        return stores

    def param_count(self) -> int:
        """Parameters used at inference: every extractor plus the classifier."""
        total = sum(count_params(f) for f in self.frozen)
        if self.current is not None:
            total += count_params(self.current)
        if self.classifier is not None:
            total += self.classifier.numel()
        return total


def _warm_start(new: MaskedExtractor, old: MaskedExtractor) -> None:
    for name, t in new.store.params.items():
        if name.endswith(".e") or name not in old.store:
            continue
        src = old.store[name].data
        if src.shape == t.data.shape:
            t.data = src.copy()
    for name, st in new.store.bn_stats.items():
        src = old.store.bn_stats.get(name)
        if src is not None and src.mean.shape == st.mean.shape:
            st.mean, st.var = src.mean.copy(), src.var.copy()


def expand(model: DERModel, specs: Sequence[BlockSpec], new_classes: Sequence[int],
           rng: np.random.Generator) -> DERModel:
    """Open step t: freeze the previous extractor, add a fresh one and grow
    the classifier. Old classifier rows x old columns are inherited."""
    new_classes = [int(c) for c in new_classes]
    if not new_classes:
        raise InputError("a step must introduce at least one class")
    overlap = set(new_classes) & set(model.classes)
    if overlap:
        raise InputError(f"classes {sorted(overlap)} were already learned")

    if model.expandable:
        if model.current is not None:
            finish_extractor(model)
        cur = MaskedExtractor(specs, model.input_shape, rng, model.s_max)
        if model.warm_source is not None:
            _warm_start(cur, model.warm_source)
        model.current = cur
    elif model.current is None:
        model.current = MaskedExtractor(specs, model.input_shape, rng, model.s_max)

    d_new = model.feature_dim
    c_old = len(model.classes)
    c_new = c_old + len(new_classes)
    head = new_head(rng, d_new, c_new)
    if model.classifier is not None:
        w_old = model.classifier["weight"].data
        if w_old.shape[0] > d_new:
            raise DimensionError("classifier has more input rows than the super-feature")
        head["weight"].data[: w_old.shape[0], :c_old] = w_old
        head["bias"].data[:c_old] = model.classifier["bias"].data
    model.classifier = head

    model.step += 1
    model.classes = model.classes + new_classes
    model.new_classes = new_classes
    if model.expandable and model.step >= 2:
        model.aux = new_head(rng, model.current.output_dim, len(new_classes) + 1)
    else:
        model.aux = None
    return model


def finish_extractor(model: DERModel) -> PrunedExtractor:
    """Binarise and prune the current extractor, append it to the frozen
    list and drop the classifier rows of the removed channels."""
    if model.current is None:
        raise StateError("no trainable extractor to finish")
    pruned = binarize_and_prune(model.current)
    offset = sum(f.output_dim for f in model.frozen)
    if model.classifier is not None:
        w = model.classifier["weight"]
        rows = np.concatenate([np.arange(offset), offset + pruned.kept[-1]])
        w.data = w.data[rows].copy()
        model.classifier.momentum.pop("weight", None)
    model.frozen.append(pruned)
    model.warm_source = model.current
    model.current = None
    model.aux = None
    return pruned


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def super_forward(model: DERModel, x, mode: str = "eval", s: float | None = None,
                  return_current: bool = False):
    """Concatenated features of all segments in step order.

    Frozen segments always run in inference mode. The trainable extractor
    uses soft gates at scale ``s`` in train mode and ``s_max`` in eval mode.
    """
    x = _as_tensor(x)
    if tuple(x.shape[1:]) != model.input_shape:
        raise InputError(f"input shape {x.shape[1:]} does not match {model.input_shape}")
    parts = [f.forward(x) for f in model.frozen]
    cur = None
    if model.current is not None:
        scale = model.s_max if (mode == "eval" or s is None) else s
        cur = model.current.forward(x, mode, scale)
        parts.append(cur)
    if not parts:
        raise StateError("model has no extractor yet")
    u = parts[0] if len(parts) == 1 else dc.concat(parts)
    if return_current:
        return u, cur
    return u


def logits(model: DERModel, u: Tensor) -> Tensor:
    if model.classifier is None:
        raise StateError("model has no classifier")
    return head_forward(model.classifier, u)


def predict(model: DERModel, x):
    """Predicted labels and class probabilities (columns follow
    ``model.classes``). Ties go to the lowest column."""
    u = super_forward(model, x, "eval")
    with dc.no_grad():
        z = logits(model, u).data
    probs = dc.softmax(z)
    cols = np.argmax(z, axis=1)
    return np.asarray(model.classes)[cols], probs


def aux_logits(model: DERModel, x, mode: str = "eval", s: float | None = None) -> Tensor:
    if model.aux is None or model.step < 2:
        raise StateError("the auxiliary head only exists from step 2 on")
    x = _as_tensor(x)
    scale = model.s_max if (mode == "eval" or s is None) else s
    feat = model.current.forward(x, mode, scale)
    return head_forward(model.aux, feat)


def aux_targets(model: DERModel, labels) -> np.ndarray:
    """0 for any old class, 1 + rank (by label id) among the step's new
    classes otherwise."""
    rank = {c: i + 1 for i, c in enumerate(sorted(model.new_classes))}
    return np.array([rank.get(int(y), 0) for y in np.ravel(labels)], dtype=np.int64)


def extract_features(model: DERModel, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Inference-mode super-features for a whole array, batched."""
    out = []
    for lo in range(0, len(x), batch):
        out.append(super_forward(model, x[lo:lo + batch], "eval").data)
    if not out:
        return np.zeros((0, model.feature_dim))
    return np.concatenate(out)
