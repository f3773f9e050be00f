"""Two-stage training for one incremental step.

Stage 1 learns the representation on new data plus memory with
``L_H + lambda_a * L_aux + lambda_s * L_S``; stage 2 re-initialises the
classifier and fits it on a class-balanced subset with a softmax
temperature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dermodel import (DERModel, aux_targets, extract_features, head_forward, logits,
                       new_head, super_forward)
from .diffcore import ParamStore, SgdConfig
from .errors import InputError, StateError
from .extractor import S_MAX_DEFAULT, anneal_scale, compensate_gradient, sparsity_loss
from .memory import ExemplarMemory, balanced_subset

log = logging.getLogger(__name__)

METHODS = ("der", "finetune", "joint")


@dataclass
class TrainConfig:
    lambda_a: float = 1.0
    lambda_s: float = 0.25
    delta: float = 1.0
    stage1: SgdConfig = field(default_factory=lambda: SgdConfig(
        base_lr=0.1, momentum=0.9, weight_decay=5e-4, warmup_epochs=3,
        warmup_end_lr=0.1, decay_epochs=(20, 25), decay_factor=0.1))
    stage1_epochs: int = 30
    stage2: SgdConfig = field(default_factory=lambda: SgdConfig(
        base_lr=0.1, momentum=0.9, weight_decay=5e-4, warmup_epochs=0,
        warmup_end_lr=0.1, decay_epochs=(5,), decay_factor=0.1))
    stage2_epochs: int = 10
    batch_size: int = 32
    s_max: float = S_MAX_DEFAULT
    seed: int = 0
    prune: bool = True
    method: str = "der"

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_s < 0:
            raise InputError("loss coefficients must be non-negative")
        if self.delta <= 0:
            raise InputError("delta must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise InputError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.s_max <= 1:
            raise InputError("s_max must exceed 1")
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}")


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one purpose (init, shuffling, ...) of a run."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def der_loss(model: DERModel, xb, yb, s: float, cfg: TrainConfig):
    """Stage-1 objective on one batch. Returns the total and its parts
    (classifier, auxiliary, sparsity) as tensors; absent parts are None."""
    u, cur = super_forward(model, xb, "train", s, return_current=True)
    loss_h = dc.softmax_cross_entropy(logits(model, u), model.column_of(yb))
    total = loss_h
    loss_a = loss_s = None
    lambda_a = 0.0 if model.step <= 1 else cfg.lambda_a
    if lambda_a and model.aux is not None:
        loss_a = dc.softmax_cross_entropy(head_forward(model.aux, cur), aux_targets(model, yb))
        total = dc.add(total, dc.scale(loss_a, lambda_a))
    if cfg.lambda_s and model.current.mask_names():
        cur_ext = model.current
        loss_s = sparsity_loss(cur_ext.masks(s), cur_ext.specs, cur_ext.input_channels)
        total = dc.add(total, dc.scale(loss_s, cfg.lambda_s))
    return total, (loss_h, loss_a, loss_s)


def _trainable_stores(model: DERModel) -> list[ParamStore]:
    stores = [model.current.store, model.classifier]
    if model.aux is not None:
        stores.append(model.aux)
    return stores


def train_representation(model: DERModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                         rng: np.random.Generator) -> DERModel:
    """Stage 1 on the step's data (new samples plus memory)."""
    n = len(y)
    if n == 0:
        raise InputError("no training data for this step")
    if model.current is None:
        raise StateError("model has no trainable extractor; call expand first")
    bs = cfg.batch_size
    n_batches = math.ceil(n / bs)
    ext = model.current
    stores = _trainable_stores(model)
    for epoch in range(cfg.stage1_epochs):
        lr = dc.lr_at(cfg.stage1, epoch)
        perm = rng.permutation(n)
        running = 0.0
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            s = anneal_scale(b + 1, n_batches, cfg.s_max)
            total, _ = der_loss(model, x[idx], y[idx], s, cfg)
            dc.backward(total)
            for name in ext.mask_names():
                t = ext.store[name]
                if t.grad is not None:
                    t.grad = compensate_gradient(t.grad, t.data, s)
            for st in stores:
                dc.sgd_step(st, cfg.stage1, lr)
            running += float(total.data) * len(idx)
        log.debug("step %d epoch %d lr %.4g loss %.5f", model.step, epoch, lr, running / n)
    return model


def fit_head(head: ParamStore, feats: np.ndarray, targets: np.ndarray, sgd: SgdConfig,
             epochs: int, batch_size: int, temperature: float, rng: np.random.Generator) -> ParamStore:
    """Train a linear head on fixed features with tempered cross-entropy."""
    n = len(targets)
    for epoch in range(epochs):
        lr = dc.lr_at(sgd, epoch)
        perm = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            z = head_forward(head, dc.Tensor(feats[idx]))
            loss = dc.softmax_cross_entropy(z, targets[idx], temperature)
            dc.backward(loss)
            dc.sgd_step(head, sgd, lr, require=("weight", "bias"))
    return head


def _snapshot(stores):
    return [{n: t.data.tobytes() for n, t in st.params.items()} for st in stores]


def train_classifier(model: DERModel, memory: ExemplarMemory, train_x: np.ndarray,
                     train_y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
                     per_class: int | None = None) -> DERModel:
    """Stage 2: fresh classifier fitted on a class-balanced subset.

    ``per_class`` defaults to the memory's current per-class quota.
    """
    if per_class is None:
        per_class = memory.per_class_quota(len(model.classes))
    idx = balanced_subset(memory, train_y, model.new_classes, per_class, rng)
    if idx.size == 0:
        raise StateError("balanced subset is empty")
    before = _snapshot(model.extractor_stores())
    feats = extract_features(model, train_x[idx])
    model.classifier = new_head(rng, model.feature_dim, len(model.classes))
    fit_head(model.classifier, feats, model.column_of(train_y[idx]), cfg.stage2,
             cfg.stage2_epochs, cfg.batch_size, cfg.delta, rng)
    if _snapshot(model.extractor_stores()) != before:
        raise StateError("extractor parameters changed during classifier training")
    return model
