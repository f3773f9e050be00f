"""Accuracy bookkeeping and transfer metrics.

Accuracies are fractions in [0, 1]; conversion to percent happens only when
reports are formatted.
"""

from __future__ import annotations

import copy
import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dermodel import DERModel, expand, extract_features, new_head
from .errors import InputError, StateError
from .extractor import BlockSpec
from .trainer import TrainConfig, fit_head, train_representation


@dataclass
class AccuracyMatrix:
    """``entries[(i, j)]`` is the accuracy on class group j after step i
    (both 1-based, j <= i). ``baseline[i]`` is the fresh-model accuracy on
    group i."""
    entries: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def set(self, i: int, j: int, value: float) -> None:
        if not 1 <= j <= i:
            raise InputError(f"entry ({i}, {j}) is outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise InputError(f"accuracy {value} outside [0, 1]")
        self.entries[(i, j)] = float(value)

    def get(self, i: int, j: int) -> float:
        return self.entries[(i, j)]

    @property
    def steps(self) -> int:
        return max((i for i, _ in self.entries), default=0)

    def row(self, i: int) -> list[float]:
        return [self.entries[(i, j)] for j in range(1, i + 1) if (i, j) in self.entries]

    @classmethod
    def from_rows(cls, rows, baseline=None):
        m = cls()
        for i, row in enumerate(rows, 1):
            for j, v in enumerate(row, 1):
                m.set(i, j, v)
        if baseline:
            m.baseline = {int(k): float(v) for k, v in baseline.items()}
        return m


def restricted_accuracy(scores: np.ndarray, labels: np.ndarray, classes: Sequence[int],
                        label_subset=None) -> float:
    """Accuracy of ``argmax`` over score columns (ordered as ``classes``);
    with ``label_subset`` only those samples and those columns count."""
    classes = np.asarray(classes)
    labels = np.asarray(labels)
    if label_subset is None:
        if labels.size == 0:
            raise InputError("no test samples")
        return float(np.mean(classes[np.argmax(scores, axis=1)] == labels))
    subset = [int(c) for c in label_subset]
    keep = np.isin(labels, subset)
    if not keep.any():
        raise InputError("no test samples for the requested classes")
    lookup = {int(c): i for i, c in enumerate(classes)}
    cols = np.array([lookup[c] for c in subset])
    pred = np.asarray(subset)[np.argmax(scores[keep][:, cols], axis=1)]
    return float(np.mean(pred == labels[keep]))


def head_scores(head, feats: np.ndarray) -> np.ndarray:
    return feats @ head["weight"].data + head["bias"].data


def accuracy(model: DERModel, x: np.ndarray, y: np.ndarray, label_subset=None, head=None) -> float:
    """Test accuracy of ``model`` (or of ``head`` on the model's features),
    optionally with the prediction space restricted to ``label_subset``."""
    if label_subset is not None:
        keep = np.isin(y, list(label_subset))
        x, y = x[keep], y[keep]
    if len(y) == 0:
        raise InputError("empty test set")
    feats = extract_features(model, x)
    scores = head_scores(head if head is not None else model.classifier, feats)
    return restricted_accuracy(scores, y, model.classes, label_subset)


def avg_incremental_accuracy(per_step: Sequence[float]) -> float:
    if len(per_step) == 0:
        raise InputError("no step accuracies")
    return float(sum(per_step) / len(per_step))


def bwt(A: AccuracyMatrix) -> float:
    """Backward transfer: mean over later steps i of the average change of
    every group's accuracy since it was learned (normalised by i)."""
    T = A.steps
    if T < 2:
        raise InputError("backward transfer needs at least two steps")
    total = 0.0
    for i in range(2, T + 1):
        try:
            inner = sum(A.get(i, j) - A.get(j, j) for j in range(1, i + 1))
        except KeyError as exc:
            raise StateError(f"accuracy entry {exc.args[0]} missing") from None
        total += inner / i
    return total / (T - 1)


def fwt(A: AccuracyMatrix) -> float:
    """Forward transfer: mean gap between the new group's accuracy and a
    freshly trained model's accuracy on that group."""
    T = A.steps
    if T < 2:
        raise InputError("forward transfer needs at least two steps")
    total = 0.0
    for i in range(2, T + 1):
        if i not in A.baseline:
            raise StateError(f"no fresh baseline for step {i}")
        if (i, i) not in A.entries:
            raise StateError(f"accuracy entry ({i}, {i}) missing")
        total += A.get(i, i) - A.baseline[i]
    return total / (T - 1)


def ideal_boundary_probe(model: DERModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                         rng: np.random.Generator, feats: np.ndarray | None = None):
    """Linear head fitted on all observed training data over the frozen
    features. The model itself is left untouched."""
    if feats is None:
        feats = extract_features(model, x)
    head = new_head(rng, model.feature_dim, len(model.classes))
    return fit_head(head, feats, model.column_of(y), cfg.stage2, cfg.stage2_epochs,
                    cfg.batch_size, 1.0, rng)


def fresh_baseline(cfg: TrainConfig, specs: Sequence[BlockSpec], input_shape, classes,
                   x: np.ndarray, y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                   new_classes, rng: np.random.Generator) -> float:
    """Accuracy on ``new_classes`` of one extractor trained from scratch on
    ``(x, y)`` with plain cross-entropy."""
    plain = [replace(s, masked=False) for s in specs]
    model = DERModel(input_shape, cfg.s_max, expandable=False)
    expand(model, plain, list(classes), rng)
    plain_cfg = replace(cfg, lambda_a=0.0, lambda_s=0.0)
    train_representation(model, x, y, plain_cfg, rng)
    return accuracy(model, test_x, test_y, label_subset=new_classes)


def lambda_a_sweep(config, values: Sequence[float], seeds: Sequence[int] | None = None,
                   datasets=None) -> list[dict]:
    """Average incremental accuracy (mean and sample stdev over seeds) for
    each auxiliary-loss weight."""
    from .config import with_seed
    from .experiment import run_experiment

    if not values:
        raise InputError("no lambda_a values")
    bases = [config] if seeds is None else [with_seed(config, sd) for sd in seeds]
    rows = []
    for v in values:
        avgs = []
        for base in bases:
            cfg = copy.deepcopy(base)
            cfg.train = replace(cfg.train, lambda_a=float(v))
            avgs.append(run_experiment(cfg, datasets).summary["avg"])
        rows.append({
            "lambda_a": float(v),
            "avg": statistics.fmean(avgs),
            "std": statistics.stdev(avgs) if len(avgs) > 1 else 0.0,
            "runs": avgs,
        })
    return rows
