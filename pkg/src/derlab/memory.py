"""Rehearsal memory under a fixed budget, filled by herding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


def herding_select(features: np.ndarray, k: int) -> list[int]:
    """Greedy herding: each pick keeps the running mean of the chosen set as
    close as possible to the class mean. Ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InputError("features must be an (n, d) array")
    n = features.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"cannot pick {k} exemplars out of {n}")
    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    picks = []
    for m in range(k):
        cand = (running[None, :] + features) / (m + 1)
        dist = np.sqrt(((mu[None, :] - cand) ** 2).sum(axis=1))
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        picks.append(i)
        taken[i] = True
        running += features[i]
    return picks


@dataclass
class ExemplarMemory:
    """Per-class exemplar lists (dataset indices, herding order).

    ``mode`` is ``"fixed_total"`` (``size`` exemplars shared by all classes)
    or ``"per_class"`` (``size`` exemplars per class).
    """
    mode: str = "fixed_total"
    size: int = 2000
    exemplars: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("fixed_total", "per_class"):
            raise InputError(f"unknown memory mode {self.mode!r}")
        if self.size < 0:
            raise InputError("memory size must be non-negative")

    def quotas(self, classes) -> dict[int, int]:
        classes = sorted(int(c) for c in classes)
        if self.mode == "per_class":
            return {c: self.size for c in classes}
        if not classes:
            return {}
        base, extra = divmod(self.size, len(classes))
        return {c: base + (1 if r < extra else 0) for r, c in enumerate(classes)}

    def per_class_quota(self, n_classes: int) -> int:
        if self.mode == "per_class":
            return self.size
        return self.size // n_classes if n_classes else 0

    def indices(self) -> np.ndarray:
        out = [i for c in sorted(self.exemplars) for i in self.exemplars[c]]
        return np.asarray(out, dtype=np.int64)

    def total(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def copy(self) -> "ExemplarMemory":
        return ExemplarMemory(self.mode, self.size, {c: list(v) for c, v in self.exemplars.items()})


def rebalance(memory: ExemplarMemory, new_class_features: dict) -> ExemplarMemory:
    """Shrink old classes to their new quota and herd exemplars for new ones.

    ``new_class_features`` maps class -> (dataset indices, feature rows).
    Old lists are truncated, never re-selected.
    """
    classes = set(memory.exemplars) | set(int(c) for c in new_class_features)
    quota = memory.quotas(classes)
    out = {}
    for c, lst in memory.exemplars.items():
        out[c] = list(lst[: quota[c]])
    for c, (idx, feats) in new_class_features.items():
        c = int(c)
        idx = np.asarray(idx)
        k = min(quota[c], len(idx))
        out[c] = [int(idx[i]) for i in herding_select(feats, k)] if k > 0 else []
    return ExemplarMemory(memory.mode, memory.size, dict(sorted(out.items())))


def balanced_subset(memory: ExemplarMemory, labels: np.ndarray, new_classes, per_class: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Same number of samples for every seen class.

    Old classes contribute their herding prefix, new classes a uniform
    subsample of their training indices (``labels`` is the label array of
    the training set).
    """
    labels = np.asarray(labels)
    new_classes = [int(c) for c in new_classes]
    out = []
    for c in sorted(memory.exemplars):
        if c in new_classes:
            continue
        lst = memory.exemplars[c]
        if len(lst) < per_class:
            log.info("class %d has only %d exemplars (wanted %d)", c, len(lst), per_class)
        out.extend(lst[:per_class])
    for c in new_classes:
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            log.info("class %d has only %d samples (wanted %d)", c, len(pool), per_class)
            out.extend(pool.tolist())
        else:
            out.extend(np.sort(rng.choice(pool, size=per_class, replace=False)).tolist())
    return np.asarray(out, dtype=np.int64)
