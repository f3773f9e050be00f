"""Datasets, the binary dataset format and incremental class splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

MAGIC = b"CILD"
VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise InputError("x and y differ in length")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self):
        return tuple(self.x.shape[1:])

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.y, list(classes)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.class_count, self.split)


@dataclass
class SplitPlan:
    class_order: list[int]
    base_classes: int
    increments: list[int]

    def __post_init__(self):
        if any(i < 1 for i in self.increments):
            raise InputError("every step must add at least one class")
        if sum(self.increments) != len(self.class_order):
            raise InputError("increments do not cover the class order")

    @property
    def steps(self) -> int:
        return len(self.increments)

    def groups(self) -> list[list[int]]:
        out, lo = [], 0
        for n in self.increments:
            out.append(list(self.class_order[lo:lo + n]))
            lo += n
        return out


def make_splits(class_count: int, base: int, steps: int, order_seed: int) -> SplitPlan:
    """Seeded class order; ``base`` classes first (none when 0), then the
    rest in ``steps`` equal increments."""
    if class_count < 1 or steps < 1 or base < 0 or base >= class_count:
        raise InputError(f"bad split: {class_count} classes, base {base}, {steps} steps")
    rest = class_count - base
    if rest % steps:
        raise InputError(f"{rest} remaining classes cannot be divided into {steps} equal steps")
    order = np.random.default_rng(order_seed).permutation(class_count).tolist()
    increments = ([base] if base else []) + [rest // steps] * steps
    return SplitPlan(order, base, increments)


def generate_synthetic(classes: int, per_class_train: int, per_class_test: int, dim: int,
                       spread: float, seed: int, shape=None) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around class means drawn on the unit sphere.

    ``shape`` (e.g. ``(c, h, w)``) reshapes each sample; its element count
    replaces ``dim``. Values are rounded to float32 so datasets survive the
    binary format bit-exactly.
    """
    if classes < 2:
        raise InputError("need at least two classes")
    if spread <= 0:
        raise InputError("spread must be positive")
    sample_shape = (dim,) if shape is None else tuple(shape)
    d = int(np.prod(sample_shape))
    if d < 2:
        raise InputError("need at least two feature dimensions")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    def draw(per_class, split):
        y = np.repeat(np.arange(classes), per_class)
        x = means[y] + spread * rng.standard_normal((len(y), d))
        x = x.astype(np.float32).astype(np.float64).reshape((len(y),) + sample_shape)
        return Dataset(x, y, classes, split)

    train = draw(per_class_train, "train")
    test = draw(per_class_test, "test")
    return train, test


_HEAD = struct.Struct("<4sIQII")


def save_dataset(ds: Dataset, path) -> None:
    shape = ds.sample_shape
    per = int(np.prod(shape))
    payload = np.ascontiguousarray(ds.x, dtype="<f4").reshape(len(ds), per)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(ds), ds.class_count, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        rec = np.zeros(len(ds), dtype=[("label", "<u4"), ("x", "<f4", (per,))])
        rec["label"] = ds.y
        rec["x"] = payload
        fh.write(rec.tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    """Parse a CILD file. Every structural problem raises ``FormatError``
    with the byte offset at which it was found."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise FormatError("file too short for header", len(buf))
    magic, version, n, class_count, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEAD.size
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated shape block", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    per = int(np.prod(shape))
    rec_size = 4 + 4 * per
    need = off + n * rec_size
    if len(buf) < need:
        raise FormatError(f"truncated records: expected {need} bytes, found {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after last record", need)
    rec = np.frombuffer(buf, dtype=[("label", "<u4"), ("x", "<f4", (per,))], count=n, offset=off)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= class_count {class_count}",
                          off + int(bad[0]) * rec_size)
    x = rec["x"].astype(np.float64).reshape((n,) + tuple(shape))
    return Dataset(x, labels, class_count, split)
