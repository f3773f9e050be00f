import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derlab.errors import FormatError, InputError
from derlab.protocol import (Dataset, generate_synthetic, load_dataset, make_splits,
                             save_dataset)


def test_split_from_scratch():
    plan = make_splits(100, 0, 10, 0)
    assert plan.increments == [10] * 10


def test_split_with_base_half():
    plan = make_splits(100, 50, 5, 0)
    assert plan.increments == [50, 10, 10, 10, 10, 10]
    assert [len(g) for g in plan.groups()] == plan.increments


def test_split_deterministic():
    assert make_splits(6, 0, 3, 42).class_order == make_splits(6, 0, 3, 42).class_order


def test_split_not_divisible_names_counts():
    with pytest.raises(InputError, match="7.*3"):
        make_splits(7, 0, 3, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10), st.integers(0, 2**31))
def test_split_partition(steps, per, base, seed):
    total = base + steps * per
    plan = make_splits(total, base, steps, seed)
    groups = plan.groups()
    flat = [c for g in groups for c in g]
    assert sorted(flat) == list(range(total))
    assert len(groups) == steps + (1 if base else 0)


def test_synthetic_counts_and_determinism():
    tr, te = generate_synthetic(5, 7, 3, 4, 0.3, seed=1)
    assert np.bincount(tr.y).tolist() == [7] * 5
    assert np.bincount(te.y).tolist() == [3] * 5
    tr2, _ = generate_synthetic(5, 7, 3, 4, 0.3, seed=1)
    assert tr.x.tobytes() == tr2.x.tobytes()


def test_synthetic_small_spread_is_nearest_mean_separable():
    tr, te = generate_synthetic(6, 20, 20, 8, 1e-4, seed=2)
    means = np.stack([tr.x[tr.y == c].mean(axis=0) for c in range(6)])
    pred = np.argmin(((te.x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == te.y) == 1.0


def test_synthetic_image_shape():
    tr, _ = generate_synthetic(3, 2, 1, 0, 0.3, seed=0, shape=(2, 3, 3))
    assert tr.x.shape == (6, 2, 3, 3)


@pytest.mark.parametrize("shape", [None, (2, 3, 3)])
def test_round_trip(tmp_path, shape):
    tr, _ = generate_synthetic(4, 5, 1, 6, 0.3, seed=3, shape=shape)
    path = tmp_path / "d.cild"
    save_dataset(tr, path)
    back = load_dataset(path)
    assert back.x.tobytes() == tr.x.tobytes()
    np.testing.assert_array_equal(back.y, tr.y)
    assert back.class_count == 4


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 2, "train")
    save_dataset(ds, tmp_path / "e.cild")
    back = load_dataset(tmp_path / "e.cild")
    assert len(back) == 0 and back.sample_shape == (3,)


def _saved(tmp_path):
    tr, _ = generate_synthetic(3, 4, 1, 2, 0.3, seed=4)
    path = tmp_path / "d.cild"
    save_dataset(tr, path)
    return path, path.read_bytes()


def test_bad_magic(tmp_path):
    path, raw = _saved(tmp_path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_dataset(path)


def test_truncated(tmp_path):
    path, raw = _saved(tmp_path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="offset"):
        load_dataset(path)


def test_label_overflow(tmp_path):
    path, raw = _saved(tmp_path)
    header = struct.calcsize("<4sIQII") + 4  # one shape entry
    buf = bytearray(raw)
    buf[header:header + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="label"):
        load_dataset(path)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3, "train")
