import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from derlab.dermodel import DERModel, expand, extract_features
from derlab.diffcore import SgdConfig
from derlab.errors import InputError, StateError
from derlab.extractor import BlockSpec
from derlab.metrics import (AccuracyMatrix, accuracy, avg_incremental_accuracy, bwt, fresh_baseline,
                            fwt, head_scores, ideal_boundary_probe, restricted_accuracy)
from derlab.protocol import generate_synthetic
from derlab.trainer import TrainConfig


def test_avg_incremental_accuracy():
    assert avg_incremental_accuracy([0.8]) == 0.8
    assert avg_incremental_accuracy([1.0, 0.5]) == 0.75
    with pytest.raises(InputError):
        avg_incremental_accuracy([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_avg_within_range(vals):
    a = avg_incremental_accuracy(vals)
    assert min(vals) - 1e-12 <= a <= max(vals) + 1e-12


def test_bwt_worked_example():
    A = AccuracyMatrix.from_rows([[0.9], [0.8, 0.7]])
    # exact up to the rounding of 0.8 - 0.9 in binary floating point
    assert bwt(A) == pytest.approx(-0.05, abs=1e-15)


def test_bwt_constant_columns_is_zero():
    A = AccuracyMatrix.from_rows([[0.5], [0.5, 0.7], [0.5, 0.7, 0.2]])
    assert bwt(A) == 0.0


def test_bwt_needs_two_steps():
    with pytest.raises(InputError):
        bwt(AccuracyMatrix.from_rows([[0.4]]))


def test_fwt_examples():
    assert fwt(AccuracyMatrix.from_rows([[0.5], [0.1, 0.9]], {2: 0.8})) == pytest.approx(0.1, abs=1e-15)
    A = AccuracyMatrix.from_rows([[0.5], [0.1, 0.7], [0.1, 0.1, 0.5]], {2: 0.6, 3: 0.6})
    assert fwt(A) == pytest.approx(0.0, abs=1e-15)
    same = AccuracyMatrix.from_rows([[0.5], [0.1, 0.3]], {2: 0.3})
    assert fwt(same) == 0.0


def test_fwt_missing_baseline():
    with pytest.raises(StateError):
        fwt(AccuracyMatrix.from_rows([[0.5], [0.1, 0.9]]))


def _to_matrix(d, T):
    return AccuracyMatrix.from_rows([[d[i][j] for j in range(1, i + 1)] for i in range(1, T + 1)])


def test_metrics_match_literal_formulas():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(2, 11))
        d = oracles.random_matrix(rng, T)
        base = {i: float(rng.uniform()) for i in range(2, T + 1)}
        A = _to_matrix(d, T)
        A.baseline = base
        assert abs(bwt(A) - oracles.bwt_literal(d, T)) <= 1e-12
        assert abs(fwt(A) - oracles.fwt_literal(d, base, T)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 3.0))
def test_bwt_linear_in_deltas(seed, c):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 7))
    diag = rng.uniform(0.3, 0.6, T)
    delta = rng.uniform(-0.1, 0.1, (T, T))
    rows = lambda k: [[diag[j] + (k * delta[i, j] if j < i else 0.0) for j in range(i + 1)]
                      for i in range(T)]
    assert bwt(AccuracyMatrix.from_rows(rows(c))) == pytest.approx(
        c * bwt(AccuracyMatrix.from_rows(rows(1.0))), rel=1e-9, abs=1e-13)


def test_matrix_rejects_upper_triangle_and_range():
    A = AccuracyMatrix()
    with pytest.raises(InputError):
        A.set(1, 2, 0.5)
    with pytest.raises(InputError):
        A.set(2, 1, 1.5)


def test_restricted_accuracy_single_class_subset():
    scores = np.array([[5.0, 0.0, 1.0], [0.0, 3.0, 9.0]])
    labels = np.array([1, 1])
    assert restricted_accuracy(scores, labels, [0, 1, 2], [1]) == 1.0
    assert restricted_accuracy(scores, labels, [0, 1, 2]) == 0.0


def test_restriction_never_hurts_in_subset_samples():
    rng = np.random.default_rng(1)
    for _ in range(200):
        c = int(rng.integers(2, 7))
        scores = rng.standard_normal((30, c))
        labels = rng.integers(0, c, 30)
        subset = sorted(rng.choice(c, size=int(rng.integers(1, c + 1)), replace=False).tolist())
        keep = np.isin(labels, subset)
        if not keep.any():
            continue
        full = np.mean(np.argmax(scores[keep], axis=1) == labels[keep])
        assert restricted_accuracy(scores, labels, list(range(c)), subset) >= full


def test_random_model_accuracy_near_chance():
    # labels independent of the inputs: every prediction is right with
    # probability 1/c, so the accuracy is binomial
    c, n = 5, 2000
    rng = np.random.default_rng(2)
    x = rng.standard_normal((n, 8))
    y = rng.permutation(np.repeat(np.arange(c), n // c))
    m = DERModel((8,))
    expand(m, [BlockSpec("affine", 16)], list(range(c)), np.random.default_rng(3))
    acc = accuracy(m, x, y)
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
    assert abs(acc - 1 / c) <= 3 * sigma


def test_accuracy_empty_subset():
    m = DERModel((3,))
    expand(m, [BlockSpec("affine", 4)], [0, 1], np.random.default_rng(0))
    with pytest.raises(InputError):
        accuracy(m, np.zeros((2, 3)), np.array([0, 0]), label_subset=[1])


def test_probe_fits_separable_features_and_leaves_model_alone():
    tr, _ = generate_synthetic(3, 20, 1, 4, 0.02, seed=4)
    m = DERModel((4,))
    expand(m, [BlockSpec("affine", 12, has_bn=False)], [0, 1, 2], np.random.default_rng(5))
    before = {n: t.data.tobytes() for n, t in m.current.store.params.items()}
    clf = m.classifier["weight"].data.tobytes()
    cfg = TrainConfig(stage2_epochs=60, stage2=SgdConfig(warmup_epochs=0, decay_epochs=(50,)))
    feats = extract_features(m, tr.x)
    head = ideal_boundary_probe(m, tr.x, tr.y, cfg, np.random.default_rng(6))
    pred = np.asarray(m.classes)[np.argmax(head_scores(head, feats), axis=1)]
    assert np.mean(pred == tr.y) == 1.0
    assert before == {n: t.data.tobytes() for n, t in m.current.store.params.items()}
    assert m.classifier["weight"].data.tobytes() == clf


def test_fresh_baseline_deterministic():
    tr, te = generate_synthetic(4, 15, 10, 5, 0.2, seed=7)
    cfg = TrainConfig(stage1_epochs=3, stage1=SgdConfig(warmup_epochs=1, decay_epochs=(2,)))
    specs = [BlockSpec("affine", 8)]
    args = (cfg, specs, (5,), [0, 1, 2, 3], tr.x, tr.y, te.x, te.y, [2, 3])
    a = fresh_baseline(*args, np.random.default_rng(8))
    b = fresh_baseline(*args, np.random.default_rng(8))
    assert a == b and 0.0 <= a <= 1.0
