import math

import numpy as np
import pytest

from derlab import diffcore as dc
from derlab.dermodel import (DERModel, aux_logits, aux_targets, expand, extract_features,
                             finish_extractor, head_forward, logits, predict, super_forward)
from derlab.errors import InputError, StateError
from derlab.extractor import BlockSpec
from derlab.trainer import TrainConfig, der_loss

SPECS8 = [BlockSpec("affine", 8)]


def _model(rng, steps, specs=SPECS8, dim=5, per_step=2):
    m = DERModel((dim,))
    for t in range(steps):
        expand(m, specs, list(range(t * per_step, (t + 1) * per_step)), rng)
    return m


def _set_mask(ext, block, e):
    ext.store[f"b{block}.mask.e"].data = np.asarray(e, dtype=np.float64)


def test_first_step_shapes():
    m = _model(np.random.default_rng(0), 1)
    assert m.frozen == [] and m.aux is None
    assert m.classifier["weight"].data.shape == (8, 2)


def test_second_step_classifier_grows_and_inherits():
    rng = np.random.default_rng(1)
    m = _model(rng, 1)
    # three channels dropped at step 1 -> frozen dim 5
    _set_mask(m.current, 0, [1, 1, -1, 1, -1, 1, -1, 1])
    kept = np.flatnonzero(m.current.store["b0.mask.e"].data > 0)
    old_w = m.classifier["weight"].data.copy()
    old_b = m.classifier["bias"].data.copy()
    expand(m, SPECS8, [2, 3], rng)
    w = m.classifier["weight"].data
    assert w.shape == (13, 4)
    np.testing.assert_array_equal(w[:5, :2], old_w[kept])
    np.testing.assert_array_equal(m.classifier["bias"].data[:2], old_b)
    assert head_forward(m.aux, dc.Tensor(np.zeros((1, 8)))).shape == (1, 3)


def test_aux_arity_ten_new_classes():
    m = DERModel((4,))
    rng = np.random.default_rng(2)
    expand(m, SPECS8, [0], rng)
    expand(m, SPECS8, list(range(1, 11)), rng)
    assert aux_logits(m, np.zeros((2, 4))).shape == (2, 11)


def test_aux_logits_at_first_step_is_state_error():
    m = _model(np.random.default_rng(3), 1)
    with pytest.raises(StateError):
        aux_logits(m, np.zeros((1, 5)))


def test_aux_target_mapping():
    m = DERModel((3,))
    rng = np.random.default_rng(4)
    expand(m, SPECS8, [4, 1], rng)
    expand(m, SPECS8, [7, 2, 5], rng)
    np.testing.assert_array_equal(aux_targets(m, [4, 1, 2, 5, 7]), [0, 0, 1, 2, 3])


def test_expand_without_classes_rejected():
    with pytest.raises(InputError):
        expand(DERModel((3,)), SPECS8, [], np.random.default_rng(0))


def test_super_feature_is_concatenation_in_step_order():
    rng = np.random.default_rng(5)
    m = DERModel((6,))
    widths = [4, 4, 6]
    for t, w in enumerate(widths):
        expand(m, [BlockSpec("affine", w)], [2 * t, 2 * t + 1], rng)
        _set_mask(m.current, 0, np.ones(w))
    x = rng.standard_normal((7, 6))
    u = super_forward(m, x).data
    assert u.shape == (7, 14) and m.segment_dims == [4, 4, 6]
    np.testing.assert_array_equal(u[:, :4], m.frozen[0].forward(dc.Tensor(x)).data)
    np.testing.assert_array_equal(u[:, 4:8], m.frozen[1].forward(dc.Tensor(x)).data)


def test_first_step_feature_is_single_extractor():
    rng = np.random.default_rng(6)
    m = _model(rng, 1)
    x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(super_forward(m, x).data, m.current.forward(dc.Tensor(x), "eval").data)


def test_input_dimension_mismatch():
    m = _model(np.random.default_rng(7), 1)
    with pytest.raises(InputError):
        super_forward(m, np.zeros((2, 4)))


def test_predict_hand_softmax():
    m = _model(np.random.default_rng(8), 1, per_step=3)
    m.classifier["weight"].data[:] = 0.0
    m.classifier["bias"].data[:] = [0.0, 0.0, 1.0]
    labels, probs = predict(m, np.random.default_rng(9).standard_normal((4, 5)))
    np.testing.assert_array_equal(labels, [2, 2, 2, 2])
    np.testing.assert_allclose(probs[:, 2], math.e / (2 + math.e), rtol=1e-14)


def test_predict_single_class():
    m = _model(np.random.default_rng(10), 1, per_step=1)
    labels, probs = predict(m, np.random.default_rng(11).standard_normal((5, 5)))
    np.testing.assert_array_equal(labels, [0] * 5)
    np.testing.assert_array_equal(probs, np.ones((5, 1)))


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(12)
    m = _model(rng, 3)
    _, probs = predict(m, rng.standard_normal((50, 5)) * 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_inheritance_preserves_old_restricted_predictions():
    rng = np.random.default_rng(13)
    m = _model(rng, 2)
    finish_extractor(m)
    x = rng.standard_normal((40, 5))
    before = predict(m, x)[1][:, :4]
    old_dim = m.feature_dim
    expand(m, SPECS8, [4, 5], rng)
    u = super_forward(m, x).data.copy()
    u[:, old_dim:] = 0.0
    with dc.no_grad():
        z = logits(m, dc.Tensor(u)).data[:, :4]
    np.testing.assert_array_equal(np.argmax(z, axis=1), np.argmax(before, axis=1))
    np.testing.assert_allclose(dc.softmax(z), before, rtol=1e-12)


def test_aux_loss_gradient_reaches_only_current_extractor_and_aux():
    rng = np.random.default_rng(14)
    m = _model(rng, 2)
    x = rng.standard_normal((6, 5))
    y = np.array([0, 1, 2, 3, 2, 3])
    cfg = TrainConfig(lambda_a=1.0, lambda_s=0.0)
    _, (loss_h, loss_a, _) = der_loss(m, x, y, 400.0, cfg)
    dc.backward(loss_a)
    for f in m.frozen:
        assert all(t.grad is None for t in f.store.params.values())
    assert all(t.grad is None for t in m.classifier.params.values())
    assert m.aux["weight"].grad is not None
    assert m.current.store["b0.fc.weight"].grad is not None


def test_frozen_segments_stable_under_training_of_current():
    from derlab.trainer import train_representation
    rng = np.random.default_rng(15)
    m = _model(rng, 2)
    x = rng.standard_normal((64, 5))
    y = rng.integers(0, 4, 64)
    before = m.frozen[0].forward(dc.Tensor(x)).data.copy()
    params = {n: t.data.copy() for n, t in m.frozen[0].store.params.items()}
    train_representation(m, x, y, TrainConfig(stage1_epochs=5), rng)
    assert m.frozen[0].forward(dc.Tensor(x)).data.tobytes() == before.tobytes()
    for n, t in m.frozen[0].store.params.items():
        assert t.data.tobytes() == params[n].tobytes()


def test_finish_extractor_drops_classifier_rows():
    rng = np.random.default_rng(16)
    m = _model(rng, 1)
    _set_mask(m.current, 0, [1, -1, 1, -1, -1, 1, 1, -1])
    w = m.classifier["weight"].data.copy()
    finish_extractor(m)
    np.testing.assert_array_equal(m.classifier["weight"].data, w[[0, 2, 5, 6]])
    assert m.current is None and m.segment_dims == [4]


def test_finetune_model_keeps_one_extractor():
    rng = np.random.default_rng(17)
    m = DERModel((5,), expandable=False)
    expand(m, SPECS8, [0, 1], rng)
    first = m.current
    expand(m, SPECS8, [2, 3], rng)
    assert m.current is first and m.frozen == [] and m.aux is None
    assert m.classifier["weight"].data.shape == (8, 4)


def test_extract_features_batched_equals_single_pass():
    rng = np.random.default_rng(18)
    m = _model(rng, 2)
    x = rng.standard_normal((23, 5))
    np.testing.assert_array_equal(extract_features(m, x, batch=5), super_forward(m, x).data)
