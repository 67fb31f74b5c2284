from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from split_ensemble.inference import ID, OOD, msp_score, ood_decision, predict
from split_ensemble.task_split import SubtaskSpec

# mpmath: sigmoid(2)**2
TWO_BY_ONE = 0.775803492574375926711104956542


def test_worked_example():
    spec = SubtaskSpec(2, ((0,), (1,)))
    out = predict([np.array([2.0, 0.0]), np.array([0.0, 2.0])], spec)
    assert out.uncertainty_score == pytest.approx(TWO_BY_ONE, rel=1e-12)
    assert out.predicted_class == 0
    np.testing.assert_allclose(out.per_submodel_ood_prob, [0.11920292202211755, 0.8807970779778823])
    np.testing.assert_array_equal(out.concatenated_id_logits, [2.0, 0.0])


@pytest.mark.parametrize("groups,expected", [
    (((0,), (1,)), 0.25),
    (((0, 1), (2, 3)), 2 / 9),
    (((0, 1, 2), (3,)), 0.25),  # best submodel is the one with K=1
])
def test_uniform_logits_closed_form(groups, expected):
    spec = SubtaskSpec(sum(len(g) for g in groups), groups)
    out = predict([np.zeros(w) for w in spec.head_widths], spec)
    assert out.uncertainty_score == pytest.approx(expected, rel=1e-12)


def test_single_submodel_reduces_to_msp():
    spec = SubtaskSpec(4, ((0, 1, 2, 3),))
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 4))
    logits = np.concatenate([z, np.full((50, 1), -np.inf)], axis=1)
    out = predict([logits], spec)
    np.testing.assert_allclose(out.uncertainty_score, msp_score(z), rtol=1e-14)
    np.testing.assert_array_equal(out.predicted_class, z.argmax(1))


def test_class_order_maps_back_to_labels():
    spec = SubtaskSpec(4, ((2, 0), (3, 1)))
    logits = [np.array([0.0, 0.0, 0.0]), np.array([0.0, 5.0, 0.0])]
    assert predict(logits, spec).predicted_class == 1


def test_batched_matches_single(rng):
    spec = SubtaskSpec(5, ((0, 1), (2,), (3, 4)))
    batch = [rng.normal(size=(20, w)) for w in spec.head_widths]
    full = predict([torch.as_tensor(b) for b in batch], spec)
    for i in range(20):
        one = predict([b[i] for b in batch], spec)
        assert one.uncertainty_score == pytest.approx(full.uncertainty_score[i], rel=1e-14)
        assert one.predicted_class == full.predicted_class[i]


def test_width_mismatch():
    spec = SubtaskSpec(2, ((0,), (1,)))
    with pytest.raises(ValueError, match="width"):
        predict([np.zeros(2), np.zeros(3)], spec)
    with pytest.raises(ValueError, match="expected 2"):
        predict([np.zeros(2)], spec)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, (3, 6), elements=st.integers(-80, 80)), st.integers(-200, 200))
def test_score_range_and_shift_invariance(z, c):
    # quarter-integer grid keeps the shifted logits exact
    z, c = z / 4.0, c / 4.0
    spec = SubtaskSpec(4, ((0, 1), (2, 3)))
    logits = [z[:, :3], z[:, 3:]]
    out = predict(logits, spec)
    assert np.all((out.uncertainty_score >= 0) & (out.uncertainty_score <= 1))
    shifted = predict([logits[0] + c, logits[1]], spec)
    np.testing.assert_allclose(shifted.uncertainty_score, out.uncertainty_score, rtol=1e-9,
                               atol=1e-15)
    both = predict([logits[0] + c, logits[1] + c], spec)
    np.testing.assert_array_equal(both.predicted_class, out.predicted_class)


def test_msp_of_ensemble_uses_mean_logits():
    a, b = np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]])
    np.testing.assert_allclose(msp_score([a, b]), msp_score(np.array([[1.0, 0.0]])))


def test_decision_boundary():
    assert ood_decision(0.9, 0.5) == ID
    assert ood_decision(0.5, 0.5) == ID
    assert ood_decision(0.4999, 0.5) == OOD
    np.testing.assert_array_equal(ood_decision(np.array([0.1, 0.7]), 0.5), [OOD, ID])
