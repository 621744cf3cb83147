#!/usr/bin/env python3
"""
🧪 PALSY LOSSES TEST SUITE
Softmax, center loss, center updates and the λ-balanced total.
"""

import math

import numpy as np
import pytest

from palsy_losses import (
    ClassCenters, DivergenceError, LossBreakdown, center_loss, joint_loss, load_centers, softmax_cross_entropy,
    total_loss, update_centers,
)
from resnet3d_model import write_param_file
from tensor_core import ShapeError, Tensor, backward, precision


def test_softmax_two_equal_logits_is_ln2():
    loss = softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0])
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_softmax_is_stable_for_large_logits():
    loss = softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]])), [0, 1])
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_softmax_gradient_is_probabilities_minus_onehot():
    with precision("f64"):
        logits = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]), requires_grad=True)
        record = backward(softmax_cross_entropy(logits, [0, 1]))
    p = 1.0 / (1.0 + math.exp(-1.0))
    expected = np.array([[-0.5, 0.5], [p, -p]]) / 2.0
    np.testing.assert_allclose(record[logits], expected, atol=1e-12)


def test_softmax_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_center_loss_hand_sum():
    centers = ClassCenters.zeros(2, 2)
    x = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert center_loss(x, [0, 1], centers).item() == pytest.approx(2.5)


def test_center_loss_zero_at_centers_and_gradient_is_difference():
    centers = ClassCenters(np.array([[1.0, 2.0], [3.0, 4.0]]))
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert center_loss(x, [0, 1], centers).item() == 0.0

    moved = Tensor(np.array([[2.0, 2.0], [3.0, 5.0]]), requires_grad=True)
    record = backward(center_loss(moved, [0, 1], centers))
    np.testing.assert_allclose(record[moved], [[1.0, 0.0], [0.0, 1.0]])


def test_update_centers_delta_rule():
    centers = ClassCenters(np.zeros((3, 2)), alpha=0.5)
    x = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, 3.0]])
    moved = update_centers(centers, x, [0, 0, 1])
    # class 0: Δ = ((0-2) + (0-4)) / 3 = -2, c ← 0 + 0.5·2
    np.testing.assert_allclose(moved.centers[0], [1.0, 0.0])
    np.testing.assert_allclose(moved.centers[1], [0.0, 0.75])
    np.testing.assert_array_equal(moved.centers[2], [0.0, 0.0])
    np.testing.assert_array_equal(centers.centers, 0.0)


def test_center_loss_is_translation_invariant():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 4))
    labels = [0, 1, 2, 0, 1, 2]
    centers = ClassCenters(rng.standard_normal((3, 4)))
    shift = rng.standard_normal(4) * 10.0
    base = center_loss(Tensor(x), labels, centers).item()
    moved = center_loss(Tensor(x + shift), labels, ClassCenters(centers.centers + shift)).item()
    assert moved == pytest.approx(base, rel=1e-10)


def test_full_rate_updates_converge_monotonically_to_class_mean():
    x = np.array([[1.0, 2.0], [3.0, 0.0], [2.0, 7.0]])
    labels = [0, 0, 0]
    mean = x.mean(axis=0)
    centers = ClassCenters(np.array([[10.0, -10.0], [0.5, 0.5]]), alpha=1.0)
    distances = [np.linalg.norm(centers.centers[0] - mean)]
    for _ in range(20):
        centers = update_centers(centers, x, labels)
        distances.append(np.linalg.norm(centers.centers[0] - mean))
    assert all(later < earlier for earlier, later in zip(distances, distances[1:]))
    np.testing.assert_allclose(centers.centers[0], mean, atol=1e-8)
    np.testing.assert_array_equal(centers.centers[1], [0.5, 0.5])


def test_non_finite_embeddings_stop_center_updates():
    centers = ClassCenters.zeros(2, 2)
    with pytest.raises(DivergenceError):
        update_centers(centers, np.array([[np.inf, 0.0]]), [0])


def test_centers_validate_alpha_and_finiteness():
    with pytest.raises(ValueError):
        ClassCenters(np.zeros((2, 2)), alpha=0.0)
    with pytest.raises(DivergenceError, match="diverged"):
        ClassCenters(np.array([[np.nan, 0.0]]))


def test_total_loss_arithmetic():
    breakdown = total_loss(1.0, 100.0, 0.001)
    assert breakdown.total == pytest.approx(1.1)
    assert total_loss(0.7, 50.0, 0.0).total == pytest.approx(0.7)
    with pytest.raises(ValueError):
        LossBreakdown(1.0, 1.0, -0.1)


def test_joint_loss_matches_breakdown_and_zero_lambda_is_softmax():
    centers = ClassCenters.zeros(2, 2)
    x = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    softmax = softmax_cross_entropy(Tensor(np.zeros((2, 2))), [0, 1])
    center = center_loss(x, [0, 1], centers)
    joint = joint_loss(softmax, center, 0.001)
    assert joint.item() == pytest.approx(total_loss(softmax.item(), center.item(), 0.001).total)
    assert joint_loss(softmax, center, 0.0) is softmax
    with pytest.raises(ValueError):
        joint_loss(softmax, center, -1.0)


def test_centers_round_trip_through_param_file(tmp_path):
    centers = ClassCenters(np.arange(6, dtype=np.float32).reshape(3, 2))
    path = tmp_path / "centers.ppar"
    write_param_file(path, centers.to_entries().items())
    loaded = load_centers(path)
    np.testing.assert_array_equal(loaded.centers, centers.centers)
