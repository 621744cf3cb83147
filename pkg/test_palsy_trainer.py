#!/usr/bin/env python3
"""
🧪 PALSY TRAINER TEST SUITE
SGD updates, training steps, full training runs and checkpoints on tiny clips.
"""

from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from palsy_trainer import (
    CHECKPOINT_FILE, HISTORY_FILE, OptimizerConfig, TrainState, load_checkpoint, named_gradients, predict,
    save_checkpoint, sgd_step, train, train_step,
)
from palsy_losses import DivergenceError, softmax_cross_entropy
from resnet3d_model import ModelParams, NetworkSpec, forward, freeze_layers, init_params
from synthetic_dataset import EmptyClassError, SyntheticConfig, generate_dataset
from tensor_core import Mode, ShapeError, Tensor, backward
from videopipe import AugmentationConfig, Task, preprocess_sequence, to_network_input

SPEC = NetworkSpec(num_classes=4, frames=2, spatial=16)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    cfg = SyntheticConfig(subjects=2, palsy_subjects=1, frames=3, size=16, repetitions=1)
    return generate_dataset(cfg, tmp_path_factory.mktemp("data"))


def quick_config(**overrides) -> OptimizerConfig:
    values = dict(epochs=1, batch_size=4, frame_duration=2, seed=5)
    values.update(overrides)
    return OptimizerConfig(**values)


def single_param(value: float, trainable: bool = True) -> ModelParams:
    tensors = OrderedDict([("fc.weight", Tensor(np.array([value])))])
    return ModelParams(tensors, {"fc.weight": trainable})


def test_sgd_step_hand_value():
    params = single_param(1.0)
    cfg = OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
    sgd_step(params, {"fc.weight": np.array([0.1])}, {}, cfg)
    assert params["fc.weight"].data[0] == pytest.approx(0.99)


def test_sgd_step_fixed_point_and_frozen():
    params = single_param(1.0)
    cfg = OptimizerConfig(weight_decay=0.0)
    sgd_step(params, {"fc.weight": np.array([0.0])}, {"fc.weight": np.array([0.0])}, cfg)
    assert params["fc.weight"].data[0] == 1.0

    frozen = single_param(1.0, trainable=False)
    sgd_step(frozen, {"fc.weight": np.array([5.0])}, {}, OptimizerConfig())
    assert frozen["fc.weight"].data[0] == 1.0

    with pytest.raises(ShapeError):
        sgd_step(single_param(1.0), {"fc.weight": np.zeros(2)}, {}, cfg)


def test_sgd_momentum_and_weight_decay():
    params = single_param(2.0)
    buffers = {"fc.weight": np.array([1.0])}
    cfg = OptimizerConfig(lr=0.1, momentum=0.9, weight_decay=0.5)
    sgd_step(params, {"fc.weight": np.array([1.0])}, buffers, cfg)
    # v = 0.9 + 1 + 1 = 2.9, p = 2 − 0.29
    assert buffers["fc.weight"][0] == pytest.approx(2.9)
    assert params["fc.weight"].data[0] == pytest.approx(1.71)


def _batch(manifest, count: int = 4):
    return [preprocess_sequence(manifest.load(r), SPEC.frames, SPEC.spatial) for r in manifest.records[:count]]


def test_zero_lambda_step_equals_pure_softmax_step(manifest):
    cfg = quick_config(lam=0.0)
    batch = _batch(manifest)

    state = TrainState.fresh(freeze_layers(init_params(SPEC, seed=2)), SPEC, cfg)
    state.params.sync_requires_grad()
    _, breakdown = train_step(state, batch, cfg, Task.MOTION, SPEC)
    assert breakdown.total == breakdown.softmax_loss
    assert np.all(state.centers.centers == 0.0)

    reference = freeze_layers(init_params(SPEC, seed=2))
    reference.sync_requires_grad()
    labels = np.array([Task.MOTION.label_index(s.motion_label, s.palsy_grade) for s in batch])
    _, logits = forward(Tensor(to_network_input(batch)), SPEC, reference, Mode.TRAIN)
    grads = named_gradients(reference, backward(softmax_cross_entropy(logits, labels)))
    sgd_step(reference, grads, {}, cfg)
    for name, t in reference.items():
        np.testing.assert_array_equal(state.params[name].data, t.data)


def test_center_loss_step_moves_centers(manifest):
    cfg = quick_config(lam=0.001)
    state = TrainState.fresh(freeze_layers(init_params(SPEC)), SPEC, cfg)
    state.params.sync_requires_grad()
    _, breakdown = train_step(state, _batch(manifest), cfg, Task.MOTION, SPEC)
    assert breakdown.total == pytest.approx(breakdown.softmax_loss + 0.001 * breakdown.center_loss)
    assert state.step == 1 and len(state.history) == 1


def test_frozen_parameters_stay_bitwise_fixed_over_many_steps(manifest):
    cfg = quick_config(lr=0.01)
    state = TrainState.fresh(freeze_layers(init_params(SPEC, seed=3)), SPEC, cfg)
    state.params.sync_requires_grad()
    before = {name: t.data.copy() for name, t in state.params.learnable_items()}
    frozen = [name for name in before if not state.params.is_trainable(name)]
    trainable = [name for name in before if state.params.is_trainable(name)]
    assert frozen and trainable

    batch = _batch(manifest)
    for _ in range(100):
        train_step(state, batch, cfg, Task.MOTION, SPEC)

    for name in frozen:
        np.testing.assert_array_equal(state.params[name].data, before[name], err_msg=name)
    moved = [name for name in trainable if not np.array_equal(state.params[name].data, before[name])]
    assert moved == trainable


def test_non_finite_loss_raises_before_any_update(manifest):
    cfg = quick_config()
    state = TrainState.fresh(freeze_layers(init_params(SPEC)), SPEC, cfg)
    state.params.sync_requires_grad()
    state.params["fc.bias"].data = np.full(4, np.nan, dtype=np.float32)
    head = state.params["fc.weight"].data.copy()
    with pytest.raises(DivergenceError, match="step 0"):
        train_step(state, _batch(manifest), cfg, Task.MOTION, SPEC)
    np.testing.assert_array_equal(state.params["fc.weight"].data, head)
    assert state.step == 0 and state.history == []


def test_repeated_sample_overfits(manifest):
    cfg = quick_config(lr=0.05, momentum=0.0, weight_decay=0.0, freeze_policy=("fc",))
    state = TrainState.fresh(freeze_layers(init_params(SPEC), cfg.freeze_policy), SPEC, cfg)
    state.params.sync_requires_grad()
    sample = _batch(manifest, 1)[0]
    losses = [train_step(state, [sample, sample], cfg, Task.MOTION, SPEC)[1].softmax_loss for _ in range(50)]
    assert all(later < earlier for earlier, later in zip(losses[5:], losses[6:]))


def test_train_history_length_and_determinism(manifest):
    cfg = quick_config(epochs=2)
    first = train(manifest, cfg, Task.MOTION, SPEC)
    second = train(manifest, cfg, Task.MOTION, SPEC)
    assert len(first.history) == 2 * 2
    assert first.history == second.history
    assert first.epoch == 2
    for name, t in first.params.items():
        np.testing.assert_array_equal(t.data, second.params[name].data)


def test_zero_epochs_returns_initialisation(manifest):
    state = train(manifest, quick_config(epochs=0), Task.MOTION, SPEC)
    initial = init_params(SPEC, seed=5)
    for name, t in initial.items():
        np.testing.assert_array_equal(state.params[name].data, t.data)
    assert state.history == []


def test_train_checks_classes_and_shapes(manifest):
    two_motion = manifest.subset(["S01"])
    with pytest.raises(ValueError, match="frames"):
        train(manifest, quick_config(frame_duration=4), Task.MOTION, SPEC)
    with pytest.raises(ValueError, match="classes"):
        train(manifest, quick_config(), Task.GRADE, SPEC)
    grade_spec = replace(SPEC, num_classes=6)
    with pytest.raises(EmptyClassError):
        train(two_motion, quick_config(), Task.GRADE, grade_spec)
    state = train(two_motion, quick_config(), Task.GRADE, grade_spec, require_all_classes=False,
                  augmentation=AugmentationConfig.disabled())
    assert len(state.history) == 1


def test_predict_preprocesses_and_batches(manifest):
    params = init_params(SPEC)
    raw = [manifest.load(r) for r in manifest.records]
    labels, embeddings = predict(params, SPEC, raw, batch_size=3)
    assert labels.shape == (len(raw),)
    assert embeddings.shape == (len(raw), SPEC.embedding_dim)
    assert np.all((labels >= 0) & (labels < 4))
    empty_labels, _ = predict(params, SPEC, [])
    assert empty_labels.shape == (0,)


def test_checkpoint_round_trip(manifest, tmp_path):
    cfg = quick_config()
    state = train(manifest, cfg, Task.MOTION, SPEC)
    save_checkpoint(state, cfg, tmp_path, Task.MOTION)
    params, centers, meta = load_checkpoint(tmp_path, SPEC, cfg.center_alpha)
    for name, t in state.params.items():
        np.testing.assert_array_equal(params[name].data, t.data)
    np.testing.assert_array_equal(centers.centers, state.centers.centers)
    assert meta == {"epoch": 1, "step": 2, "seed": 5, "config_hash": cfg.config_hash(), "task": "motion"}
    assert (tmp_path / CHECKPOINT_FILE).exists()
    assert (tmp_path / HISTORY_FILE).read_text().splitlines()[0] == "step,softmax,center,total"


def test_config_hash_tracks_settings():
    assert quick_config().config_hash() == quick_config().config_hash()
    assert quick_config().config_hash() != quick_config(lam=0.0).config_hash()
    assert len(quick_config().config_hash()) == 16
