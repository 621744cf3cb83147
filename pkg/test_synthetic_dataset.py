#!/usr/bin/env python3
"""
🧪 SYNTHETIC DATASET TEST SUITE
Mouth trajectories, rendering, manifests and class-balanced sampling.
"""

import json

import numpy as np
import pytest

from synthetic_dataset import (
    EmptyClassError, MANIFEST_NAME, Manifest, ManifestError, SampleRecord, SyntheticConfig, amplitude_factor,
    generate_dataset, generate_sequence, load_manifest, mouth_trajectory, sample_weights, save_manifest,
    weighted_sampler,
)
from videopipe import MotionLabel, Task


def tiny_config(**overrides) -> SyntheticConfig:
    values = dict(subjects=2, palsy_subjects=1, frames=3, size=16, repetitions=1, motions=("no_motion", "smile"))
    values.update(overrides)
    return SyntheticConfig(**values)


def test_amplitude_factor_endpoints():
    assert amplitude_factor(1) == 1.0
    assert amplitude_factor(6) == 0.0
    assert amplitude_factor(3) == pytest.approx(0.6)


def test_grade_one_is_symmetric_and_grade_six_frozen():
    cfg = SyntheticConfig()
    for motion in MotionLabel:
        healthy = mouth_trajectory(cfg, motion, 1, 12, np.random.default_rng(4))
        np.testing.assert_allclose(healthy.side_displacement("left"), healthy.side_displacement("right"), atol=1e-6)
        paralysed = mouth_trajectory(cfg, motion, 6, 12, np.random.default_rng(4))
        assert np.all(paralysed.side_displacement("left") == 0.0)


def test_affected_side_displacement_nonincreasing_in_grade():
    cfg = SyntheticConfig()
    peaks = [mouth_trajectory(cfg, MotionLabel.SMILE, g, 12, np.random.default_rng(9)).side_displacement("left").max()
             for g in range(1, 7)]
    assert all(a >= b for a, b in zip(peaks, peaks[1:]))


def test_generate_sequence_is_deterministic_and_valid():
    cfg = tiny_config(size=24, frames=4)
    first = generate_sequence(cfg, "S01", "smile", 3, seed=11)
    second = generate_sequence(cfg, "S01", "smile", 3, seed=11)
    np.testing.assert_array_equal(first.frames, second.frames)
    assert first.frames.shape == (4, 24, 24, 3)
    assert first.frames.dtype == np.float32
    assert 0.0 <= first.frames.min() and first.frames.max() <= 1.0
    with pytest.raises(ValueError):
        generate_sequence(cfg, "S01", "smile", 7, seed=11)


def test_default_grade_layout():
    cfg = SyntheticConfig()
    grades = sorted(cfg.grade_for(k, 0) for k in range(1, 11))
    assert grades == [1, 1, 1, 1, 1, 2, 3, 4, 5, 6]
    assert len(set(cfg.subject_ids())) == 10
    cycled = SyntheticConfig(grade_layout="cycled")
    assert {cycled.grade_for(1, r) for r in range(5)} == {2, 3, 4, 5, 6}


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(size=8)
    with pytest.raises(ValueError):
        SyntheticConfig(motions=("smile", "smile"))
    with pytest.raises(ValueError):
        SyntheticConfig(grade_layout="random")


def test_generate_dataset_writes_reproducible_manifest(tmp_path):
    cfg = tiny_config()
    manifest = generate_dataset(cfg, tmp_path / "a")
    again = generate_dataset(cfg, tmp_path / "b")
    assert len(manifest) == 4
    assert manifest.subjects == ["S01", "S02"]
    assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()
    for record in manifest.records:
        assert (tmp_path / "a" / record.path).read_bytes() == (tmp_path / "b" / record.path).read_bytes()
    assert {r.palsy_grade for r in manifest.records if r.subject_id == "S01"} == {2}
    assert {r.palsy_grade for r in manifest.records if r.subject_id == "S02"} == {1}

    single = generate_dataset(tiny_config(subjects=1, motions=("smile",)), tmp_path / "c")
    assert len(single) == 1


def test_manifest_round_trip_and_loading(tmp_path):
    manifest = generate_dataset(tiny_config(), tmp_path)
    loaded = load_manifest(tmp_path / MANIFEST_NAME)
    assert loaded == manifest
    sequence = loaded.load(loaded.records[1])
    assert sequence.motion_label is MotionLabel.SMILE
    assert loaded.labels(Task.MOTION).tolist() == [0, 1, 0, 1]
    assert loaded.labels(Task.GRADE).tolist() == [1, 1, 0, 0]
    assert loaded.indices_for(["S02"]) == [2, 3]
    assert len(loaded.subset(["S01"])) == 2


def _write_document(path, records):
    path.write_text(json.dumps({"version": 1, "records": records}))


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "missing.json")

    bad_grade = tmp_path / "grade.json"
    _write_document(bad_grade, [{"subject_id": "S01", "motion_label": "smile", "palsy_grade": 7, "path": "x.psq"}])
    with pytest.raises(ManifestError, match="record 0: palsy grade 7 outside the House-Brackmann range 1..6"):
        load_manifest(bad_grade, check_paths=False)

    extra = tmp_path / "extra.json"
    _write_document(extra, [{"subject_id": "S01", "motion_label": "smile", "palsy_grade": 1, "path": "x.psq",
                             "age": 40}])
    with pytest.raises(ManifestError, match="'age'"):
        load_manifest(extra, check_paths=False)

    missing = tmp_path / "nofile.json"
    _write_document(missing, [{"subject_id": "S01", "motion_label": "smile", "palsy_grade": 1, "path": "x.psq"}])
    with pytest.raises(ManifestError, match=r"record 0 \(S01 smile\)"):
        load_manifest(missing)

    broken = tmp_path / "broken.json"
    broken.write_text("{\n  \"version\": 1,\n  \"records\": [\n")
    with pytest.raises(ManifestError, match="line"):
        load_manifest(broken)


def imbalanced_manifest(tmp_path) -> Manifest:
    records = [SampleRecord("S01", "no_motion", 1, "a.psq")] * 90 + [SampleRecord("S02", "smile", 1, "b.psq")] * 10
    manifest = Manifest(tuple(records))
    save_manifest(manifest, tmp_path / MANIFEST_NAME)
    return manifest


def test_weighted_sampler_balances_ninety_ten(tmp_path):
    manifest = imbalanced_manifest(tmp_path)
    labels = manifest.labels(Task.MOTION)
    draws = np.concatenate(list(weighted_sampler(manifest, Task.MOTION, 100, seed=0, num_batches=100)))
    assert draws.shape == (10000,)
    assert np.mean(labels[draws] == 1) == pytest.approx(0.5, abs=0.02)


def test_weighted_sampler_uniform_over_four_classes(tmp_path):
    generate_dataset(tiny_config(motions=tuple(m.value for m in MotionLabel), repetitions=2, subjects=1), tmp_path)
    manifest = load_manifest(tmp_path / MANIFEST_NAME, check_paths=False)
    records = manifest.records + tuple(r for r in manifest.records if r.motion_label is MotionLabel.SMILE) * 5
    manifest = Manifest(records)
    labels = manifest.labels(Task.MOTION)
    draws = np.concatenate(list(weighted_sampler(manifest, "motion", 1000, seed=3, num_batches=100)))
    frequencies = np.bincount(labels[draws], minlength=4) / draws.size
    np.testing.assert_allclose(frequencies, 0.25, atol=0.01)


def test_sampler_edge_cases(tmp_path):
    manifest = imbalanced_manifest(tmp_path)
    only_a = list(weighted_sampler(manifest, "motion", 8, seed=1, num_batches=3, indices=range(90)))
    assert all(np.all(batch < 90) for batch in only_a)
    np.testing.assert_allclose(sample_weights([2, 2, 5, 5]), 0.25)
    with pytest.raises(EmptyClassError):
        sample_weights([0, 0, 1], classes=[0, 1, 2])
    with pytest.raises(EmptyClassError):
        next(weighted_sampler(manifest, "motion", 4, seed=0, classes=[0, 1, 2, 3]))
