#!/usr/bin/env python3
"""
🧪 LOSO EVALUATION TEST SUITE
Fold plans, metrics, the async fold scheduler, ablations and report files.
"""

import json
import threading

import numpy as np
import pytest

from loso_evaluation import (
    ConfusionMatrix, LosoFold, LosoLeakError, check_fold, clear_report, confusion_matrix, f1_report, load_report,
    loso_split, mean_intra_class_variance, run_ablation_frame_duration, run_ablation_loss, run_loso,
    run_loso_async, within_one_grade, write_ablation_table, write_report,
)
from palsy_trainer import OptimizerConfig
from resnet3d_model import NetworkSpec
from synthetic_dataset import Manifest, SampleRecord, SyntheticConfig, generate_dataset
from videopipe import MotionLabel, Task

SPEC = NetworkSpec(num_classes=4, frames=2, spatial=16)
CFG = OptimizerConfig(epochs=1, batch_size=4, frame_duration=2, seed=1)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory) -> Manifest:
    cfg = SyntheticConfig(subjects=3, palsy_subjects=2, frames=3, size=16, repetitions=1)
    return generate_dataset(cfg, tmp_path_factory.mktemp("loso"))


def constant_runner(label: int = 0):
    def run(index, train_indices, test_indices, seed):
        return np.full(len(test_indices), label), None
    return run


def oracle_runner(manifest: Manifest, task: Task):
    labels = manifest.labels(task)

    def run(index, train_indices, test_indices, seed):
        embeddings = np.eye(task.num_classes)[labels[test_indices]] * 2.0
        return labels[test_indices], embeddings
    return run


def test_loso_split_disjoint_folds(manifest):
    plan = loso_split(manifest)
    assert plan.subjects == ["S01", "S02", "S03"]
    for fold in plan.folds:
        assert fold.test_subject not in fold.train_subjects
        assert len(fold.train_subjects) == 2
    with pytest.raises(ValueError):
        loso_split(manifest.subset(["S01"]))


def test_loso_split_randomized_manifests_keep_subjects_apart():
    rng = np.random.default_rng(2024)
    for trial in range(120):
        count = int(rng.integers(2, 9))
        subjects = [f"P{trial:03d}_{k}" for k in range(count)]
        records = [
            SampleRecord(subjects[int(rng.integers(0, count))], MotionLabel.from_index(int(rng.integers(0, 4))),
                         int(rng.integers(1, 7)), f"seq_{trial}_{i}.psq")
            for i in range(int(rng.integers(count, 4 * count + 1)))
        ]
        # every subject appears at least once
        records += [SampleRecord(s, MotionLabel.SMILE, 1, f"seq_{trial}_{s}.psq") for s in subjects]
        manifest = Manifest(tuple(records[i] for i in rng.permutation(len(records))))

        plan = loso_split(manifest)
        assert sorted(plan.subjects) == sorted(subjects)
        assert len(set(plan.subjects)) == count
        for fold in plan.folds:
            assert fold.test_subject not in fold.train_subjects
            assert set(fold.train_subjects) | {fold.test_subject} == set(subjects)
            train_idx = manifest.indices_for(fold.train_subjects)
            test_idx = manifest.indices_for([fold.test_subject])
            assert not set(train_idx) & set(test_idx)
            assert len(train_idx) + len(test_idx) == len(manifest)
            check_fold(manifest, fold, train_idx, test_idx)


def test_check_fold_detects_leaks(manifest):
    fold = LosoFold("S01", ("S02", "S03"))
    test_idx = manifest.indices_for(["S01"])
    with pytest.raises(LosoLeakError):
        check_fold(manifest, fold, manifest.indices_for(["S01", "S02"]), test_idx)
    with pytest.raises(LosoLeakError):
        check_fold(manifest, fold, manifest.indices_for(["S02"]), manifest.indices_for(["S01", "S03"]))
    with pytest.raises(LosoLeakError):
        check_fold(manifest, LosoFold("S01", ("S01",)), [], test_idx)


def test_confusion_matrix_counts():
    np.testing.assert_array_equal(confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2).counts, [[1, 1], [1, 2]])
    np.testing.assert_array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3))
    assert confusion_matrix([], [], 4).total == 0
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)


def test_f1_report_hand_values():
    report = f1_report(ConfusionMatrix(np.array([[3, 2], [1, 4]])))
    assert report.f1[0] == pytest.approx(0.6667, abs=1e-4)
    assert report.f1[1] == pytest.approx(0.7273, abs=1e-4)
    assert report.macro_f1 == pytest.approx(0.6970, abs=1e-4)
    assert report.micro_f1 == pytest.approx(0.7)

    perfect = f1_report(ConfusionMatrix(np.array([[5, 0], [0, 5]])))
    assert perfect.f1 == (1.0, 1.0) and perfect.macro_f1 == 1.0


def test_degenerate_class_excluded_from_macro():
    report = f1_report(ConfusionMatrix(np.array([[2, 0, 0], [0, 3, 0], [0, 0, 0]])))
    assert report.f1[2] == 0.0
    assert report.included == (True, True, False)
    assert report.macro_f1 == 1.0


def test_f1_report_agrees_with_sklearn_on_label_vectors():
    from sklearn.metrics import f1_score, precision_recall_fscore_support

    rng = np.random.default_rng(11)
    for _ in range(20):
        truth = rng.integers(0, 4, size=30)
        predicted = rng.integers(0, 4, size=30)
        report = f1_report(confusion_matrix(truth, predicted, 4))
        p, r, f, s = precision_recall_fscore_support(truth, predicted, labels=[0, 1, 2, 3], zero_division=0)
        np.testing.assert_allclose(report.precision, p)
        np.testing.assert_allclose(report.recall, r)
        np.testing.assert_allclose(report.f1, f)
        assert report.support == tuple(int(v) for v in s)
        present = sorted(set(truth.tolist()) | set(predicted.tolist()))
        assert report.macro_f1 == pytest.approx(f1_score(truth, predicted, labels=present, average="macro", zero_division=0))
        assert report.micro_f1 == pytest.approx(np.mean(truth == predicted))


def test_f1_report_on_empty_matrix():
    report = f1_report(ConfusionMatrix.zeros(3))
    assert report.f1 == (0.0, 0.0, 0.0)
    assert report.included == (False, False, False)
    assert report.macro_f1 == 0.0 and report.micro_f1 == 0.0


def test_within_one_grade_and_variance():
    cm = ConfusionMatrix(np.array([[2, 1, 1], [0, 2, 0], [0, 0, 2]]))
    assert within_one_grade(cm) == pytest.approx(7 / 8)
    embeddings = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    assert mean_intra_class_variance(embeddings, [0, 0, 1]) == pytest.approx(0.5)


def test_constant_predictor_matches_analytic_macro_f1(manifest):
    report = run_loso(manifest, CFG, Task.MOTION, SPEC, fold_runner=constant_runner(0))
    # class 0: precision 1/4, recall 1 → F1 0.4; three supported classes score 0
    assert report.macro_f1 == pytest.approx(0.1)
    assert report.evaluated == len(manifest)


def test_pooled_matrix_is_sum_of_folds(manifest):
    report = run_loso(manifest, CFG, Task.MOTION, SPEC, fold_runner=oracle_runner(manifest, Task.MOTION))
    total = sum((f.confusion.counts for f in report.folds), np.zeros((4, 4), dtype=np.int64))
    np.testing.assert_array_equal(report.pooled.counts, total)
    assert report.macro_f1 == 1.0
    assert set(report.subject_f1()) == {"S01", "S02", "S03"}
    assert report.intra_class_variance == 0.0
    assert report.within_one_grade is None


@pytest.mark.asyncio
async def test_async_folds_run_concurrently_and_stay_ordered(manifest):
    seen, lock = [], threading.Lock()

    def runner(index, train_indices, test_indices, seed):
        subjects = {manifest.records[i].subject_id for i in train_indices}
        tested = {manifest.records[i].subject_id for i in test_indices}
        assert not subjects & tested
        with lock:
            seen.append((index, seed))
        return np.zeros(len(test_indices), dtype=np.int64), None

    report = await run_loso_async(manifest, CFG, "motion", SPEC, workers=3, fold_runner=runner)
    assert [f.index for f in report.folds] == [0, 1, 2]
    assert [f.test_subject for f in report.folds] == ["S01", "S02", "S03"]
    assert len({seed for _, seed in seen}) == 3


def test_default_runner_trains_every_fold(manifest):
    report = run_loso(manifest, CFG, Task.MOTION, SPEC, workers=2)
    assert report.evaluated == len(manifest)
    assert 0.0 <= report.macro_f1 <= 1.0
    assert report.metadata["config_hash"] == CFG.config_hash()
    assert report.intra_class_variance is not None


def test_frame_duration_ablation(manifest, tmp_path):
    runner = constant_runner(1)
    rows = run_ablation_frame_duration(manifest, CFG, Task.MOTION, SPEC, durations=(2, 3), fold_runner=runner,
                                       record_wall_time=False)
    assert [r.duration for r in rows] == [2, 3]
    assert all(r.wall_time_s == 0.0 for r in rows)
    single = run_ablation_frame_duration(manifest, CFG, Task.MOTION, SPEC, durations=[2], fold_runner=runner)
    assert single[0].macro_f1 == run_loso(manifest, CFG, Task.MOTION, SPEC, fold_runner=runner).macro_f1
    with pytest.raises(ValueError):
        run_ablation_frame_duration(manifest, CFG, Task.MOTION, SPEC, durations=())

    path = write_ablation_table(rows, tmp_path, "frame-duration", Task.MOTION)
    assert load_report(path)["rows"][0]["duration"] == 2
    assert (tmp_path / "ablation_frame_duration.csv").read_text().startswith("duration,macro_f1,wall_time_s")


def test_loss_ablation_arms(manifest, tmp_path):
    rows = run_ablation_loss(manifest, CFG, Task.MOTION, SPEC, subjects=["S01", "S02"],
                             fold_runner=oracle_runner(manifest.subset(["S01", "S02"]), Task.MOTION))
    assert [(r.loss_mode, r.lam) for r in rows] == [("softmax", 0.0), ("softmax+center", 0.001)]
    assert all(r.intra_class_variance == 0.0 for r in rows)
    write_ablation_table(rows, tmp_path, "loss", "motion")
    document = json.loads((tmp_path / "ablation_loss.json").read_text())
    assert [r["lambda"] for r in document["rows"]] == [0.0, 0.001]
    with pytest.raises(ValueError):
        write_ablation_table(rows, tmp_path, "dropout", "motion")


def test_report_files(manifest, tmp_path):
    report = run_loso(manifest, CFG, Task.MOTION, SPEC, fold_runner=oracle_runner(manifest, Task.MOTION))
    path = write_report(report, tmp_path)
    document = load_report(path)
    assert document["macro_f1"] == 1.0
    assert document["evaluated_samples"] == len(manifest)
    assert document["pooled_confusion"] == report.pooled.to_list()
    for name in ("fold_f1.csv", "class_metrics.csv", "confusion_pooled.csv", "confusion_S02.csv"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "fold_f1.csv").read_text().splitlines()[0] == "fold,subject,f1"

    clear_report(tmp_path)
    assert not path.exists()
    path.write_text(json.dumps({"macro_f1": 0.5}))
    with pytest.raises(ValueError, match="incomplete"):
        load_report(path)
