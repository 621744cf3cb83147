#!/usr/bin/env python3
"""
📊 LOSO EVALUATION
Leave-one-subject-out evaluation, confusion matrices, F1 reporting and the two
ablation drivers (frame duration, loss function).

Folds are independent. run_loso_async schedules them with asyncio.to_thread under
a semaphore sized by the worker count; results are always assembled in fold order.
"""

import asyncio
import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import f1_score, precision_recall_fscore_support

from palsy_losses import DEFAULT_LAMBDA
from palsy_trainer import OptimizerConfig, predict, preprocess_records, train
from resnet3d_model import ModelParams, NetworkSpec
from synthetic_dataset import Manifest
from videopipe import AugmentationConfig, Task

REPORT_NAME = "report"

# (fold index, train record indices, test record indices, fold seed) -> (predicted labels, test embeddings or None)
FoldRunner = Callable[[int, List[int], List[int], int], Tuple[np.ndarray, Optional[np.ndarray]]]


class LosoLeakError(RuntimeError):
    """A test subject's records reached the training split of its own fold"""


@dataclass(frozen=True)
class LosoFold:
    test_subject: str
    train_subjects: Tuple[str, ...]


@dataclass(frozen=True)
class LosoPlan:
    folds: Tuple[LosoFold, ...]

    @property
    def subjects(self) -> List[str]:
        return [f.test_subject for f in self.folds]


def loso_split(manifest: Manifest) -> LosoPlan:
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise ValueError(f"leave-one-subject-out needs at least 2 subjects, manifest has {len(subjects)}")
    return LosoPlan(tuple(LosoFold(s, tuple(o for o in subjects if o != s)) for s in subjects))


def check_fold(manifest: Manifest, fold: LosoFold, train_indices: Sequence[int], test_indices: Sequence[int]) -> None:
    if fold.test_subject in fold.train_subjects:
        raise LosoLeakError(f"subject {fold.test_subject} is listed among its own fold's training subjects")
    leaked = [i for i in train_indices if manifest.records[i].subject_id == fold.test_subject]
    if leaked:
        raise LosoLeakError(f"{len(leaked)} records of test subject {fold.test_subject} are in the training split")
    stray = [i for i in test_indices if manifest.records[i].subject_id != fold.test_subject]
    if stray:
        raise LosoLeakError(f"test split for {fold.test_subject} holds records of other subjects")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class"""
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError(f"cannot add confusion matrices of shapes {self.counts.shape} and {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)

    def to_list(self) -> List[List[int]]:
        return self.counts.astype(int).tolist()

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))


def confusion_matrix(truth: Sequence[int], predicted: Sequence[int], n_classes: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
    if truth.shape != predicted.shape:
        raise ValueError(f"{truth.shape[0]} true labels but {predicted.shape[0]} predictions")
    for name, values in (("true", truth), ("predicted", predicted)):
        bad = values[(values < 0) | (values >= n_classes)]
        if bad.size:
            raise ValueError(f"{name} label {int(bad[0])} outside [0, {n_classes})")
    if truth.size == 0:
        return ConfusionMatrix.zeros(n_classes)
    return ConfusionMatrix(sk_confusion_matrix(truth, predicted, labels=list(range(n_classes))).astype(np.int64))


@dataclass(frozen=True)
class F1Report:
    precision: Tuple[float, ...]
    recall: Tuple[float, ...]
    f1: Tuple[float, ...]
    support: Tuple[int, ...]
    included: Tuple[bool, ...]
    macro_f1: float
    micro_f1: float

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> Dict:
        names = list(class_names) if class_names else [str(i) for i in range(len(self.f1))]
        return {
            "classes": [
                {"class": name, "precision": p, "recall": r, "f1": f, "support": s, "in_macro": inc}
                for name, p, r, f, s, inc in zip(names, self.precision, self.recall, self.f1, self.support, self.included)
            ],
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
        }


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def f1_report(cm: ConfusionMatrix) -> F1Report:
    """Per-class precision/recall/F1 with 0/0 → 0.

    Classes with neither true nor predicted samples score 0 and are left out of
    the macro mean; micro F1 is the overall accuracy.
    """
    n = cm.num_classes
    if cm.total == 0:
        zeros = tuple(0.0 for _ in range(n))
        return F1Report(zeros, zeros, zeros, tuple(0 for _ in range(n)), tuple(False for _ in range(n)), 0.0, 0.0)
    # expand the counts back into (truth, predicted) label vectors
    cells = np.repeat(np.arange(n * n), cm.counts.ravel())
    truth, predicted = cells // n, cells % n
    labels = list(range(n))
    precision, recall, f1, support = precision_recall_fscore_support(
        truth, predicted, labels=labels, zero_division=0)
    included = [bool(cm.counts[j, :].sum() > 0 or cm.counts[:, j].sum() > 0) for j in labels]
    scored = [j for j in labels if included[j]]
    macro = float(f1_score(truth, predicted, labels=scored, average="macro", zero_division=0))
    micro = float(f1_score(truth, predicted, labels=labels, average="micro", zero_division=0))
    return F1Report(tuple(float(p) for p in precision), tuple(float(r) for r in recall),
                    tuple(float(f) for f in f1), tuple(int(s) for s in support), tuple(included), macro, micro)


def within_one_grade(cm: ConfusionMatrix) -> float:
    """Share of predictions at most one grade away from the truth."""
    rows, cols = np.indices(cm.counts.shape)
    return _ratio(cm.counts[np.abs(rows - cols) <= 1].sum(), cm.total)


def mean_intra_class_variance(embeddings: np.ndarray, labels: Sequence[int]) -> float:
    """Mean over classes of the mean squared distance to the class centroid."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    spreads = []
    for j in np.unique(labels):
        members = embeddings[labels == j]
        spreads.append(float(np.mean(np.sum((members - members.mean(axis=0)) ** 2, axis=1))))
    return float(np.mean(spreads))


# ---------------------------------------------------------------------------
# LOSO runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldResult:
    index: int
    test_subject: str
    train_subjects: Tuple[str, ...]
    truth: np.ndarray
    predicted: np.ndarray
    confusion: ConfusionMatrix
    macro_f1: float
    intra_class_variance: Optional[float]

    def to_dict(self) -> Dict:
        return {
            "fold": self.index,
            "test_subject": self.test_subject,
            "train_subjects": list(self.train_subjects),
            "samples": int(self.truth.shape[0]),
            "confusion": self.confusion.to_list(),
            "macro_f1": self.macro_f1,
            "intra_class_variance": self.intra_class_variance,
        }


@dataclass(frozen=True)
class EvaluationReport:
    task: Task
    class_names: Tuple[str, ...]
    folds: Tuple[FoldResult, ...]
    pooled: ConfusionMatrix
    metrics: F1Report
    metadata: Dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return self.metrics.macro_f1

    @property
    def evaluated(self) -> int:
        return self.pooled.total

    @property
    def within_one_grade(self) -> Optional[float]:
        return within_one_grade(self.pooled) if self.task is Task.GRADE else None

    @property
    def intra_class_variance(self) -> Optional[float]:
        values = [f.intra_class_variance for f in self.folds if f.intra_class_variance is not None]
        return float(np.mean(values)) if values else None

    def subject_f1(self) -> Dict[str, float]:
        return {f.test_subject: f.macro_f1 for f in self.folds}

    def to_dict(self) -> Dict:
        return {
            "task": self.task.value,
            "classes": list(self.class_names),
            "metadata": dict(self.metadata),
            "folds": [f.to_dict() for f in self.folds],
            "pooled_confusion": self.pooled.to_list(),
            "metrics": self.metrics.to_dict(self.class_names),
            "macro_f1": self.macro_f1,
            "within_one_grade": self.within_one_grade,
            "intra_class_variance": self.intra_class_variance,
            "evaluated_samples": self.evaluated,
        }


def fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold_index)]).generate_state(1)[0])


def default_fold_runner(manifest: Manifest, cfg: OptimizerConfig, task: Task, spec: NetworkSpec,
                        augmentation: Optional[AugmentationConfig] = None,
                        init: Optional[ModelParams] = None) -> FoldRunner:
    """Train on the fold's training split, predict the held-out subject."""
    cache = preprocess_records(manifest, range(len(manifest)), cfg.frame_duration, spec.spatial)
    base_aug = augmentation or AugmentationConfig(seed=cfg.seed)

    def run(index: int, train_indices: List[int], test_indices: List[int], seed: int):
        fold_cfg = replace(cfg, seed=seed)
        state = train(manifest, fold_cfg, task, spec, indices=train_indices, init=init,
                      augmentation=replace(base_aug, seed=seed), cache=cache, require_all_classes=False)
        return predict(state.params, spec, [cache[i] for i in test_indices], batch_size=cfg.batch_size)

    return run


def _evaluate_fold(manifest: Manifest, task: Task, plan: LosoPlan, index: int, runner: FoldRunner,
                   seed: int, verbose: bool) -> FoldResult:
    fold = plan.folds[index]
    train_indices = manifest.indices_for(fold.train_subjects)
    test_indices = manifest.indices_for([fold.test_subject])
    check_fold(manifest, fold, train_indices, test_indices)

    labels = manifest.labels(task)
    if verbose:
        missing = sorted(set(range(task.num_classes)) - set(labels[train_indices].tolist()))
        if missing:
            print(f"   ⚠️ fold {index + 1}: classes {missing} have no training records without {fold.test_subject}")

    predicted, embeddings = runner(index, train_indices, test_indices, fold_seed(seed, index))
    truth = labels[test_indices]
    predicted = np.asarray(predicted, dtype=np.int64)
    cm = confusion_matrix(truth, predicted, task.num_classes)
    variance = mean_intra_class_variance(embeddings, truth) if embeddings is not None else None
    result = FoldResult(index, fold.test_subject, fold.train_subjects, truth, predicted, cm, f1_report(cm).macro_f1,
                        variance)
    if verbose:
        print(f"   ✨ fold {index + 1}/{len(plan.folds)} subject {fold.test_subject}: macro F1 {result.macro_f1:.4f}")
    return result


async def run_loso_async(manifest: Manifest, cfg: OptimizerConfig, task: Union[Task, str], spec: NetworkSpec,
                         workers: int = 1, fold_runner: Optional[FoldRunner] = None,
                         augmentation: Optional[AugmentationConfig] = None, init: Optional[ModelParams] = None,
                         verbose: bool = False) -> EvaluationReport:
    task = Task(task)
    plan = loso_split(manifest)
    runner = fold_runner or default_fold_runner(manifest, cfg, task, spec, augmentation, init)
    semaphore = asyncio.Semaphore(max(1, int(workers)))
    if verbose:
        print(f"🌀 LOSO {task.value}: {len(plan.folds)} folds, {len(manifest)} records, {max(1, int(workers))} worker(s)")

    async def scheduled(index: int) -> FoldResult:
        async with semaphore:
            return await asyncio.to_thread(_evaluate_fold, manifest, task, plan, index, runner, cfg.seed, verbose)

    folds = await asyncio.gather(*(scheduled(i) for i in range(len(plan.folds))))

    pooled = ConfusionMatrix.zeros(task.num_classes)
    for result in folds:
        pooled = pooled + result.confusion
    metadata = {"task": task.value, "config_hash": cfg.config_hash(), "seed": cfg.seed,
                "frame_duration": cfg.frame_duration, "lambda": cfg.lam, "network": spec.to_dict()}
    report = EvaluationReport(task, tuple(task.class_names), tuple(folds), pooled, f1_report(pooled), metadata)
    if verbose:
        print(f"✨ LOSO {task.value} complete: macro F1 {report.macro_f1:.4f} over {report.evaluated} samples")
    return report


def run_loso(manifest: Manifest, cfg: OptimizerConfig, task: Union[Task, str], spec: NetworkSpec,
             workers: int = 1, fold_runner: Optional[FoldRunner] = None,
             augmentation: Optional[AugmentationConfig] = None, init: Optional[ModelParams] = None,
             verbose: bool = False) -> EvaluationReport:
    return asyncio.run(run_loso_async(manifest, cfg, task, spec, workers, fold_runner, augmentation, init, verbose))


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameDurationRow:
    duration: int
    macro_f1: float
    wall_time_s: float


@dataclass(frozen=True)
class LossAblationRow:
    loss_mode: str
    lam: float
    macro_f1: float
    intra_class_variance: Optional[float]


def run_ablation_frame_duration(manifest: Manifest, base_cfg: OptimizerConfig, task: Union[Task, str],
                                spec: NetworkSpec, durations: Sequence[int] = (8, 12, 16), workers: int = 1,
                                augmentation: Optional[AugmentationConfig] = None, record_wall_time: bool = True,
                                fold_runner: Optional[FoldRunner] = None, verbose: bool = False) -> List[FrameDurationRow]:
    """One full LOSO run per frame duration; everything else held fixed."""
    if not durations:
        raise ValueError("frame-duration ablation needs at least one duration")
    rows = []
    for duration in durations:
        if verbose:
            print(f"🌀 Frame duration {duration}")
        started = time.perf_counter()
        report = run_loso(manifest, replace(base_cfg, frame_duration=int(duration)), task,
                          replace(spec, frames=int(duration)), workers, fold_runner, augmentation, verbose=verbose)
        elapsed = time.perf_counter() - started if record_wall_time else 0.0
        rows.append(FrameDurationRow(int(duration), report.macro_f1, elapsed))
    return rows


def run_ablation_loss(manifest: Manifest, base_cfg: OptimizerConfig, task: Union[Task, str], spec: NetworkSpec,
                      subjects: Optional[Sequence[str]] = None, workers: int = 1,
                      augmentation: Optional[AugmentationConfig] = None, fold_runner: Optional[FoldRunner] = None,
                      verbose: bool = False) -> List[LossAblationRow]:
    """Softmax alone against softmax + λ·center, from the same seeds and initialisation."""
    if subjects:
        manifest = manifest.subset(subjects)
    lam = base_cfg.lam if base_cfg.lam > 0 else DEFAULT_LAMBDA
    rows = []
    for mode, arm_lam in (("softmax", 0.0), ("softmax+center", lam)):
        if verbose:
            print(f"🌀 Loss arm {mode} (λ={arm_lam})")
        report = run_loso(manifest, replace(base_cfg, lam=arm_lam), task, spec, workers, fold_runner,
                          augmentation, verbose=verbose)
        rows.append(LossAblationRow(mode, arm_lam, report.macro_f1, report.intra_class_variance))
    return rows


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_json_complete(document: Dict, path: Path) -> None:
    document = dict(document)
    document["complete"] = True
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_confusion_grid(cm: ConfusionMatrix, class_names: Sequence[str], path: Union[str, Path]) -> None:
    _write_csv(Path(path), ["true\\predicted"] + list(class_names),
               ([name] + row for name, row in zip(class_names, cm.to_list())))


def clear_report(out_dir: Union[str, Path], name: str = REPORT_NAME) -> None:
    stale = Path(out_dir) / f"{name}.json"
    if stale.exists():
        stale.unlink()


def write_report(report: EvaluationReport, out_dir: Union[str, Path], name: str = REPORT_NAME) -> Path:
    """CSV summaries and confusion grids first, then the JSON report marked complete."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "fold_f1.csv", ["fold", "subject", "f1"],
               ([f.index, f.test_subject, repr(f.macro_f1)] for f in report.folds))
    metrics = report.metrics
    _write_csv(out_dir / "class_metrics.csv", ["class", "precision", "recall", "f1"],
               ([n, repr(p), repr(r), repr(f)] for n, p, r, f in
                zip(report.class_names, metrics.precision, metrics.recall, metrics.f1)))
    write_confusion_grid(report.pooled, report.class_names, out_dir / "confusion_pooled.csv")
    for fold in report.folds:
        write_confusion_grid(fold.confusion, report.class_names, out_dir / f"confusion_{fold.test_subject}.csv")
    path = out_dir / f"{name}.json"
    write_json_complete(report.to_dict(), path)
    return path


def write_ablation_table(rows: Sequence[Union[FrameDurationRow, LossAblationRow]], out_dir: Union[str, Path],
                         kind: str, task: Union[Task, str]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "frame-duration":
        header = ["duration", "macro_f1", "wall_time_s"]
        values = [[r.duration, repr(r.macro_f1), repr(r.wall_time_s)] for r in rows]
        documents = [{"duration": r.duration, "macro_f1": r.macro_f1, "wall_time_s": r.wall_time_s} for r in rows]
    elif kind == "loss":
        header = ["loss_mode", "lam", "macro_f1", "intra_class_variance"]
        values = [[r.loss_mode, repr(r.lam), repr(r.macro_f1), "" if r.intra_class_variance is None
                   else repr(r.intra_class_variance)] for r in rows]
        documents = [{"loss_mode": r.loss_mode, "lambda": r.lam, "macro_f1": r.macro_f1,
                      "intra_class_variance": r.intra_class_variance} for r in rows]
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    stem = f"ablation_{kind.replace('-', '_')}"
    _write_csv(out_dir / f"{stem}.csv", header, values)
    path = out_dir / f"{stem}.json"
    write_json_complete({"kind": kind, "task": Task(task).value, "rows": documents}, path)
    return path


def load_report(path: Union[str, Path]) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if not document.get("complete"):
        raise ValueError(f"{path}: report is incomplete")
    return document
