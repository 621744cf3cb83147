#!/usr/bin/env python3
"""
🧪 SYNTHETIC DATASET
Schematic face sequences standing in for the clinical palsy and posed-expression data.

Every sequence is a textured background, a skin ellipse, two eye blobs and a
mouth drawn as upper and lower lip curves. The motion class decides the mouth
trajectory; the House-Brackmann grade g scales the displacement of the affected
(image-left) half by a(g) = (6 − g)/5, so grade 1 is symmetric and grade 6 does
not move on the left at all.

Also here: the JSON manifest that indexes sequences on disk and the weighted
sampler that balances mini-batches across classes.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from videopipe import (
    MAX_GRADE, MIN_GRADE, MotionLabel, Task, VideoSequence, check_grade, load_sequence, save_sequence,
)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SEQUENCE_DIR = "sequences"
RECORD_FIELDS = ("subject_id", "motion_label", "palsy_grade", "path")
GRADE_LAYOUTS = ("per_subject", "cycled")


class ManifestError(ValueError):
    """The manifest is missing, malformed, or points at sequences that are not there"""


class EmptyClassError(ValueError):
    """A class the sampler must balance has no records"""


def amplitude_factor(grade: int) -> float:
    """Affected-side motion scale: 1 at grade 1, 0 at grade 6, linear in between."""
    grade = check_grade(grade)
    return (MAX_GRADE - grade) / (MAX_GRADE - MIN_GRADE)


@dataclass(frozen=True)
class SyntheticConfig:
    subjects: int = 10
    palsy_subjects: int = 5
    frames: int = 24
    size: int = 128
    repetitions: int = 10
    motions: Tuple[str, ...] = tuple(m.value for m in MotionLabel)
    motion_amplitude: float = 0.06
    noise: float = 0.01
    grade_layout: str = "per_subject"
    seed: int = 0

    def __post_init__(self):
        if self.subjects < 1 or self.repetitions < 1 or self.frames < 1:
            raise ValueError("subjects, repetitions and frames must all be ≥ 1")
        if not 0 <= self.palsy_subjects <= self.subjects:
            raise ValueError(f"palsy_subjects must be in [0, {self.subjects}], got {self.palsy_subjects}")
        if self.size < 16:
            raise ValueError(f"frame size must be ≥ 16 pixels, got {self.size}")
        if self.motion_amplitude <= 0 or self.noise < 0:
            raise ValueError("motion_amplitude must be positive and noise non-negative")
        if self.grade_layout not in GRADE_LAYOUTS:
            raise ValueError(f"grade_layout must be one of {GRADE_LAYOUTS}, got '{self.grade_layout}'")
        motions = tuple(MotionLabel(m).value for m in self.motions)
        if not motions or len(set(motions)) != len(motions):
            raise ValueError(f"motions must be a non-empty list without repeats, got {self.motions}")
        object.__setattr__(self, "motions", motions)

    def subject_ids(self) -> List[str]:
        return [f"S{k:02d}" for k in range(1, self.subjects + 1)]

    def grade_for(self, subject_number: int, repetition: int) -> int:
        """Subjects 1..palsy_subjects carry grades 2–6, the rest grade 1."""
        if subject_number > self.palsy_subjects:
            return MIN_GRADE
        offset = subject_number - 1
        if self.grade_layout == "cycled":
            offset += repetition
        return MIN_GRADE + 1 + offset % (MAX_GRADE - MIN_GRADE)


@dataclass(frozen=True)
class SampleRecord:
    subject_id: str
    motion_label: MotionLabel
    palsy_grade: int
    path: str

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        object.__setattr__(self, "motion_label", MotionLabel(self.motion_label))
        object.__setattr__(self, "palsy_grade", check_grade(self.palsy_grade))

    def label(self, task: Union[Task, str]) -> int:
        return Task(task).label_index(self.motion_label, self.palsy_grade)

    def to_dict(self) -> Dict:
        return {"subject_id": self.subject_id, "motion_label": self.motion_label.value,
                "palsy_grade": self.palsy_grade, "path": self.path}


@dataclass(frozen=True)
class Manifest:
    records: Tuple[SampleRecord, ...]
    version: int = MANIFEST_VERSION
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ManifestError("manifest has no records")

    @property
    def subjects(self) -> List[str]:
        return sorted({r.subject_id for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def labels(self, task: Union[Task, str]) -> np.ndarray:
        return np.array([r.label(task) for r in self.records], dtype=np.int64)

    def subset(self, subjects: Sequence[str]) -> "Manifest":
        keep = set(subjects)
        return Manifest(tuple(r for r in self.records if r.subject_id in keep), self.version, self.root)

    def indices_for(self, subjects: Sequence[str]) -> List[int]:
        keep = set(subjects)
        return [i for i, r in enumerate(self.records) if r.subject_id in keep]

    def resolve(self, record: SampleRecord) -> Path:
        path = Path(record.path)
        return path if path.is_absolute() or self.root is None else self.root / path

    def load(self, record: SampleRecord) -> VideoSequence:
        return load_sequence(self.resolve(record), record.subject_id, record.motion_label, record.palsy_grade)


# ---------------------------------------------------------------------------
# Mouth motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MouthTrajectory:
    """Per-frame mouth displacements in units of the motion amplitude.

    Corners hold (outward, upward) offsets; apertures are the lower-lip drop on
    each half of the mouth.
    """
    left_corner: np.ndarray
    right_corner: np.ndarray
    left_aperture: np.ndarray
    right_aperture: np.ndarray

    def side_displacement(self, side: str) -> np.ndarray:
        corner, aperture = ((self.left_corner, self.left_aperture) if side == "left"
                            else (self.right_corner, self.right_aperture))
        return np.sqrt(np.sum(corner ** 2, axis=1) + aperture ** 2)


def _motion_profile(frames: int) -> np.ndarray:
    if frames == 1:
        return np.ones(1)
    return np.sin(np.pi * np.arange(frames) / (frames - 1))


def mouth_trajectory(cfg: SyntheticConfig, motion: Union[MotionLabel, str], grade: int, frames: int,
                     rng: np.random.Generator) -> MouthTrajectory:
    motion = MotionLabel(motion)
    factor = amplitude_factor(grade)
    strength = rng.uniform(0.8, 1.2)
    frequency = rng.uniform(1.5, 3.0)
    p = _motion_profile(frames) * strength
    zeros = np.zeros(frames)

    if motion is MotionLabel.NO_MOTION:
        corner, aperture = np.stack([zeros, zeros], axis=1), zeros
    elif motion is MotionLabel.SMILE:
        corner, aperture = np.stack([0.5 * p, p], axis=1), 0.15 * p
    elif motion is MotionLabel.MOUTH_OPEN:
        corner, aperture = np.stack([-0.1 * p, zeros], axis=1), 1.2 * p
    else:
        # pucker with a talking-like oscillating aperture
        t = np.arange(frames) / max(frames - 1, 1)
        corner = np.stack([-0.6 * p, -0.1 * p], axis=1)
        aperture = 0.5 * p * np.abs(np.sin(2.0 * np.pi * frequency * t))

    return MouthTrajectory(left_corner=corner * factor, right_corner=corner.copy(),
                           left_aperture=aperture * factor, right_aperture=aperture.copy())


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _subject_seed(cfg: SyntheticConfig, subject_id: str) -> np.random.SeedSequence:
    digest = int(hashlib.sha256(subject_id.encode()).hexdigest()[:16], 16)
    return np.random.SeedSequence([cfg.seed, digest])


@dataclass(frozen=True)
class _Appearance:
    center: Tuple[float, float]
    radii: Tuple[float, float]
    skin: np.ndarray
    background: np.ndarray
    mouth_width: float
    eye_sigma: float


def _appearance(cfg: SyntheticConfig, subject_id: str) -> _Appearance:
    rng = np.random.default_rng(_subject_seed(cfg, subject_id))
    s = float(cfg.size)
    cx, cy = s * (0.5 + rng.uniform(-0.03, 0.03)), s * (0.5 + rng.uniform(-0.03, 0.03))
    rx, ry = s * rng.uniform(0.30, 0.36), s * rng.uniform(0.38, 0.44)
    skin = np.clip(rng.uniform(0.55, 0.85) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)

    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)
    base = rng.uniform(0.1, 0.4, size=3)
    fx, fy = rng.uniform(1.0, 4.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    texture = np.stack([0.06 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) / s + phase[c]) for c in range(3)], axis=-1)
    background = np.clip(base + texture, 0.0, 1.0)
    return _Appearance((cx, cy), (rx, ry), skin, background, rx * rng.uniform(0.7, 0.9), rx * 0.06)


def _gaussian_points(yy, xx, points: np.ndarray, sigma: float) -> np.ndarray:
    d2 = (xx[None] - points[:, 0, None, None]) ** 2 + (yy[None] - points[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma)).max(axis=0)


def _lip_points(left: np.ndarray, right: np.ndarray, left_drop: float, right_drop: float, bow: float,
                count: int = 25) -> Tuple[np.ndarray, np.ndarray]:
    u = np.linspace(0.0, 1.0, count)[:, None]
    chord = (1.0 - u) * left + u * right
    arch = np.sin(np.pi * u)
    upper = chord + np.concatenate([np.zeros_like(u), -bow * arch], axis=1)
    drop = arch * ((1.0 - u) * left_drop + u * right_drop)
    lower = chord + np.concatenate([np.zeros_like(u), bow * arch + drop], axis=1)
    return upper, lower


def generate_sequence(cfg: SyntheticConfig, subject_id: str, motion_label: Union[MotionLabel, str], palsy_grade: int,
                      seed: int) -> VideoSequence:
    """Render one deterministic sequence of cfg.frames frames at cfg.size×cfg.size."""
    motion_label = MotionLabel(motion_label)
    palsy_grade = check_grade(palsy_grade)
    look = _appearance(cfg, subject_id)
    rng = np.random.default_rng(seed)
    trajectory = mouth_trajectory(cfg, motion_label, palsy_grade, cfg.frames, rng)

    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    (cx, cy), (rx, ry) = look.center, look.radii
    radial = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    face = 1.0 / (1.0 + np.exp(12.0 * (radial - 1.0)))
    canvas = look.background * (1.0 - face[..., None]) + look.skin * face[..., None]
    eyes = _gaussian_points(yy, xx, np.array([[cx - 0.35 * rx, cy - 0.3 * ry], [cx + 0.35 * rx, cy - 0.3 * ry]]),
                            look.eye_sigma)
    canvas = canvas * (1.0 - 0.6 * eyes[..., None])

    amp = cfg.motion_amplitude * size
    mouth_y = cy + 0.45 * ry
    rest_left = np.array([cx - look.mouth_width / 2.0, mouth_y])
    rest_right = np.array([cx + look.mouth_width / 2.0, mouth_y])
    lip_sigma = max(0.015 * size, 1.0)

    frames = np.empty((cfg.frames, size, size, 3), dtype=np.float32)
    for t in range(cfg.frames):
        lo, lu = trajectory.left_corner[t] * amp
        ro, ru = trajectory.right_corner[t] * amp
        left = rest_left + np.array([-lo, -lu])
        right = rest_right + np.array([ro, -ru])
        upper, lower = _lip_points(left, right, trajectory.left_aperture[t] * amp,
                                   trajectory.right_aperture[t] * amp, bow=0.04 * size)
        lips = _gaussian_points(yy, xx, np.concatenate([upper, lower]), lip_sigma)
        frame = canvas * (1.0 - 0.7 * lips[..., None])
        if cfg.noise > 0:
            frame = frame + rng.normal(0.0, cfg.noise, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)

    return VideoSequence(frames, subject_id, motion_label, palsy_grade)


def sequence_seed(cfg: SyntheticConfig, subject_number: int, motion: MotionLabel, repetition: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, subject_number, motion.index, repetition]).generate_state(1)[0])


def generate_dataset(cfg: SyntheticConfig, out_dir: Union[str, Path], verbose: bool = False) -> Manifest:
    """Write every (subject, motion, repetition) sequence plus manifest.json."""
    out_dir = Path(out_dir)
    (out_dir / SEQUENCE_DIR).mkdir(parents=True, exist_ok=True)
    if verbose:
        print(f"🌀 Generating {cfg.subjects * len(cfg.motions) * cfg.repetitions} synthetic sequences into {out_dir}")

    records = []
    for number, subject_id in enumerate(cfg.subject_ids(), start=1):
        for motion in (MotionLabel(m) for m in cfg.motions):
            for rep in range(cfg.repetitions):
                grade = cfg.grade_for(number, rep)
                seq = generate_sequence(cfg, subject_id, motion, grade, sequence_seed(cfg, number, motion, rep))
                relative = f"{SEQUENCE_DIR}/{subject_id}_{motion.value}_{rep:02d}.psq"
                save_sequence(seq, out_dir / relative)
                records.append(SampleRecord(subject_id, motion, grade, relative))
        if verbose:
            print(f"   ✨ {subject_id}: {len(cfg.motions) * cfg.repetitions} sequences")

    manifest = Manifest(tuple(records), MANIFEST_VERSION, out_dir)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    if verbose:
        print(f"✨ Manifest written: {out_dir / MANIFEST_NAME} ({len(records)} records)")
    return manifest


# ---------------------------------------------------------------------------
# Manifest storage
# ---------------------------------------------------------------------------

def save_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    document = {"version": manifest.version, "records": [r.to_dict() for r in manifest.records]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")


def _parse_record(index: int, raw) -> SampleRecord:
    if not isinstance(raw, dict):
        raise ManifestError(f"record {index}: expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(RECORD_FIELDS))
    if unknown:
        raise ManifestError(f"record {index}: unknown field(s) {', '.join(repr(u) for u in unknown)}")
    missing = [name for name in RECORD_FIELDS if name not in raw]
    if missing:
        raise ManifestError(f"record {index}: missing field(s) {', '.join(repr(m) for m in missing)}")
    try:
        return SampleRecord(str(raw["subject_id"]), raw["motion_label"], raw["palsy_grade"], str(raw["path"]))
    except (ValueError, TypeError) as e:
        raise ManifestError(f"record {index}: {e}") from e


def load_manifest(path: Union[str, Path], check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(document, dict):
        raise ManifestError(f"{path}: top level must be an object")
    unknown = sorted(set(document) - {"version", "records"})
    if unknown:
        raise ManifestError(f"{path}: unknown field(s) {', '.join(repr(u) for u in unknown)}")
    if document.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {document.get('version')!r}")
    if not isinstance(document.get("records"), list):
        raise ManifestError(f"{path}: 'records' must be a list")

    records = tuple(_parse_record(i, raw) for i, raw in enumerate(document["records"]))
    manifest = Manifest(records, MANIFEST_VERSION, path.parent)
    if check_paths:
        for i, record in enumerate(records):
            if not manifest.resolve(record).exists():
                raise ManifestError(
                    f"record {i} ({record.subject_id} {record.motion_label.value}): sequence file {record.path} not found")
    return manifest


# ---------------------------------------------------------------------------
# Class-balanced sampling
# ---------------------------------------------------------------------------

def sample_weights(labels: Sequence[int], classes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Inverse class-frequency weight per record, normalised to a distribution."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyClassError("no records to sample from")
    present, counts = np.unique(labels, return_counts=True)
    if classes is not None:
        empty = sorted(set(int(c) for c in classes) - set(present.tolist()))
        if empty:
            raise EmptyClassError(f"class(es) {empty} have no records")
    count_of = dict(zip(present.tolist(), counts.tolist()))
    weights = np.array([1.0 / count_of[int(l)] for l in labels])
    return weights / weights.sum()


def weighted_sampler(manifest: Manifest, label_field: Union[Task, str], batch_size: int, seed: int,
                     classes: Optional[Sequence[int]] = None, num_batches: Optional[int] = None,
                     indices: Optional[Sequence[int]] = None) -> Iterator[np.ndarray]:
    """Yield batches of record indices drawn with replacement so each class is equally likely.

    `indices` restricts sampling to a subset of the manifest (a LOSO training split);
    yielded indices always refer to the full manifest.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be ≥ 1, got {batch_size}")
    pool = np.arange(len(manifest)) if indices is None else np.asarray(indices, dtype=np.int64)
    labels = manifest.labels(label_field)[pool]
    weights = sample_weights(labels, classes)
    rng = np.random.default_rng(seed)
    produced = 0
    while num_batches is None or produced < num_batches:
        yield pool[rng.choice(pool.shape[0], size=batch_size, replace=True, p=weights)]
        produced += 1
