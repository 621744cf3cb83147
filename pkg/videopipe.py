#!/usr/bin/env python3
"""
🎞 VIDEOPIPE
Sequence preprocessing for the mouth-motion and palsy-grade networks.

    crop_face → normalize_frames(n) → resize_spatial(112)

plus temporally coherent augmentation (flip, rotation, colour jitter, each with
its own probability), the label taxonomy shared by every other module, and the
"PSQ1" sequence file format.
"""

import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

PSQ1_MAGIC = b"PSQ1"
DEFAULT_SIZE = 112
DEFAULT_FRAMES = 8
CHANNELS = 3

# House-Brackmann facial nerve grading
HB_GRADES = {
    1: "Normal.",
    2: "Mild dysfunction (slight weakness on close inspection).",
    3: "Moderate dysfunction (obvious but not disfiguring asymmetry).",
    4: "Moderately severe dysfunction (obvious weakness, disfiguring asymmetry).",
    5: "Severe dysfunction (only barely perceptible motion).",
    6: "Total paralysis (no movement).",
}
MIN_GRADE, MAX_GRADE = min(HB_GRADES), max(HB_GRADES)


class SequenceError(ValueError):
    """A video sequence, box list or PSQ1 file is malformed"""


class MotionLabel(str, Enum):
    NO_MOTION = "no_motion"
    SMILE = "smile"
    MOUTH_OPEN = "mouth_open"
    OTHER = "other"

    @property
    def index(self) -> int:
        return list(MotionLabel).index(self)

    @classmethod
    def from_index(cls, index: int) -> "MotionLabel":
        return list(cls)[index]


class Task(str, Enum):
    MOTION = "motion"
    GRADE = "grade"

    @property
    def num_classes(self) -> int:
        return len(MotionLabel) if self is Task.MOTION else len(HB_GRADES)

    @property
    def class_names(self) -> List[str]:
        if self is Task.MOTION:
            return [m.value for m in MotionLabel]
        return [f"grade_{g}" for g in sorted(HB_GRADES)]

    def label_index(self, motion_label: Union["MotionLabel", str], palsy_grade: int) -> int:
        if self is Task.MOTION:
            return MotionLabel(motion_label).index
        return int(palsy_grade) - MIN_GRADE


def check_grade(grade: int) -> int:
    if int(grade) != grade or not MIN_GRADE <= grade <= MAX_GRADE:
        raise ValueError(f"palsy grade {grade} outside the House-Brackmann range {MIN_GRADE}..{MAX_GRADE}")
    return int(grade)


@dataclass(frozen=True)
class VideoSequence:
    frames: np.ndarray
    subject_id: str = ""
    motion_label: MotionLabel = MotionLabel.NO_MOTION
    palsy_grade: int = 1

    def __post_init__(self):
        frames = self.frames
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise SequenceError(f"frames must be T×H×W×C with T ≥ 1, got shape {frames.shape}")
        if frames.shape[3] != CHANNELS:
            raise SequenceError(f"frames must carry {CHANNELS} colour channels, got {frames.shape[3]}")
        if frames.size and (not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0):
            raise SequenceError(f"pixel values must lie in [0, 1] for sequence '{self.subject_id}'")
        object.__setattr__(self, "motion_label", MotionLabel(self.motion_label))
        object.__setattr__(self, "palsy_grade", check_grade(self.palsy_grade))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    def with_frames(self, frames: np.ndarray) -> "VideoSequence":
        return replace(self, frames=frames)


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    rotation_prob: float = 0.5
    max_rotation_deg: float = 10.0
    jitter_prob: float = 0.5
    max_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "rotation_prob", "jitter_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.max_rotation_deg < 0 or self.max_jitter < 0:
            raise ValueError("rotation and jitter bounds must be non-negative")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(flip_prob=0.0, rotation_prob=0.0, jitter_prob=0.0, seed=seed)


# ---------------------------------------------------------------------------
# Temporal and spatial normalisation
# ---------------------------------------------------------------------------

def frame_indices(total: int, n: int) -> np.ndarray:
    """Index map floor(i·T/n): duplicates when T < n, equally spaced removal when T > n."""
    if n < 1:
        raise ValueError(f"target frame count must be ≥ 1, got {n}")
    if total < 1:
        raise SequenceError("sequence has no frames")
    return (np.arange(n, dtype=np.int64) * total) // n


def normalize_frames(seq: VideoSequence, n: int) -> VideoSequence:
    return seq.with_frames(seq.frames[frame_indices(seq.num_frames, n)])


def append_reversed(seq: VideoSequence) -> VideoSequence:
    """Onset→apex becomes onset→apex→onset; the apex frame is not repeated."""
    return seq.with_frames(np.concatenate([seq.frames, seq.frames[-2::-1]], axis=0))


def _per_frame(frames: np.ndarray, op) -> np.ndarray:
    out = [op(np.ascontiguousarray(f)) for f in frames]
    return np.stack([o.reshape(o.shape[:2] + (frames.shape[3],)) for o in out]).astype(frames.dtype, copy=False)


def resize_spatial(seq: VideoSequence, size: int = DEFAULT_SIZE) -> VideoSequence:
    """Bilinear resample of every frame to size×size, clamped to the input range."""
    if seq.height == size and seq.width == size:
        return seq.with_frames(seq.frames.copy())
    resized = _per_frame(seq.frames, lambda f: cv2.resize(f, (size, size), interpolation=cv2.INTER_LINEAR))
    return seq.with_frames(np.clip(resized, seq.frames.min(), seq.frames.max()))


def crop_face(seq: VideoSequence, boxes: Sequence[Tuple[int, int, int, int]]) -> VideoSequence:
    """Replace each frame by its (x, y, w, h) box; crops are brought to the first box's size."""
    if len(boxes) != seq.num_frames:
        raise SequenceError(f"{len(boxes)} boxes for {seq.num_frames} frames")
    crops = []
    for index, (frame, box) in enumerate(zip(seq.frames, boxes)):
        x, y, w, h = (int(v) for v in box)
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > seq.width or y + h > seq.height:
            raise SequenceError(f"frame {index}: box {(x, y, w, h)} outside {seq.width}×{seq.height} frame")
        crops.append(frame[y:y + h, x:x + w])

    rows, cols = crops[0].shape[:2]
    for i, crop in enumerate(crops):
        if crop.shape[:2] != (rows, cols):
            resized = cv2.resize(np.ascontiguousarray(crop), (cols, rows), interpolation=cv2.INTER_LINEAR)
            crops[i] = np.clip(resized.reshape(rows, cols, seq.channels), 0.0, 1.0)
    return seq.with_frames(np.stack(crops).astype(seq.frames.dtype, copy=False))


def preprocess_sequence(seq: VideoSequence, n: int = DEFAULT_FRAMES, size: int = DEFAULT_SIZE,
                        boxes: Optional[Sequence[Tuple[int, int, int, int]]] = None) -> VideoSequence:
    if boxes is not None:
        seq = crop_face(seq, boxes)
    return resize_spatial(normalize_frames(seq, n), size)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_horizontal(seq: VideoSequence) -> VideoSequence:
    return seq.with_frames(np.ascontiguousarray(seq.frames[:, :, ::-1, :]))


def rotate(seq: VideoSequence, angle_deg: float) -> VideoSequence:
    """Rotate every frame about its centre; exposed corners replicate the border."""
    if angle_deg == 0:
        return seq.with_frames(seq.frames.copy())
    center = ((seq.width - 1) / 2.0, (seq.height - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, float(angle_deg), 1.0)
    rotated = _per_frame(seq.frames, lambda f: cv2.warpAffine(
        f, matrix, (seq.width, seq.height), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE))
    return seq.with_frames(np.clip(rotated, 0.0, 1.0))


def color_jitter(seq: VideoSequence, scales: Sequence[float]) -> VideoSequence:
    scales = np.asarray(scales, dtype=seq.frames.dtype)
    if scales.shape != (seq.channels,):
        raise SequenceError(f"{scales.shape[0]} jitter scales for {seq.channels} channels")
    return seq.with_frames(np.clip(seq.frames * scales, 0.0, 1.0).astype(seq.frames.dtype))


def _as_generator(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def augment(seq: VideoSequence, cfg: AugmentationConfig, rng_state) -> VideoSequence:
    """Apply flip, rotation and brightness jitter to the whole sequence.

    Exactly three uniform variates are drawn per sequence, in the order flip,
    rotation, jitter. A variate u below its probability p fires the transform
    and, rescaled to u/p, also sets its magnitude: the angle is
    max_rotation_deg·(2u/p − 1) and the brightness scale 1 + max_jitter·(2u/p − 1).
    """
    rng = _as_generator(rng_state)
    u_flip, u_rot, u_jitter = rng.random(3)

    out = seq
    if u_flip < cfg.flip_prob:
        out = flip_horizontal(out)
    if u_rot < cfg.rotation_prob:
        out = rotate(out, cfg.max_rotation_deg * (2.0 * u_rot / cfg.rotation_prob - 1.0))
    if u_jitter < cfg.jitter_prob:
        brightness = 1.0 + cfg.max_jitter * (2.0 * u_jitter / cfg.jitter_prob - 1.0)
        out = color_jitter(out, [brightness] * out.channels)
    return out


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Per-sample generator derived from the global seed and sample coordinates."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def to_network_input(sequences: Sequence[VideoSequence], dtype=np.float32) -> np.ndarray:
    """Stack T×H×W×C sequences into an N×C×T×H×W batch."""
    if not sequences:
        raise SequenceError("cannot batch zero sequences")
    shapes = {s.frames.shape for s in sequences}
    if len(shapes) != 1:
        raise SequenceError(f"sequences in a batch must share one shape, got {sorted(shapes)}")
    return np.ascontiguousarray(np.stack([s.frames for s in sequences]).transpose(0, 4, 1, 2, 3), dtype=dtype)


# ---------------------------------------------------------------------------
# PSQ1 sequences and box files
# ---------------------------------------------------------------------------

def save_sequence(seq: Union[VideoSequence, np.ndarray], path: Union[str, Path]) -> None:
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq)
    if frames.ndim != 4:
        raise SequenceError(f"PSQ1 stores T×H×W×C frames, got shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(PSQ1_MAGIC)
        fh.write(struct.pack("<4I", *frames.shape))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes(order="C"))


def read_frames(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PSQ1_MAGIC:
            raise SequenceError(f"{path}: bad PSQ1 magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise SequenceError(f"{path}: truncated PSQ1 header")
        shape = struct.unpack("<4I", header)
        payload = fh.read()
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise SequenceError(f"{path}: PSQ1 payload has {len(payload)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def load_sequence(path: Union[str, Path], subject_id: str = "", motion_label: Union[MotionLabel, str] = MotionLabel.NO_MOTION,
                  palsy_grade: int = 1) -> VideoSequence:
    return VideoSequence(read_frames(path), subject_id, MotionLabel(motion_label), palsy_grade)


def load_boxes(path: Union[str, Path], num_frames: Optional[int] = None) -> List[Tuple[int, int, int, int]]:
    """Read `frame_index x y w h` lines; every frame from 0 must appear exactly once."""
    boxes = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 5:
                raise SequenceError(f"{path}:{lineno}: expected `frame_index x y w h`")
            try:
                index, x, y, w, h = (int(v) for v in fields)
            except ValueError as e:
                raise SequenceError(f"{path}:{lineno}: {e}") from e
            if index in boxes:
                raise SequenceError(f"{path}:{lineno}: duplicate box for frame {index}")
            boxes[index] = (x, y, w, h)
    expected = num_frames if num_frames is not None else len(boxes)
    if sorted(boxes) != list(range(expected)):
        raise SequenceError(f"{path}: boxes must cover frames 0..{expected - 1} exactly once")
    return [boxes[i] for i in range(expected)]
