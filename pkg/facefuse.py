#!/usr/bin/env python3
"""
👁 FACEFUSE
Face-probability fusion over precomputed landmark heatmaps and detector candidates.

    p_fan  = (1/n) Σ max(H_i)·γ_i
    δ      = 0.7 if det·(100/img) ≤ 2 else 1.0
    p_face = (p_fan + p_faster·δ) / 2

plus the binary cross-entropy detection loss over fused scores. No detector or
landmark network runs here: heatmaps arrive as a PTNS tensor (n×rows×cols) and
candidates as `x y det height p_faster img_width` lines.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core import FormatError, load_tensor

VISIBLE_WEIGHT = 1.0
OCCLUDABLE_WEIGHT = 0.75
SMALL_FACE_PENALTY = 0.7
SMALL_FACE_PERCENT = 2.0
LOG_CLAMP = 1e-7


class FuseInputError(ValueError):
    """Heatmaps, weights or candidates violate their value or length contracts"""


def _check_unit(value: float, what: str):
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise FuseInputError(f"{what} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class LandmarkHeatmaps:
    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise FuseInputError(f"heatmaps must be n×rows×cols with n ≥ 1, got shape {maps.shape}")
        if maps.size and (np.any(np.isnan(maps)) or maps.min() < 0.0 or maps.max() > 1.0):
            raise FuseInputError(f"heatmap values must lie in [0, 1], found [{maps.min()}, {maps.max()}]")
        object.__setattr__(self, "maps", maps)

    @property
    def count(self) -> int:
        return self.maps.shape[0]

    def peaks(self) -> np.ndarray:
        return self.maps.reshape(self.count, -1).max(axis=1)


@dataclass(frozen=True)
class VisibilityWeights:
    gammas: Tuple[float, ...]

    def __post_init__(self):
        gammas = tuple(float(g) for g in self.gammas)
        for g in gammas:
            if g not in (VISIBLE_WEIGHT, OCCLUDABLE_WEIGHT):
                raise FuseInputError(f"visibility weight must be {VISIBLE_WEIGHT} or {OCCLUDABLE_WEIGHT}, got {g}")
        object.__setattr__(self, "gammas", gammas)

    @classmethod
    def all_visible(cls, count: int) -> "VisibilityWeights":
        return cls((VISIBLE_WEIGHT,) * count)

    def __len__(self) -> int:
        return len(self.gammas)


@dataclass(frozen=True)
class FaceCandidate:
    x: float
    y: float
    det: float
    height: float
    p_faster: float
    img_width: float

    def __post_init__(self):
        if not (0.0 < self.det <= self.img_width):
            raise FuseInputError(f"box width must satisfy 0 < det ≤ img_width, got det={self.det}, img={self.img_width}")
        _check_unit(self.p_faster, "p_faster")


@dataclass(frozen=True)
class FusedScore:
    p_fan: float
    delta: float
    p_face: float

    def line(self) -> str:
        return " ".join(format(v, ".6g") for v in (self.p_fan, self.delta, self.p_face))


def heatmap_confidence(heatmaps: LandmarkHeatmaps, weights: Optional[VisibilityWeights] = None) -> float:
    """Mean of γ-weighted heatmap peaks over the n landmarks."""
    weights = weights if weights is not None else VisibilityWeights.all_visible(heatmaps.count)
    if len(weights) != heatmaps.count:
        raise FuseInputError(f"{len(weights)} visibility weights for {heatmaps.count} heatmaps")
    p_fan = float(np.dot(heatmaps.peaks().astype(np.float64), np.asarray(weights.gammas)) / heatmaps.count)
    return min(max(p_fan, 0.0), 1.0)


def size_penalty(candidate: FaceCandidate) -> float:
    ratio = candidate.det * (100.0 / candidate.img_width)
    return SMALL_FACE_PENALTY if ratio <= SMALL_FACE_PERCENT else 1.0


def fuse(p_fan: float, candidate: FaceCandidate) -> FusedScore:
    _check_unit(p_fan, "p_fan")
    delta = size_penalty(candidate)
    return FusedScore(p_fan, delta, (p_fan + candidate.p_faster * delta) / 2.0)


def detection_loss(scores: Sequence[float], truth: Sequence[int]) -> float:
    """Mean binary cross-entropy over the scored candidates, logs clamped at 1e-7."""
    if len(scores) != len(truth):
        raise FuseInputError(f"{len(scores)} scores but {len(truth)} truth labels")
    if not scores:
        return 0.0
    p = np.clip(np.asarray(scores, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)
    t = np.asarray(truth, dtype=np.float64)
    if np.any((t != 0.0) & (t != 1.0)):
        raise FuseInputError("detection truth labels must be 0 or 1")
    return float(np.mean(-(1.0 - t) * np.log(1.0 - p) - t * np.log(p)))


def score_candidates(heatmaps: LandmarkHeatmaps, weights: Optional[VisibilityWeights],
                     candidates: Sequence[FaceCandidate]) -> List[FusedScore]:
    p_fan = heatmap_confidence(heatmaps, weights)
    return [fuse(p_fan, c) for c in candidates]


# ---------------------------------------------------------------------------
# File inputs
# ---------------------------------------------------------------------------

def load_heatmaps(path: Union[str, Path]) -> LandmarkHeatmaps:
    try:
        return LandmarkHeatmaps(load_tensor(path).numpy())
    except FormatError as e:
        raise FuseInputError(f"{path}: {e}") from e


def load_candidates(path: Union[str, Path]) -> List[FaceCandidate]:
    candidates = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 6:
                raise FuseInputError(f"{path}:{lineno}: expected 6 fields `x y det height p_faster img_width`, got {len(fields)}")
            try:
                values = [float(v) for v in fields]
            except ValueError as e:
                raise FuseInputError(f"{path}:{lineno}: {e}") from e
            try:
                candidates.append(FaceCandidate(*values))
            except FuseInputError as e:
                raise FuseInputError(f"{path}:{lineno}: {e}") from e
    return candidates


def parse_gammas(spec: Union[str, Path, Sequence[float], None], count: int) -> VisibilityWeights:
    """γ from an explicit list, a whitespace-separated file, or all-visible."""
    if spec is None:
        return VisibilityWeights.all_visible(count)
    if isinstance(spec, (str, Path)):
        path = Path(spec)
        if path.exists():
            spec = path.read_text(encoding="utf-8").split()
        else:
            spec = str(spec).replace(",", " ").split()
    try:
        values = [float(g) for g in spec]
    except ValueError as e:
        raise FuseInputError(f"bad visibility weight: {e}") from e
    return VisibilityWeights(tuple(values))
