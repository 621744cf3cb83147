#!/usr/bin/env python3
"""
⚖ PALSY LOSSES
Joint supervision for the 3D network: softmax cross-entropy on the logits, center
loss on the embedding, and their λ-balanced sum.

Softmax loss is batch-averaged. Center loss is batch-summed (½ Σ‖x_i − c_{y_i}‖²)
and scaled by λ, which defaults to 0.001 because the summed term is much larger.
Class centers are not parameters of the network: they move by a delta rule after
every mini-batch.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np

from resnet3d_model import CENTER_PREFIX, read_param_file
from tensor_core import Function, ShapeError, Tensor, add, scale

DEFAULT_LAMBDA = 0.001
DEFAULT_CENTER_ALPHA = 0.5


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, embedding or class center"""


def _labels_array(labels: Sequence[int], batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"got {labels.shape[0]} labels for a batch of {batch}")
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if bad.size:
        raise ValueError(f"label {int(bad[0])} outside [0, {num_classes})")
    return labels


@dataclass(frozen=True)
class ClassCenters:
    """One embedding centroid per class, moved at rate alpha"""
    centers: np.ndarray
    alpha: float = DEFAULT_CENTER_ALPHA

    def __post_init__(self):
        if self.centers.ndim != 2:
            raise ShapeError(f"centers must be n×d, got shape {self.centers.shape}")
        if not np.all(np.isfinite(self.centers)):
            raise DivergenceError("class centers are not finite; training has diverged")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"center update rate alpha must be in (0, 1], got {self.alpha}")

    @classmethod
    def zeros(cls, num_classes: int, dim: int, alpha: float = DEFAULT_CENTER_ALPHA, dtype=np.float32) -> "ClassCenters":
        return cls(np.zeros((num_classes, dim), dtype=dtype), alpha)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_entries(self) -> Dict[str, np.ndarray]:
        return {f"{CENTER_PREFIX}{j}": self.centers[j] for j in range(self.num_classes)}

    @classmethod
    def from_entries(cls, entries: Dict[str, np.ndarray], alpha: float = DEFAULT_CENTER_ALPHA) -> "ClassCenters":
        rows = {int(name[len(CENTER_PREFIX):]): value for name, value in entries.items() if name.startswith(CENTER_PREFIX)}
        if not rows:
            raise KeyError("no class centers present")
        if sorted(rows) != list(range(len(rows))):
            raise KeyError(f"class centers are not numbered 0..{len(rows) - 1}: {sorted(rows)}")
        return cls(np.stack([rows[j] for j in range(len(rows))]), alpha)


@dataclass(frozen=True)
class LossBreakdown:
    softmax_loss: float
    center_loss: float
    lam: float
    total: float = field(init=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"λ must be non-negative, got {self.lam}")
        if self.softmax_loss < 0 or self.center_loss < 0:
            raise ValueError(f"loss terms must be non-negative, got {self.softmax_loss}, {self.center_loss}")
        object.__setattr__(self, "total", self.softmax_loss + self.lam * self.center_loss)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels):
        m = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(m)
        self.probs = np.exp(shifted - log_norm[:, None])
        self.labels = labels
        return np.asarray((log_norm - shifted[rows, labels]).mean(), dtype=logits.dtype)

    def backward(self, grad):
        m = self.probs.shape[0]
        delta = self.probs.copy()
        delta[np.arange(m), self.labels] -= 1.0
        return (delta * (grad.reshape(()) / delta.dtype.type(m)),)


class CenterDistance(Function):
    def forward(self, x, centers, labels):
        self.diff = x - centers[labels].astype(x.dtype)
        return np.asarray(0.5 * np.sum(self.diff * self.diff), dtype=x.dtype)

    def backward(self, grad):
        return (self.diff * grad.reshape(()),)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch mean of −log softmax(logits)[y_i], max-subtracted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be m×n, got shape {logits.shape}")
    labels = _labels_array(labels, logits.shape[0], logits.shape[1])
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def center_loss(embeddings: Tensor, labels: Sequence[int], centers: ClassCenters) -> Tensor:
    """½ Σ_i ‖x_i − c_{y_i}‖²; the centers are constants here."""
    if embeddings.ndim != 2 or embeddings.shape[1] != centers.dim:
        raise ShapeError(f"embeddings {embeddings.shape} do not match center width {centers.dim}")
    labels = _labels_array(labels, embeddings.shape[0], centers.num_classes)
    return CenterDistance.apply(embeddings, centers=centers.centers, labels=labels)


def update_centers(centers: ClassCenters, embeddings: Union[Tensor, np.ndarray], labels: Sequence[int]) -> ClassCenters:
    """c_j ← c_j − α Σ_{y_i=j}(c_j − x_i) / (1 + count_j); absent classes untouched."""
    x = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    if x.ndim != 2 or x.shape[1] != centers.dim:
        raise ShapeError(f"embeddings {x.shape} do not match center width {centers.dim}")
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite embeddings reached the center update; training has diverged")
    labels = _labels_array(labels, x.shape[0], centers.num_classes)

    current = centers.centers
    moved = current.copy()
    for j in np.unique(labels):
        members = x[labels == j]
        delta = (current[j] - members).sum(axis=0) / (1.0 + members.shape[0])
        moved[j] = current[j] - centers.alpha * delta
    return ClassCenters(moved.astype(current.dtype), centers.alpha)


def total_loss(softmax_loss: float, center_loss_value: float, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    return LossBreakdown(float(softmax_loss), float(center_loss_value), float(lam))


def joint_loss(softmax_term: Tensor, center_term: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Differentiable softmax + λ·center; λ = 0 returns the softmax term itself."""
    if lam < 0:
        raise ValueError(f"λ must be non-negative, got {lam}")
    if lam == 0:
        return softmax_term
    return add(softmax_term, scale(center_term, lam))


def load_centers(path: Union[str, Path], alpha: float = DEFAULT_CENTER_ALPHA) -> ClassCenters:
    return ClassCenters.from_entries(read_param_file(path), alpha)
