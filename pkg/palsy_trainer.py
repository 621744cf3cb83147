#!/usr/bin/env python3
"""
🏋 PALSY TRAINER
Two optimisers over one network: momentum SGD with additive weight decay for the
network parameters, and the center delta rule for the class centers.

Each step runs preprocess → augment → forward (train mode) → softmax + λ·center
→ backward → sgd_step on the trainable parameters → update_centers. Mini-batches
come from the class-balancing weighted sampler, so an epoch is a fixed number of
sampled batches rather than a pass over a shuffled list.
"""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from palsy_losses import (
    DEFAULT_CENTER_ALPHA, DEFAULT_LAMBDA, ClassCenters, DivergenceError, LossBreakdown, center_loss, joint_loss,
    load_centers, softmax_cross_entropy, total_loss, update_centers,
)
from resnet3d_model import (
    DEFAULT_FREEZE_POLICY, ModelParams, NetworkSpec, forward, freeze_layers, init_params, load_params, save_params,
)
from synthetic_dataset import Manifest, weighted_sampler
from tensor_core import GradientRecord, Mode, ShapeError, Tensor, backward
from videopipe import AugmentationConfig, Task, VideoSequence, augment, preprocess_sequence, sample_rng, to_network_input

PARAMS_FILE = "params.ppar"
CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "loss_history.csv"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    weight_decay: float = 0.001
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 8
    frame_duration: int = 8
    lam: float = DEFAULT_LAMBDA
    center_alpha: float = DEFAULT_CENTER_ALPHA
    seed: int = 0
    freeze_policy: Union[str, Tuple[str, ...]] = DEFAULT_FREEZE_POLICY
    freeze_bn_stats: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1 or self.frame_duration < 1:
            raise ValueError("batch_size and frame_duration must be ≥ 1")
        if self.lam < 0:
            raise ValueError(f"λ must be non-negative, got {self.lam}")
        if self.weight_decay < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("weight_decay must be ≥ 0 and momentum in [0, 1)")
        if not 0.0 < self.center_alpha <= 1.0:
            raise ValueError(f"center_alpha must be in (0, 1], got {self.center_alpha}")
        if not isinstance(self.freeze_policy, str):
            object.__setattr__(self, "freeze_policy", tuple(self.freeze_policy))

    def to_dict(self) -> Dict:
        data = asdict(self)
        if isinstance(self.freeze_policy, tuple):
            data["freeze_policy"] = list(self.freeze_policy)
        return data

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class TrainState:
    params: ModelParams
    buffers: Dict[str, np.ndarray]
    centers: ClassCenters
    epoch: int = 0
    step: int = 0
    history: List[LossBreakdown] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams, spec: NetworkSpec, cfg: OptimizerConfig) -> "TrainState":
        dtype = params["fc.weight"].dtype
        buffers = {name: np.zeros_like(t.data) for name, t in params.learnable_items()}
        return cls(params, buffers, ClassCenters.zeros(spec.num_classes, spec.embedding_dim, cfg.center_alpha, dtype))


def named_gradients(params: ModelParams, record: GradientRecord) -> Dict[str, np.ndarray]:
    return {name: record[t] for name, t in params.learnable_items() if t in record}


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], buffers: Dict[str, np.ndarray],
             cfg: OptimizerConfig) -> Tuple[ModelParams, Dict[str, np.ndarray]]:
    """v ← momentum·v + g + wd·p; p ← p − lr·v, for trainable parameters only.

    Parameter tensors keep their identity; only their data is replaced.
    """
    for name, t in params.learnable_items():
        if not params.is_trainable(name):
            continue
        p = t.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        v = buffers.get(name)
        if v is None:
            v = np.zeros_like(p)
        if v.shape != p.shape:
            raise ShapeError(f"momentum buffer for '{name}' has shape {v.shape}, parameter has {p.shape}")
        v = (cfg.momentum * v + g + cfg.weight_decay * p).astype(p.dtype)
        buffers[name] = v
        t.data = (p - p.dtype.type(cfg.lr) * v).astype(p.dtype)
    return params, buffers


def batch_labels(batch: Sequence[VideoSequence], task: Union[Task, str]) -> np.ndarray:
    task = Task(task)
    return np.array([task.label_index(s.motion_label, s.palsy_grade) for s in batch], dtype=np.int64)


def train_step(state: TrainState, batch: Sequence[VideoSequence], cfg: OptimizerConfig, task: Union[Task, str],
               spec: NetworkSpec) -> Tuple[TrainState, LossBreakdown]:
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    labels = batch_labels(batch, task)
    x = Tensor(to_network_input(batch, dtype=state.params["fc.weight"].dtype))

    embedding, logits = forward(x, spec, state.params, Mode.TRAIN, update_stats=not cfg.freeze_bn_stats)
    softmax_term = softmax_cross_entropy(logits, labels)
    center_term = center_loss(embedding, labels, state.centers)
    loss = joint_loss(softmax_term, center_term, cfg.lam)
    if not np.isfinite(loss.item()):
        raise DivergenceError(f"loss became {loss.item()} at step {state.step}; lower the learning rate")
    grads = named_gradients(state.params, backward(loss))
    sgd_step(state.params, grads, state.buffers, cfg)
    if cfg.lam > 0:
        state.centers = update_centers(state.centers, embedding.data, labels)

    breakdown = total_loss(softmax_term.item(), center_term.item(), cfg.lam)
    state.history.append(breakdown)
    state.step += 1
    return state, breakdown


def preprocess_records(manifest: Manifest, indices: Sequence[int], frames: int, size: int) -> Dict[int, VideoSequence]:
    return {int(i): preprocess_sequence(manifest.load(manifest.records[i]), frames, size) for i in indices}


def _check_compatible(cfg: OptimizerConfig, task: Task, spec: NetworkSpec):
    if spec.frames != cfg.frame_duration:
        raise ValueError(f"network expects {spec.frames} frames but frame_duration is {cfg.frame_duration}")
    if spec.num_classes != task.num_classes:
        raise ValueError(f"network has {spec.num_classes} classes, task '{task.value}' has {task.num_classes}")


def train(manifest: Manifest, cfg: OptimizerConfig, task: Union[Task, str], spec: NetworkSpec,
          indices: Optional[Sequence[int]] = None, init: Optional[ModelParams] = None,
          augmentation: Optional[AugmentationConfig] = None, cache: Optional[Dict[int, VideoSequence]] = None,
          require_all_classes: bool = True, verbose: bool = False) -> TrainState:
    """Train on manifest records (all, or `indices`) for cfg.epochs epochs.

    The freeze policy is applied to the initial parameters before the first step.
    With require_all_classes every task class must have a training record.
    """
    task = Task(task)
    _check_compatible(cfg, task, spec)
    pool = list(range(len(manifest))) if indices is None else [int(i) for i in indices]
    if not pool:
        raise ValueError("no training records")
    augmentation = augmentation or AugmentationConfig(seed=cfg.seed)

    params = init.copy() if init is not None else init_params(spec, seed=cfg.seed)
    params = freeze_layers(params, cfg.freeze_policy)
    params.sync_requires_grad()
    state = TrainState.fresh(params, spec, cfg)

    steps_per_epoch = math.ceil(len(pool) / cfg.batch_size)
    classes = range(task.num_classes) if require_all_classes else None
    sampler_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    sampler = weighted_sampler(manifest, task, cfg.batch_size, sampler_seed, classes=classes,
                               num_batches=cfg.epochs * steps_per_epoch, indices=pool)

    cache = cache if cache is not None else {}
    missing = [i for i in pool if i not in cache]
    if missing:
        cache.update(preprocess_records(manifest, missing, cfg.frame_duration, spec.spatial))

    if verbose:
        print(f"🌀 Training {task.value} model: {len(pool)} records, {cfg.epochs} epochs × {steps_per_epoch} steps")
    for epoch in range(cfg.epochs):
        losses = []
        for step_in_epoch in range(steps_per_epoch):
            picks = next(sampler)
            # draw id: position of the sample in the run-wide stream of sampled records
            first_draw = state.step * cfg.batch_size
            batch = [augment(cache[int(i)], augmentation, sample_rng(augmentation.seed, first_draw + slot))
                     for slot, i in enumerate(picks)]
            _, breakdown = train_step(state, batch, cfg, task, spec)
            losses.append(breakdown.total)
        state.epoch = epoch + 1
        if verbose:
            print(f"   ✨ epoch {epoch + 1}/{cfg.epochs} mean loss {np.mean(losses):.4f}")
    return state


def predict(params: ModelParams, spec: NetworkSpec, sequences: Sequence[VideoSequence],
            batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode class predictions and embeddings; sequences are preprocessed if needed."""
    if not sequences:
        return np.zeros(0, dtype=np.int64), np.zeros((0, spec.embedding_dim))
    target = (spec.frames, spec.spatial, spec.spatial)
    prepared = [s if s.frames.shape[:3] == target else preprocess_sequence(s, spec.frames, spec.spatial)
                for s in sequences]
    dtype = params["fc.weight"].dtype
    labels, embeddings = [], []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start:start + batch_size]
        embedding, logits = forward(Tensor(to_network_input(chunk, dtype=dtype)), spec, params, Mode.EVAL)
        labels.append(np.argmax(logits.data, axis=1))
        embeddings.append(embedding.data)
    return np.concatenate(labels).astype(np.int64), np.concatenate(embeddings)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_loss_history(history: Sequence[LossBreakdown], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "softmax", "center", "total"])
        for step, b in enumerate(history):
            writer.writerow([step, repr(b.softmax_loss), repr(b.center_loss), repr(b.total)])


def save_checkpoint(state: TrainState, cfg: OptimizerConfig, out_dir: Union[str, Path],
                    task: Optional[Union[Task, str]] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(state.params, out_dir / PARAMS_FILE, extra=state.centers.to_entries())
    sidecar = {"epoch": state.epoch, "step": state.step, "seed": cfg.seed, "config_hash": cfg.config_hash()}
    if task is not None:
        sidecar["task"] = Task(task).value
    with open(out_dir / CHECKPOINT_FILE, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    write_loss_history(state.history, out_dir / HISTORY_FILE)
    return out_dir


def load_checkpoint(out_dir: Union[str, Path], spec: NetworkSpec,
                    center_alpha: float = DEFAULT_CENTER_ALPHA) -> Tuple[ModelParams, ClassCenters, Dict]:
    out_dir = Path(out_dir)
    params = load_params(out_dir / PARAMS_FILE, spec)
    centers = load_centers(out_dir / PARAMS_FILE, center_alpha)
    with open(out_dir / CHECKPOINT_FILE, "r", encoding="utf-8") as f:
        meta = json.load(f)
    return params, centers, meta
