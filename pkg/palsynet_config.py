#!/usr/bin/env python3
"""
⚙ PALSYNET CONFIG
Run configuration: one YAML (or JSON) document merged onto in-code defaults.

Unknown keys are rejected with their dotted names, so a typo never silently falls
back to a default. The single top-level `seed` feeds the optimiser, the synthetic
generator and augmentation; PALSY_SEED overrides it.
"""

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

from palsy_trainer import OptimizerConfig
from resnet3d_model import NetworkSpec
from synthetic_dataset import MANIFEST_NAME, SyntheticConfig
from videopipe import AugmentationConfig, Task

SEED_ENV = "PALSY_SEED"

DEFAULT_CONFIG: Dict = {
    "task": "motion",
    "seed": 0,
    "network": "desk",
    "spatial": 112,
    "dataset_dir": "data/synthetic",
    "output_dir": "runs/default",
    "workers": 1,
    "init_params": None,
    "optimizer": {
        "lr": 0.1,
        "weight_decay": 0.001,
        "momentum": 0.9,
        "epochs": 50,
        "batch_size": 8,
        "frame_duration": 8,
        "lam": 0.001,
        "center_alpha": 0.5,
        "freeze_policy": "last-stage-and-head",
        "freeze_bn_stats": False,
    },
    "augmentation": {
        "flip_prob": 0.5,
        "rotation_prob": 0.5,
        "max_rotation_deg": 10.0,
        "jitter_prob": 0.5,
        "max_jitter": 0.1,
    },
    "synthetic": {
        "subjects": 10,
        "palsy_subjects": 5,
        "frames": 24,
        "size": 128,
        "repetitions": 10,
        "motions": ["no_motion", "smile", "mouth_open", "other"],
        "motion_amplitude": 0.06,
        "noise": 0.01,
        "grade_layout": "per_subject",
    },
    "ablation": {
        "durations": [8, 12, 16],
        "loss_subjects": None,
        "record_wall_time": True,
    },
}

KEY_ALIASES = {"optimizer.lambda": "optimizer.lam"}


class ConfigError(ValueError):
    """The run configuration cannot be parsed or fails validation"""


@dataclass(frozen=True)
class AblationConfig:
    durations: Tuple[int, ...] = (8, 12, 16)
    loss_subjects: Optional[Tuple[str, ...]] = None
    record_wall_time: bool = True


@dataclass(frozen=True)
class RunConfig:
    task: Task
    seed: int
    network: str
    spatial: int
    dataset_dir: Path
    output_dir: Path
    workers: int
    init_params: Optional[Path]
    optimizer: OptimizerConfig
    augmentation: AugmentationConfig
    synthetic: SyntheticConfig
    ablation: AblationConfig

    @property
    def manifest_path(self) -> Path:
        return self.dataset_dir / MANIFEST_NAME

    def network_spec(self, frames: Optional[int] = None) -> NetworkSpec:
        return NetworkSpec.from_selector(self.network, self.task.num_classes,
                                         frames or self.optimizer.frame_duration, self.spatial)

    def require_inputs(self) -> None:
        """Input paths a training/evaluation command reads, checked before any compute."""
        if not self.manifest_path.exists():
            raise ConfigError(f"dataset manifest not found: {self.manifest_path}")
        if self.init_params is not None and not self.init_params.exists():
            raise ConfigError(f"init_params file not found: {self.init_params}")


def _merge(defaults: Dict, loaded: Dict, prefix: str, unknown: List[str]) -> Dict:
    merged = copy.deepcopy(defaults)
    for key, value in loaded.items():
        dotted = f"{prefix}{key}"
        dotted = KEY_ALIASES.get(dotted, dotted)
        key = dotted.rsplit(".", 1)[-1]
        if key not in defaults:
            unknown.append(dotted)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' must be a mapping, got {type(value).__name__}")
            merged[key] = _merge(defaults[key], value, f"{dotted}.", unknown)
        else:
            merged[key] = value
    return merged


def parse_config_text(text: str, source: str = "<config>") -> Dict:
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1} column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{source}: cannot parse configuration{where}: {getattr(e, 'problem', e)}") from e
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{source}: configuration must be a mapping, got {type(loaded).__name__}")
    return loaded


def merge_config(loaded: Dict) -> Dict:
    unknown: List[str] = []
    merged = _merge(DEFAULT_CONFIG, loaded, "", unknown)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    return merged


def _seed_from_env(seed) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return seed
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from e


def build_run_config(raw: Dict) -> RunConfig:
    try:
        seed = _seed_from_env(raw["seed"])
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        task = Task(raw["task"])
        NetworkSpec.from_selector(raw["network"], task.num_classes)
        optimizer = dict(raw["optimizer"])
        policy = optimizer["freeze_policy"]
        optimizer["freeze_policy"] = policy if isinstance(policy, str) else tuple(policy)
        ablation = raw["ablation"]
        subjects = ablation["loss_subjects"]
        workers = int(raw["workers"])
        if workers < 1:
            raise ConfigError(f"workers must be ≥ 1, got {workers}")
        return RunConfig(
            task=task,
            seed=seed,
            network=raw["network"],
            spatial=int(raw["spatial"]),
            dataset_dir=Path(raw["dataset_dir"]),
            output_dir=Path(raw["output_dir"]),
            workers=workers,
            init_params=Path(raw["init_params"]) if raw["init_params"] else None,
            optimizer=OptimizerConfig(seed=seed, **optimizer),
            augmentation=AugmentationConfig(seed=seed, **raw["augmentation"]),
            synthetic=SyntheticConfig(seed=seed, **{**raw["synthetic"], "motions": tuple(raw["synthetic"]["motions"])}),
            ablation=AblationConfig(tuple(int(d) for d in ablation["durations"]),
                                    tuple(str(s) for s in subjects) if subjects else None,
                                    bool(ablation["record_wall_time"])),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict] = None) -> RunConfig:
    """Defaults, then the file at `path`, then `overrides`, then PALSY_SEED."""
    loaded: Dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file not found: {path}")
        loaded = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    merged = merge_config(loaded)
    if overrides:
        unknown: List[str] = []
        merged = _merge(merged, overrides, "", unknown)
        if unknown:
            raise ConfigError(f"unknown override key(s): {', '.join(sorted(unknown))}")
    return build_run_config(merged)


def dump_default_config(path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(DEFAULT_CONFIG, f, default_flow_style=False, sort_keys=False)
