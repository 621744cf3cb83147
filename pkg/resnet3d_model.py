#!/usr/bin/env python3
"""
🧠 RESNET-3D MODEL
Basic residual blocks and a ResNet-18-style 3D network for mouth-motion and
palsy-grade classification.

The network maps an N×C×T×H×W clip batch to a d-dimensional embedding (the
global-pooled final feature map) and n class logits. Parameters live in a flat,
named ModelParams collection with per-parameter trainable flags so transfer-style
freezing is a matter of flipping flags.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_core import (
    Mode,
    ShapeError,
    Tensor,
    FormatError,
    add,
    batchnorm3d,
    conv3d,
    global_avg_pool,
    linear,
    max_pool3d,
    read_tensor,
    relu,
    write_tensor,
)

PPAR_MAGIC = b"PPAR"
PPAR_VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")
CENTER_PREFIX = "center."

DEFAULT_FREEZE_POLICY = "last-stage-and-head"


class ParamFileError(ValueError):
    """A parameter file cannot be matched against the requested network"""


class UnknownStageError(ValueError):
    """A freeze policy names a stage the network does not have"""


@dataclass(frozen=True)
class BlockSpec:
    """Two 3×3×3 convolutions with a shortcut around them"""
    in_channels: int
    out_channels: int
    stride: Tuple[int, int, int] = (1, 1, 1)
    name: str = "block"

    @property
    def uses_projection(self) -> bool:
        return self.in_channels != self.out_channels or tuple(self.stride) != (1, 1, 1)


@dataclass(frozen=True)
class NetworkSpec:
    num_classes: int = 4
    frames: int = 8
    spatial: int = 112
    in_channels: int = 3
    stem_channels: int = 8
    stage_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    stage_widths: Tuple[int, ...] = (8, 16, 32, 64)
    stem_kernel: Tuple[int, int, int] = (3, 7, 7)
    stem_stride: Tuple[int, int, int] = (1, 2, 2)
    stem_padding: Tuple[int, int, int] = (1, 3, 3)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.stage_blocks) != len(self.stage_widths) or not self.stage_blocks:
            raise ValueError("stage_blocks and stage_widths must be non-empty and of equal length")
        if self.frames < 1 or self.spatial < 1:
            raise ValueError("frames and spatial size must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def stage_names(self) -> Tuple[str, ...]:
        return tuple(f"layer{i + 1}" for i in range(len(self.stage_widths)))

    def block_specs(self) -> List[BlockSpec]:
        blocks = []
        channels = self.stem_channels
        for stage_index, (count, width) in enumerate(zip(self.stage_blocks, self.stage_widths)):
            for block_index in range(count):
                first_downsample = block_index == 0 and stage_index > 0
                stride = (2, 2, 2) if first_downsample else (1, 1, 1)
                blocks.append(BlockSpec(channels, width, stride, f"layer{stage_index + 1}.{block_index}"))
                channels = width
        return blocks

    @classmethod
    def desk(cls, num_classes: int = 4, frames: int = 8, spatial: int = 112) -> "NetworkSpec":
        return cls(num_classes=num_classes, frames=frames, spatial=spatial)

    @classmethod
    def full(cls, num_classes: int = 4, frames: int = 8, spatial: int = 112) -> "NetworkSpec":
        return cls(num_classes=num_classes, frames=frames, spatial=spatial,
                   stem_channels=64, stage_widths=(64, 128, 256, 512))

    @classmethod
    def from_selector(cls, selector: str, num_classes: int, frames: int = 8, spatial: int = 112) -> "NetworkSpec":
        builders = {"desk": cls.desk, "full": cls.full}
        if selector not in builders:
            raise ValueError(f"unknown network selector {selector!r} (expected one of {sorted(builders)})")
        return builders[selector](num_classes=num_classes, frames=frames, spatial=spatial)

    def to_dict(self) -> Dict:
        return {
            "num_classes": self.num_classes,
            "frames": self.frames,
            "spatial": self.spatial,
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stage_blocks": list(self.stage_blocks),
            "stage_widths": list(self.stage_widths),
        }


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def param_group(name: str) -> str:
    """Stage a parameter belongs to: stem, layer1..layerN or fc."""
    return name.split(".", 1)[0]


class ModelParams:
    """Named parameter tensors plus per-parameter trainable flags.

    Running batch-norm statistics are stored alongside as buffers; they are never
    trainable and never receive gradients.
    """

    def __init__(self, tensors: "OrderedDict[str, Tensor]", trainable: Optional[Dict[str, bool]] = None):
        self._tensors = OrderedDict(tensors)
        flags = {name: not is_buffer(name) for name in self._tensors}
        if trainable:
            for name, flag in trainable.items():
                if name not in self._tensors:
                    raise KeyError(f"unknown parameter {name!r}")
                flags[name] = bool(flag) and not is_buffer(name)
        self._trainable = flags

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def learnable_items(self):
        return [(name, t) for name, t in self._tensors.items() if not is_buffer(name)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_flags(self) -> Dict[str, bool]:
        return dict(self._trainable)

    def with_trainable(self, flags: Dict[str, bool]) -> "ModelParams":
        return ModelParams(self._tensors, flags)

    def sync_requires_grad(self) -> None:
        """Only trainable parameters take part in the gradient tape."""
        for name, t in self._tensors.items():
            t.requires_grad = self._trainable[name]

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        tensors = OrderedDict((name, Tensor(t.data.copy(), name=name)) for name, t in self._tensors.items())
        return ModelParams(tensors, self._trainable)

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.learnable_items())


def expected_shapes(spec: NetworkSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def bn(prefix: str, channels: int):
        shapes[f"{prefix}.scale"] = (channels,)
        shapes[f"{prefix}.shift"] = (channels,)
        shapes[f"{prefix}.running_mean"] = (channels,)
        shapes[f"{prefix}.running_var"] = (channels,)

    shapes["stem.conv.weight"] = (spec.stem_channels, spec.in_channels) + tuple(spec.stem_kernel)
    bn("stem.bn", spec.stem_channels)
    for block in spec.block_specs():
        shapes[f"{block.name}.conv1.weight"] = (block.out_channels, block.in_channels, 3, 3, 3)
        bn(f"{block.name}.bn1", block.out_channels)
        shapes[f"{block.name}.conv2.weight"] = (block.out_channels, block.out_channels, 3, 3, 3)
        bn(f"{block.name}.bn2", block.out_channels)
        if block.uses_projection:
            shapes[f"{block.name}.shortcut.conv.weight"] = (block.out_channels, block.in_channels, 1, 1, 1)
            bn(f"{block.name}.shortcut.bn", block.out_channels)
    shapes["fc.weight"] = (spec.embedding_dim, spec.num_classes)
    shapes["fc.bias"] = (spec.num_classes,)
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(shape)) for name, shape in expected_shapes(spec).items() if not is_buffer(name))


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Kaiming fan-out normal convolutions, unit/zero batch norm, zero head bias."""
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in expected_shapes(spec).items():
        if name.endswith(".weight") and len(shape) == 5:
            fan_out = shape[0] * shape[2] * shape[3] * shape[4]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)
        elif name == "fc.weight":
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith((".scale", ".running_var")):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value.astype(dtype), name=name)
    return ModelParams(tensors)


def _bn(x: Tensor, params: ModelParams, prefix: str, spec: NetworkSpec, mode: Mode, update_stats: bool) -> Tensor:
    return batchnorm3d(
        x, params[f"{prefix}.scale"], params[f"{prefix}.shift"],
        eps=spec.bn_eps, mode=mode,
        running_mean=params[f"{prefix}.running_mean"], running_var=params[f"{prefix}.running_var"],
        momentum=spec.bn_momentum, update_stats=update_stats,
    )


def basic_block_forward(x: Tensor, block: BlockSpec, params: ModelParams, mode: Union[Mode, str] = Mode.EVAL,
                        spec: Optional[NetworkSpec] = None, update_stats: bool = True) -> Tensor:
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))"""
    mode = Mode(mode)
    spec = spec or NetworkSpec()
    if x.ndim != 5 or x.shape[1] != block.in_channels:
        raise ShapeError(f"{block.name}: expected {block.in_channels} input channels, got shape {x.shape}")

    branch = conv3d(x, params[f"{block.name}.conv1.weight"], stride=block.stride, padding=1)
    branch = relu(_bn(branch, params, f"{block.name}.bn1", spec, mode, update_stats))
    branch = conv3d(branch, params[f"{block.name}.conv2.weight"], stride=1, padding=1)
    branch = _bn(branch, params, f"{block.name}.bn2", spec, mode, update_stats)

    if block.uses_projection:
        shortcut = conv3d(x, params[f"{block.name}.shortcut.conv.weight"], stride=block.stride, padding=0)
        shortcut = _bn(shortcut, params, f"{block.name}.shortcut.bn", spec, mode, update_stats)
    else:
        shortcut = x
    return relu(add(branch, shortcut))


def forward(seq_batch: Union[Tensor, np.ndarray], spec: NetworkSpec, params: ModelParams,
            mode: Union[Mode, str] = Mode.EVAL, update_stats: bool = True) -> Tuple[Tensor, Tensor]:
    """Clip batch N×C×T×H×W → (embedding N×d, logits N×n)."""
    mode = Mode(mode)
    x = seq_batch if isinstance(seq_batch, Tensor) else Tensor(seq_batch)
    expected = (spec.in_channels, spec.frames, spec.spatial, spec.spatial)
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"network expects N×{'×'.join(map(str, expected))} input, got {x.shape}")

    h = conv3d(x, params["stem.conv.weight"], stride=spec.stem_stride, padding=spec.stem_padding)
    h = relu(_bn(h, params, "stem.bn", spec, mode, update_stats))
    h = max_pool3d(h, kernel=3, stride=2, padding=1)
    for block in spec.block_specs():
        h = basic_block_forward(h, block, params, mode, spec, update_stats)
    embedding = global_avg_pool(h)
    logits = linear(embedding, params["fc.weight"], params["fc.bias"])
    return embedding, logits


def freeze_layers(params: ModelParams, policy: Union[str, Sequence[str]] = DEFAULT_FREEZE_POLICY) -> ModelParams:
    """Return params whose trainable flags follow the policy.

    "last-stage-and-head" keeps the final residual stage and the linear head
    trainable; "none" freezes nothing; a list names the groups to keep trainable.
    """
    groups = OrderedDict((param_group(name), None) for name in params.names())
    stages = [g for g in groups if g.startswith("layer")]
    if policy == DEFAULT_FREEZE_POLICY:
        if not stages:
            raise UnknownStageError("network has no residual stages to keep trainable")
        keep = {stages[-1], "fc"}
    elif policy == "none":
        keep = set(groups)
    else:
        if isinstance(policy, str):
            raise UnknownStageError(f"unknown freeze policy {policy!r}")
        keep = set(policy)
        unknown = sorted(keep.difference(groups))
        if unknown:
            raise UnknownStageError(f"freeze policy names unknown stage(s): {', '.join(unknown)}")
    return params.with_trainable({name: param_group(name) in keep for name in params.names()})


# ---------------------------------------------------------------------------
# PPAR parameter files
# ---------------------------------------------------------------------------

def write_param_file(path: Union[str, Path], entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    entries = list(entries)
    with open(path, "wb") as fh:
        fh.write(PPAR_MAGIC)
        fh.write(struct.pack("<BI", PPAR_VERSION, len(entries)))
        for name, value in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, value)


def read_param_file(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PPAR_MAGIC:
            raise FormatError(f"{path}: bad parameter file magic {magic!r}")
        header = fh.read(5)
        if len(header) != 5:
            raise FormatError(f"{path}: truncated parameter file header")
        version, count = struct.unpack("<BI", header)
        if version != PPAR_VERSION:
            raise ParamFileError(f"{path}: parameter file version {version}, expected {PPAR_VERSION}")
        for _ in range(count):
            raw = fh.read(2)
            if len(raw) != 2:
                raise FormatError(f"{path}: truncated entry header")
            (length,) = struct.unpack("<H", raw)
            raw_name = fh.read(length)
            if len(raw_name) != length:
                raise FormatError(f"{path}: truncated entry name ({len(raw_name)} of {length} bytes)")
            try:
                name = raw_name.decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"{path}: entry name is not UTF-8") from e
            entries[name] = read_tensor(fh)
    return entries


def save_params(params: ModelParams, path: Union[str, Path],
                extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write every parameter and buffer, then any extra entries (class centers)."""
    entries = [(name, t.data) for name, t in params.items()]
    entries.extend((extra or {}).items())
    write_param_file(path, entries)


def load_params(path: Union[str, Path], spec: NetworkSpec) -> ModelParams:
    entries = read_param_file(path)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in expected_shapes(spec).items():
        if name not in entries:
            raise ParamFileError(f"{path}: missing parameter '{name}'")
        if tuple(entries[name].shape) != tuple(shape):
            raise ParamFileError(f"{path}: parameter '{name}' has shape {entries[name].shape}, expected {shape}")
        tensors[name] = Tensor(entries[name], name=name)
    unexpected = [n for n in entries if n not in tensors and not n.startswith(CENTER_PREFIX)]
    if unexpected:
        raise ParamFileError(f"{path}: unexpected parameter '{unexpected[0]}'")
    return ModelParams(tensors)
