"""Tiny U-Net with instance normalisation, parameter groups and checkpoints.

Each stage is two (conv 3^3 -> instance norm -> leaky relu) blocks; the
encoder downsamples with a stride-2 first conv, the decoder projects with
a 1^3 conv, upsamples nearest-neighbour and concatenates the skip.
"""

import enum
import hashlib
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clopasim.autodiff import (
    ShapeError,
    Tensor,
    concat,
    conv3d,
    instance_norm,
    leaky_relu,
    softmax_channel,
    upsample_nearest,
)
from clopasim.util import atomic_write_bytes

CHECKPOINT_MAGIC = b"CLPA"
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ParamGroup(enum.IntEnum):
    INSTANCE_NORM = 0
    ENCODER_STAGE0_CONV = 1
    DECODER_LAST_STAGE_CONV = 2
    OTHER = 3


class ParamGroupMode(enum.Enum):
    FROZEN = "frozen"
    INSTANCE_NORM_ONLY = "clopa-in"
    INSTANCE_NORM_PLUS_SHALLOW_CONV = "clopa-cn"
    ALL = "all"

    @property
    def trainable_groups(self) -> frozenset[ParamGroup]:
        return _MODE_GROUPS[self]

    @classmethod
    def parse(cls, value: str) -> "ParamGroupMode":
        key = value.strip().lower().replace("_", "-").replace(".", "")
        mode = _MODE_ALIASES.get(key)
        if mode is None:
            raise ValueError(f"unknown parameter-group mode {value!r}")
        return mode


_MODE_GROUPS: dict[ParamGroupMode, frozenset[ParamGroup]] = {
    ParamGroupMode.FROZEN: frozenset(),
    ParamGroupMode.INSTANCE_NORM_ONLY: frozenset({ParamGroup.INSTANCE_NORM}),
    ParamGroupMode.INSTANCE_NORM_PLUS_SHALLOW_CONV: frozenset({
        ParamGroup.INSTANCE_NORM,
        ParamGroup.ENCODER_STAGE0_CONV,
        ParamGroup.DECODER_LAST_STAGE_CONV,
    }),
    ParamGroupMode.ALL: frozenset(ParamGroup),
}

_MODE_ALIASES: dict[str, ParamGroupMode] = {
    "frozen": ParamGroupMode.FROZEN,
    "zero-shot": ParamGroupMode.FROZEN,
    "clopa-in": ParamGroupMode.INSTANCE_NORM_ONLY,
    "in": ParamGroupMode.INSTANCE_NORM_ONLY,
    "instance-norm-only": ParamGroupMode.INSTANCE_NORM_ONLY,
    "clopa-cn": ParamGroupMode.INSTANCE_NORM_PLUS_SHALLOW_CONV,
    "cn": ParamGroupMode.INSTANCE_NORM_PLUS_SHALLOW_CONV,
    "instance-norm-plus-shallow-conv": ParamGroupMode.INSTANCE_NORM_PLUS_SHALLOW_CONV,
    "all": ParamGroupMode.ALL,
}


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 3
    base_channels: int = 8
    input_channels: int = 3
    output_channels: int = 2
    kernel_size: int = 3

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ModelConfigError(f"num_stages must be >= 2, got {self.num_stages}")
        if self.base_channels < 1:
            raise ModelConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels < 1 or self.output_channels < 2:
            raise ModelConfigError("need >= 1 input channel and >= 2 output channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ModelConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_stages - 1)

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage


def group_for(name: str) -> ParamGroup:
    parts = name.split(".")
    if "norm" in parts:
        return ParamGroup.INSTANCE_NORM
    if parts[0] == "head":
        return ParamGroup.DECODER_LAST_STAGE_CONV
    if parts[:2] == ["enc", "0"] and "conv" in parts:
        return ParamGroup.ENCODER_STAGE0_CONV
    # the last decoder stage is its upsampling conv plus both blocks
    if parts[:2] == ["dec", "0"]:
        return ParamGroup.DECODER_LAST_STAGE_CONV
    return ParamGroup.OTHER


class ParamStore:
    """Named parameter tensors, each tagged with exactly one group."""

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        self.entries: dict[str, Tensor] = {}
        self.groups: dict[str, ParamGroup] = {}

    def add(self, name: str, tensor: Tensor, group: ParamGroup | None = None) -> None:
        if name in self.entries:
            raise ModelConfigError(f"duplicate parameter name {name!r}")
        self.entries[name] = tensor
        self.groups[name] = group if group is not None else group_for(name)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def trainable_names(self) -> list[str]:
        return [name for name, t in self.entries.items() if t.requires_grad]

    def parameter_count(self, names: list[str] | None = None) -> int:
        selected = self.entries if names is None else names
        return sum(self.entries[name].size for name in selected)

    def zero_grad(self) -> None:
        for tensor in self.entries.values():
            tensor.zero_grad()

    def copy(self) -> "ParamStore":
        clone = ParamStore(self.cfg)
        for name, tensor in self.entries.items():
            clone.add(name, Tensor(tensor.data, requires_grad=tensor.requires_grad, dtype=tensor.data.dtype), self.groups[name])
        return clone

    # --- checkpoint bytes ---

    def to_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        for name, tensor in self.entries.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<BB", int(self.groups[name]), tensor.ndim))
            chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ParamStore":
        if payload[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        if len(payload) < 8:
            raise CheckpointError("truncated checkpoint header")
        (version,) = struct.unpack_from("<I", payload, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 8
        records: list[tuple[str, ParamGroup, np.ndarray]] = []
        try:
            while offset < len(payload):
                (name_len,) = struct.unpack_from("<I", payload, offset)
                offset += 4
                name = payload[offset:offset + name_len].decode("utf-8")
                offset += name_len
                tag, ndim = struct.unpack_from("<BB", payload, offset)
                offset += 2
                shape = struct.unpack_from(f"<{ndim}I", payload, offset)
                offset += 4 * ndim
                count = int(np.prod(shape))
                values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
                offset += 4 * count
                records.append((name, ParamGroup(tag), values.reshape(shape).astype(np.float32)))
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint record at byte {offset}: {exc}") from exc

        store = cls(_infer_config({name: values.shape for name, _, values in records}))
        for name, group, values in records:
            store.add(name, Tensor(values), group)
        return store

    def save(self, path: Path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _infer_config(shapes: dict[str, tuple[int, ...]]) -> ModelConfig:
    try:
        first = shapes["enc.0.block.0.conv.weight"]
        head = shapes["head.weight"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks parameter {exc}") from exc
    stages = {name.split(".")[1] for name in shapes if name.startswith("enc.")}
    return ModelConfig(
        num_stages=len(stages),
        base_channels=first[0],
        input_channels=first[1],
        output_channels=head[0],
        kernel_size=first[2],
    )


# --- construction ---


def _conv_params(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> tuple[Tensor, Tensor]:
    fan_in = c_in * k ** 3
    bound = np.sqrt(6.0 / fan_in)
    weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k)).astype(np.float32)
    return Tensor(weight), Tensor(np.zeros(c_out, dtype=np.float32))


def _add_block(store: ParamStore, rng: np.random.Generator, prefix: str, c_out: int, c_in: int) -> None:
    weight, bias = _conv_params(rng, c_out, c_in, store.cfg.kernel_size)
    store.add(f"{prefix}.conv.weight", weight)
    store.add(f"{prefix}.conv.bias", bias)
    store.add(f"{prefix}.norm.scale", Tensor(np.ones(c_out, dtype=np.float32)))
    store.add(f"{prefix}.norm.bias", Tensor(np.zeros(c_out, dtype=np.float32)))


def build_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """He-uniform conv kernels, zero conv biases, identity instance norms."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore(cfg)
    for stage in range(cfg.num_stages):
        c_out = cfg.stage_channels(stage)
        c_in = cfg.input_channels if stage == 0 else cfg.stage_channels(stage - 1)
        _add_block(store, rng, f"enc.{stage}.block.0", c_out, c_in)
        _add_block(store, rng, f"enc.{stage}.block.1", c_out, c_out)
    for stage in range(cfg.num_stages - 2, -1, -1):
        c_out = cfg.stage_channels(stage)
        c_deep = cfg.stage_channels(stage + 1)
        up_w = np.sqrt(6.0 / c_deep)
        store.add(f"dec.{stage}.up.weight", Tensor(rng.uniform(-up_w, up_w, size=(c_out, c_deep, 1, 1, 1)).astype(np.float32)))
        store.add(f"dec.{stage}.up.bias", Tensor(np.zeros(c_out, dtype=np.float32)))
        _add_block(store, rng, f"dec.{stage}.block.0", c_out, 2 * c_out)
        _add_block(store, rng, f"dec.{stage}.block.1", c_out, c_out)
    head_bound = np.sqrt(6.0 / cfg.base_channels)
    head = rng.uniform(-head_bound, head_bound, size=(cfg.output_channels, cfg.base_channels, 1, 1, 1))
    store.add("head.weight", Tensor(head.astype(np.float32)))
    store.add("head.bias", Tensor(np.zeros(cfg.output_channels, dtype=np.float32)))
    return store


# --- forward ---


def _block(store: ParamStore, prefix: str, x: Tensor, stride: int = 1) -> Tensor:
    pad = store.cfg.kernel_size // 2
    h = conv3d(x, store[f"{prefix}.conv.weight"], store[f"{prefix}.conv.bias"], stride=stride, pad=pad)
    h = instance_norm(h, store[f"{prefix}.norm.scale"], store[f"{prefix}.norm.bias"])
    return leaky_relu(h)


def forward_logits(store: ParamStore, x: Tensor) -> Tensor:
    cfg = store.cfg
    if x.ndim != 4 or x.shape[0] != cfg.input_channels:
        raise ShapeError("forward", f"expected [{cfg.input_channels},D,H,W], got {x.shape}")
    if any(extent % cfg.divisor for extent in x.shape[1:]):
        raise ShapeError("forward", f"extents {x.shape[1:]} not divisible by {cfg.divisor}")

    skips: list[Tensor] = []
    h = x
    for stage in range(cfg.num_stages):
        h = _block(store, f"enc.{stage}.block.0", h, stride=1 if stage == 0 else 2)
        h = _block(store, f"enc.{stage}.block.1", h)
        skips.append(h)
    for stage in range(cfg.num_stages - 2, -1, -1):
        # 1^3 projection before upsampling equals projection after it
        h = conv3d(h, store[f"dec.{stage}.up.weight"], store[f"dec.{stage}.up.bias"])
        h = upsample_nearest(h)
        h = concat([skips[stage], h])
        h = _block(store, f"dec.{stage}.block.0", h)
        h = _block(store, f"dec.{stage}.block.1", h)
    return conv3d(h, store["head.weight"], store["head.bias"])


def forward(store: ParamStore, x: Tensor) -> Tensor:
    """Per-voxel class probabilities [output_channels, D, H, W]."""
    return softmax_channel(forward_logits(store, x))


# --- freeze masks ---


def set_trainable(store: ParamStore, mode: ParamGroupMode) -> None:
    groups = mode.trainable_groups
    for name, tensor in store.items():
        tensor.requires_grad = store.groups[name] in groups
        if not tensor.requires_grad:
            tensor.grad = None


def trainable_fraction(store: ParamStore) -> float:
    total = store.parameter_count()
    if total == 0:
        return 0.0
    return store.parameter_count(store.trainable_names()) / total
