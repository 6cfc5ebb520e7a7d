"""Network builders, parameter containers and checkpoint files.

Both the edge-to-image generator and the segmenter are UNets: ``depth``
encoder stages of conv3x3 + instance norm + ReLU followed by 2x2 max
pooling, a bottleneck, and a mirrored decoder that upsamples (nearest 2x),
concatenates the matching skip and convolves back down. A 1x1 head maps to
the output channels. ``mini_unet`` uses one conv per stage instead of two.

Checkpoint layout (little-endian)::

    b"LBCK" | u32 version=1 | u32 count
    count x ( u32 name_len | name utf-8 | u8 dtype (0=f32) | u8 rank | rank x u64 dims | payload )
    u64 CRC-64/XZ of everything above

A JSON sidecar ``<path>.meta.json`` stores the ModelSpec, seed and epoch.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from lowbridge._backend import kernels
from lowbridge.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    instance_norm,
    pool_max2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)

__all__ = [
    "ModelSpec",
    "ParameterSet",
    "MODEL_REGISTRY",
    "register_model",
    "build_model",
    "model_forward",
    "forward_generator",
    "forward_segmenter",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "parse_checkpoint",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "ChecksumMismatchWarning",
]

MAGIC = b"LBCK"
VERSION = 1
DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "unet"
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    final_activation: str = "none"

    def __post_init__(self):
        if self.kind not in MODEL_REGISTRY:
            raise ValueError(f"unknown model kind {self.kind!r}; known: {sorted(MODEL_REGISTRY)}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.final_activation not in ("sigmoid", "none"):
            raise ValueError(f"final_activation must be 'sigmoid' or 'none', got {self.final_activation!r}")

    @classmethod
    def generator(cls, kind="unet", base_channels=16, depth=4) -> "ModelSpec":
        return cls(kind, 1, 1, base_channels, depth, "sigmoid")

    @classmethod
    def segmenter(cls, num_classes: int, kind="unet", base_channels=16, depth=4) -> "ModelSpec":
        return cls(kind, 1, num_classes, base_channels, depth, "none")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class ParameterSet:
    """Named parameter tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, spec: ModelSpec | None = None,
                 seed: int | None = None, epoch: int = 0):
        self._tensors: dict[str, Tensor] = {}
        for name in sorted(tensors or {}):
            self._tensors[name] = tensors[name]
        self.spec = spec
        self.seed = seed
        self.epoch = epoch
        self.checksum_ok = True

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def requires_grad_(self, flag: bool) -> "ParameterSet":
        for t in self._tensors.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "ParameterSet":
        dup = ParameterSet(
            {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=v.data.dtype) for k, v in self._tensors.items()},
            self.spec, self.seed, self.epoch,
        )
        return dup

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def digest(self) -> str:
        """Hex CRC-64 of the serialized parameters."""
        return f"{kernels.crc64(self.to_bytes()[:-8]):016x}"

    def metadata(self) -> dict:
        return {
            "spec": self.spec.to_dict() if self.spec else None,
            "seed": self.seed,
            "epoch": self.epoch,
        }


# ----------------------------------------------------------------------------
# architectures

MODEL_REGISTRY: dict[str, Callable[[ModelSpec], list]] = {}


def register_model(kind: str):
    """Register a layout function ``spec -> list of (stage, [(cin, cout), ...])``."""

    def wrap(fn):
        MODEL_REGISTRY[kind] = fn
        return fn

    return wrap


def _unet_stages(spec: ModelSpec, convs: int) -> list[tuple[str, list[tuple[int, int]]]]:
    chans = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
    stages = []
    cin = spec.in_channels
    for i in range(spec.depth):
        stages.append((f"enc{i}", [(cin, chans[i])] + [(chans[i], chans[i])] * (convs - 1)))
        cin = chans[i]
    stages.append(("mid", [(cin, chans[-1])] + [(chans[-1], chans[-1])] * (convs - 1)))
    for i in reversed(range(spec.depth)):
        stages.append((f"dec{i}", [(chans[i + 1] + chans[i], chans[i])] + [(chans[i], chans[i])] * (convs - 1)))
    return stages


@register_model("unet")
def _unet_layout(spec: ModelSpec):
    return _unet_stages(spec, convs=2)


@register_model("mini_unet")
def _mini_unet_layout(spec: ModelSpec):
    return _unet_stages(spec, convs=1)


def _init_params(spec: ModelSpec, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for stage, convs in MODEL_REGISTRY[spec.kind](spec):
        for j, (cin, cout) in enumerate(convs):
            std = np.sqrt(2.0 / (cin * 9))
            w = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
            tensors[f"{stage}.conv{j}.weight"] = Tensor(w, requires_grad=True)
            tensors[f"{stage}.norm{j}.gamma"] = Tensor(np.ones(cout, np.float32), requires_grad=True)
            tensors[f"{stage}.norm{j}.beta"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
    c0 = spec.base_channels
    hw = (rng.standard_normal((spec.out_channels, c0, 1, 1)) * np.sqrt(1.0 / c0)).astype(np.float32)
    tensors["head.weight"] = Tensor(hw, requires_grad=True)
    tensors["head.bias"] = Tensor(np.zeros(spec.out_channels, np.float32), requires_grad=True)
    return tensors


def _block(params: ParameterSet, stage: str, n_convs: int, x: Tensor) -> Tensor:
    for j in range(n_convs):
        x = conv2d(x, params[f"{stage}.conv{j}.weight"], None, 1, 1)
        x = instance_norm(x, params[f"{stage}.norm{j}.gamma"], params[f"{stage}.norm{j}.beta"])
        x = relu(x)
    return x


def model_forward(params: ParameterSet, x: Tensor) -> Tensor:
    """Run the network described by ``params.spec`` on an N,C,H,W batch."""
    spec = params.spec
    if spec is None:
        raise ValueError("parameter set carries no model spec")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4:
        raise ValueError(f"model input must be N,C,H,W; got dims {x.dims}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"model expects {spec.in_channels} input channel(s), got C={x.shape[1]}")
    f = 2 ** spec.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ValueError(f"input H={x.shape[2]}, W={x.shape[3]} must be divisible by 2^depth={f}")
    stages = MODEL_REGISTRY[spec.kind](spec)
    skips = []
    h = x
    for stage, convs in stages[: spec.depth]:
        h = _block(params, stage, len(convs), h)
        skips.append(h)
        h = pool_max2x2(h)
    stage, convs = stages[spec.depth]
    h = _block(params, stage, len(convs), h)
    for (stage, convs), skip in zip(stages[spec.depth + 1:], reversed(skips)):
        h = concat_channels(upsample_nearest2x(h), skip)
        h = _block(params, stage, len(convs), h)
    out = conv2d(h, params["head.weight"], params["head.bias"], 1, 0)
    if spec.final_activation == "sigmoid":
        out = sigmoid(out)
    return out


def build_model(spec: ModelSpec, seed: int):
    """He-initialised parameters for ``spec`` and the matching forward function."""
    params = ParameterSet(_init_params(spec, seed), spec=spec, seed=seed, epoch=0)
    return params, model_forward


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.ndim == 4 else Tensor(x.data.reshape((1,) * (4 - x.ndim) + x.shape), dtype=x.dtype)
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def forward_generator(params: ParameterSet, edges) -> Tensor:
    """Edge maps (H,W / N,H,W / N,1,H,W) -> generated images in [0, 1], N,1,H,W."""
    if params.spec is None or params.spec.final_activation != "sigmoid" or params.spec.out_channels != 1:
        raise ValueError("parameters do not describe a generator (1 output channel, sigmoid head)")
    return model_forward(params, _as_batch(edges))


def forward_segmenter(params: ParameterSet, images) -> Tensor:
    """Images -> raw logits N,n,H,W."""
    if params.spec is None or params.spec.final_activation != "none":
        raise ValueError("parameters do not describe a segmenter (logit head)")
    return model_forward(params, _as_batch(images))


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchWarning(UserWarning):
    pass


def checkpoint_bytes(params: ParameterSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", kernels.crc64(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> ParameterSet:
    """Decode checkpoint bytes. A CRC mismatch is reported as a warning, not an error."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i} name is not UTF-8") from exc
        dtype, rank = r.unpack("<BB", f"header of {name!r}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {dtype}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = Tensor(arr, requires_grad=True)
    (stored,) = r.unpack("<Q", "checksum")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checksum")
    params = ParameterSet(tensors)
    actual = kernels.crc64(buf[: r.pos - 8])
    if actual != stored:
        params.checksum_ok = False
        warnings.warn(
            f"checkpoint checksum mismatch: stored {stored:016x}, computed {actual:016x}",
            ChecksumMismatchWarning,
            stacklevel=3,
        )
    return params


def _meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def save_checkpoint(params: ParameterSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    _meta_path(path).write_text(json.dumps(params.metadata(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> ParameterSet:
    path = Path(path)
    params = parse_checkpoint(path.read_bytes())
    meta = _meta_path(path)
    if meta.exists():
        info = json.loads(meta.read_text())
        params.spec = ModelSpec.from_dict(info["spec"]) if info.get("spec") else None
        params.seed = info.get("seed")
        params.epoch = int(info.get("epoch") or 0)
    return params
