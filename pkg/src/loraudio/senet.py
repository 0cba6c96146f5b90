"""SE-ResNet style fake-audio classifier and its FADCKPT1 checkpoint format.

Layout: per-dimension input standardization (statistics fixed when the
source model is trained), three stride-2 stem convolutions (kernels 9, 7, 5)
each followed by a sub-layer of residual squeeze-and-excitation blocks, then
global average pooling and a linear 2-way head. Class 0 is bonafide.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadMagic, ShapeMismatch, UnknownAdapterTarget, ValidationError
from .io_utils import Reader, atomic_write_bytes, fingerprint, pack_name
from .lora import AdapterSet, adapted_conv2d, adapted_linear

MAGIC = b"FADCKPT1"
VERSION = 1
BONAFIDE = 0
SPOOF = 1


@dataclass(frozen=True)
class SENetConfig:
    in_channels: int = 1
    feature_dims: int = 60
    stem_channels: tuple[int, ...] = (128, 256, 512)
    stem_kernels: tuple[int, ...] = (9, 7, 5)
    blocks_per_sublayer: int = 3
    se_reduction: int = 16
    stem_stride: int = 2
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "stem_kernels", tuple(int(k) for k in self.stem_kernels))
        if len(self.stem_channels) != 3 or len(self.stem_kernels) != 3:
            raise ValidationError("stem_channels and stem_kernels must each list three values")
        if any(c % self.se_reduction for c in self.stem_channels):
            raise ValidationError(f"se_reduction {self.se_reduction} must divide every channel count {self.stem_channels}")
        if self.blocks_per_sublayer < 0 or self.stem_stride < 1 or self.in_channels < 1 or self.n_classes < 2 or self.feature_dims < 1:
            raise ValidationError("invalid SENet configuration")

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        """Ordered name -> shape table of every parameter."""
        shapes: dict[str, tuple[int, ...]] = {"input.mean": (self.feature_dims,), "input.std": (self.feature_dims,)}
        c_in = self.in_channels
        for i, (c, k) in enumerate(zip(self.stem_channels, self.stem_kernels), start=1):
            shapes[f"stem{i}.w"] = (c, c_in, k, k)
            shapes[f"stem{i}.b"] = (c,)
            hidden = c // self.se_reduction
            for j in range(1, self.blocks_per_sublayer + 1):
                p = f"sub{i}.block{j}"
                shapes[f"{p}.conv1.w"] = (c, c, 3, 3)
                shapes[f"{p}.conv2.w"] = (c, c, 3, 3)
                shapes[f"{p}.fc1.w"] = (hidden, c)
                shapes[f"{p}.fc1.b"] = (hidden,)
                shapes[f"{p}.fc2.w"] = (c, hidden)
                shapes[f"{p}.fc2.b"] = (c,)
            c_in = c
        shapes["head.w"] = (self.n_classes, c_in)
        shapes["head.b"] = (self.n_classes,)
        return shapes

    def default_adapter_targets(self) -> list[str]:
        """Every plain linear map: stem convs, SE gate layers, head."""
        return [n for n in self.shape_table() if n.endswith(".w") and ".conv" not in n]


@dataclass
class ModelParams:
    cfg: SENetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[Tensor]:
        """Trainable tensors; the input statistics are excluded."""
        return [t for n, t in self.tensors.items() if not n.startswith("input.")]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def adaptable(self) -> list[str]:
        return [n for n in self.tensors if n.endswith(".w")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {n: Tensor(t.data.copy(), t.requires_grad) for n, t in self.tensors.items()})

    def set_trainable(self, flag: bool) -> None:
        """Toggle gradients; frozen tensors are also made read-only."""
        for n, t in self.tensors.items():
            t.requires_grad = flag and not n.startswith("input.")
            t.grad = None
            t.data.flags.writeable = flag

    def fit_input_norm(self, x: np.ndarray, floor: float = 1e-3) -> None:
        """Set the input statistics from a feature batch shaped N x 1 x frames x dims."""
        dims = self.cfg.feature_dims
        flat = np.asarray(x, dtype=np.float64).reshape(-1, dims)
        self["input.mean"].data[:] = flat.mean(axis=0)
        self["input.std"].data[:] = np.maximum(flat.std(axis=0), floor)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def fingerprint(self) -> int:
        return fingerprint(checkpoint_bytes(self))


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# without normalization layers, damp the residual branch output and the head
# so initial logits stay near zero
_DAMPED = 0.1


def _init_gain(name: str) -> float:
    if name == "head.w":
        return _DAMPED
    if name.endswith("conv2.w"):
        return _DAMPED * np.sqrt(2.0)
    if name.endswith("fc2.w"):
        return 1.0
    return np.sqrt(2.0)


def build_model(cfg: SENetConfig = SENetConfig(), seed: int = 0) -> ModelParams:
    """Kaiming-uniform weights, zero biases, identity input statistics.

    Deterministic under ``seed``.
    """
    rng = np.random.default_rng(seed)
    dtype = ad.get_dtype()
    tensors = {}
    for name, shape in cfg.shape_table().items():
        if name == "input.std":
            arr = np.ones(shape)
        elif name.endswith(".b") or name == "input.mean":
            arr = np.zeros(shape)
        else:
            arr = _kaiming_uniform(rng, shape, int(np.prod(shape[1:])), _init_gain(name))
        trainable = not name.startswith("input.")
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=trainable)
    return ModelParams(cfg, tensors)


def _pair(adapters: AdapterSet | None, name: str):
    return adapters.pairs.get(name) if adapters is not None else None


def conv_layer(model: ModelParams, prefix: str, x: Tensor, stride: int, pad: int, adapters=None) -> Tensor:
    w = model[f"{prefix}.w"]
    b = model.tensors.get(f"{prefix}.b")
    pair = _pair(adapters, f"{prefix}.w")
    if pair is None:
        return ad.conv2d(x, w, b, stride, pad)
    return adapted_conv2d(x, w, b, pair, stride, pad)


def linear_layer(model: ModelParams, prefix: str, x: Tensor, adapters=None) -> Tensor:
    return adapted_linear(x, model[f"{prefix}.w"], _pair(adapters, f"{prefix}.w"), model.tensors.get(f"{prefix}.b"))


def se_gate(model: ModelParams, prefix: str, x: Tensor, adapters=None) -> Tensor:
    """Per-(sample, channel) gate in (0, 1) from globally pooled activations."""
    z = ad.relu(linear_layer(model, f"{prefix}.fc1", ad.global_avg_pool(x), adapters))
    return ad.sigmoid(linear_layer(model, f"{prefix}.fc2", z, adapters))


def se_block_forward(x: Tensor, model: ModelParams, prefix: str, adapters=None) -> Tensor:
    x = ad.as_tensor(x)
    c = model[f"{prefix}.conv1.w"].shape[0]
    if x.data.ndim != 4 or x.shape[1] != c:
        raise ShapeMismatch(f"{prefix}: expected N x {c} x H x W input, got {x.shape}")
    y = ad.relu(conv_layer(model, f"{prefix}.conv1", x, 1, 1, adapters))
    y = conv_layer(model, f"{prefix}.conv2", y, 1, 1, adapters)
    y = ad.channel_scale(y, se_gate(model, prefix, y, adapters))
    return ad.relu(ad.add(y, x))


def forward(model: ModelParams, batch, adapters: AdapterSet | None = None) -> Tensor:
    """Logits (N x n_classes) for a batch shaped N x 1 x frames x dims."""
    cfg = model.cfg
    raw = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if raw.ndim != 4 or raw.shape[1] != cfg.in_channels or raw.shape[3] != cfg.feature_dims:
        raise ShapeMismatch(f"forward expects N x {cfg.in_channels} x frames x {cfg.feature_dims}, got {raw.shape}")
    # constant preprocessing, no gradient to the input
    x = Tensor((raw - model["input.mean"].data) / model["input.std"].data, dtype=model["input.mean"].data.dtype)
    if adapters is not None:
        unknown = set(adapters.pairs) - set(model.adaptable())
        if unknown:
            raise UnknownAdapterTarget(f"adapter targets not in model: {sorted(unknown)}")
    for i, k in enumerate(cfg.stem_kernels, start=1):
        x = ad.relu(conv_layer(model, f"stem{i}", x, cfg.stem_stride, k // 2, adapters))
        for j in range(1, cfg.blocks_per_sublayer + 1):
            x = se_block_forward(x, model, f"sub{i}.block{j}", adapters)
    return linear_layer(model, "head", ad.global_avg_pool(x), adapters)


def score(logits) -> np.ndarray:
    """Detection score: bonafide logit minus spoof logit (higher = more genuine)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return z[:, BONAFIDE] - z[:, SPOOF]


# -- FADCKPT1 --------------------------------------------------------------


def checkpoint_bytes(model: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.tensors))]
    for name, t in model.tensors.items():
        parts.append(pack_name(name))
        parts.append(struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelParams, path) -> int:
    data = checkpoint_bytes(model)
    atomic_write_bytes(path, data)
    return len(data)


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    r = Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != MAGIC:
        raise BadMagic(f"{path}: not a FADCKPT1 checkpoint")
    version, count = r.unpack("II")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        name = r.name()
        rank = r.unpack("B")
        dims = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        size = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
    return out


def infer_config(shapes: dict[str, tuple[int, ...]], stem_stride: int = 2) -> SENetConfig:
    """Recover the architecture from a checkpoint's shape table."""
    try:
        stems = [shapes[f"stem{i}.w"] for i in (1, 2, 3)]
        blocks = sum(1 for n in shapes if n.startswith("sub1.block") and n.endswith(".conv1.w"))
        reduction = stems[0][0] // shapes["sub1.block1.fc1.w"][0] if blocks else 16
        cfg = SENetConfig(
            in_channels=stems[0][1],
            feature_dims=shapes["input.mean"][0],
            stem_channels=tuple(s[0] for s in stems),
            stem_kernels=tuple(s[2] for s in stems),
            blocks_per_sublayer=blocks,
            se_reduction=reduction,
            stem_stride=stem_stride,
            n_classes=shapes["head.w"][0],
        )
    except (KeyError, IndexError, ZeroDivisionError) as exc:
        raise ValidationError(f"checkpoint does not describe a SENet model: {exc}") from None
    if cfg.shape_table() != shapes:
        raise ValidationError("checkpoint tensors do not match the inferred SENet layout")
    return cfg


def load_checkpoint(path, stem_stride: int = 2) -> ModelParams:
    arrays = read_checkpoint_tensors(path)
    cfg = infer_config({n: a.shape for n, a in arrays.items()}, stem_stride)
    dtype = ad.get_dtype()
    return ModelParams(cfg, {n: Tensor(a.astype(dtype), requires_grad=not n.startswith("input.")) for n, a in arrays.items()})
