"""Low-rank adapter pairs, the summed-branch forward, merging and the FADLORA1 file.

A pair (A, B) attached to a frozen weight W changes the layer's action to
``h = W x + s * A (B x)``. Convolution kernels take part through their
``C_out x (C_in*kh*kw)`` matrix view, so the same algebra applies to the
patch matrix produced by im2col.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadMagic, FingerprintMismatch, RankTooLarge, ShapeMismatch, UnknownAdapterTarget, ValidationError
from .io_utils import Reader, atomic_write_bytes, pack_name

MAGIC = b"FADLORA1"
VERSION = 1
B_INIT_STD = 0.01


@dataclass
class LoraPair:
    target: str
    A: Tensor  # d_out x r
    B: Tensor  # r x d_in
    scaling: float = 1.0

    def __post_init__(self):
        a, b = self.A.shape, self.B.shape
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeMismatch(f"{self.target}: A {a} and B {b} do not form a low-rank pair")
        # stored as f32 on disk
        self.scaling = float(np.float32(self.scaling))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.A.data @ self.B.data)


@dataclass
class AdapterSet:
    tag: str
    pairs: dict[str, LoraPair] = field(default_factory=dict)
    base_fingerprint: int = 0

    def parameters(self) -> list[Tensor]:
        out = []
        for pair in self.pairs.values():
            out += [pair.A, pair.B]
        return out

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __len__(self) -> int:
        return len(self.pairs)


def conv_as_matrix(kernel: np.ndarray) -> np.ndarray:
    if kernel.ndim != 4:
        raise ShapeMismatch(f"conv_as_matrix expects a rank-4 kernel, got shape {kernel.shape}")
    return kernel.reshape(kernel.shape[0], -1)


def matrix_as_conv(matrix: np.ndarray, kernel_shape) -> np.ndarray:
    return matrix.reshape(kernel_shape)


def matrix_shape(weight_shape) -> tuple[int, int]:
    """(d_out, d_in) of the matrix view of a linear or conv weight."""
    return int(weight_shape[0]), int(np.prod(weight_shape[1:]))


def init_adapters(
    model,
    targets: Iterable[str],
    rank: int,
    seed: int,
    scaling: float = 1.0,
    clamp_rank: bool = False,
    paper_literal_init: bool = False,
    tag: str = "",
) -> AdapterSet:
    """Fresh adapters with A = 0 and B ~ N(0, 0.01^2), so A @ B = 0 at start.

    ``clamp_rank`` lowers the rank of any target whose matrix view is too
    narrow (e.g. a 2-class head) instead of raising RankTooLarge.
    ``paper_literal_init`` zeroes B as well; that point is a fixed point of
    gradient descent and the adapters never move.
    """
    if rank < 1:
        raise RankTooLarge(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    dtype = ad.get_dtype()
    pairs = {}
    for name in targets:
        if name not in model.adaptable():
            raise UnknownAdapterTarget(f"{name!r} is not an adaptable weight of the base model")
        d_out, d_in = matrix_shape(model[name].shape)
        r = rank
        if r > min(d_out, d_in):
            if not clamp_rank:
                raise RankTooLarge(f"rank {rank} exceeds min({d_out}, {d_in}) for {name}")
            r = min(d_out, d_in)
        a = np.zeros((d_out, r), dtype=dtype)
        b = rng.normal(0.0, B_INIT_STD, size=(r, d_in)).astype(dtype)
        if paper_literal_init:
            b[:] = 0
        pairs[name] = LoraPair(name, Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), scaling)
    return AdapterSet(tag, pairs, model.fingerprint())


def _low_rank_rows(x_rows: Tensor, pair: LoraPair) -> Tensor:
    # row-batch form of s * A (B x)
    return ad.scale(ad.matmul(ad.matmul(x_rows, ad.transpose(pair.B)), ad.transpose(pair.A)), pair.scaling)


def _check_pair(pair: LoraPair, weight_shape) -> None:
    if (pair.d_out, pair.d_in) != matrix_shape(weight_shape):
        raise ShapeMismatch(f"{pair.target}: pair {(pair.d_out, pair.d_in)} does not fit weight {tuple(weight_shape)}")


def adapted_linear(x: Tensor, w: Tensor, pair: LoraPair | None, b: Tensor | None = None) -> Tensor:
    """Row-batch linear layer ``x W^T (+ s x B^T A^T) (+ b)``."""
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    h = ad.matmul(x, ad.transpose(w))
    if pair is not None:
        _check_pair(pair, w.shape)
        h = ad.add(h, _low_rank_rows(x, pair))
    return h if b is None else ad.add_bias(h, b)


def adapted_forward(w, pair: LoraPair, x) -> Tensor:
    """``W x + s A (B x)`` for a single vector or a batch of row vectors."""
    w, x = ad.as_tensor(w), ad.as_tensor(x)
    if x.data.ndim == 1:
        return ad.reshape(adapted_linear(ad.reshape(x, (1, -1)), w, pair), (-1,))
    return adapted_linear(x, w, pair)


def adapted_conv2d(x: Tensor, w: Tensor, b: Tensor | None, pair: LoraPair | None, stride: int, pad: int) -> Tensor:
    """Convolution whose kernel matrix view acts as ``W_mat cols + s A (B cols)``."""
    x, w = ad.as_tensor(x), ad.as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    c_out, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho, wo = ad.conv_output_size(h, kh, stride, pad), ad.conv_output_size(wd, kw, stride, pad)
    cols = ad.im2col(x, kh, kw, stride, pad)
    y = ad.matmul(ad.reshape(w, (c_out, -1)), cols)
    if pair is not None:
        _check_pair(pair, w.shape)
        y = ad.add(y, ad.scale(ad.matmul(pair.A, ad.matmul(pair.B, cols)), pair.scaling))
    y = ad.cols_to_nchw(y, n, ho, wo)
    return y if b is None else ad.add_bias(y, b, axis=1)


def merge(w: np.ndarray, pair: LoraPair) -> np.ndarray:
    """Fold the adapter into the weight: ``W + s A B`` (conv kernels via their matrix view)."""
    w = np.asarray(w)
    _check_pair(pair, w.shape)
    return (w.reshape(pair.d_out, pair.d_in) + pair.delta()).astype(w.dtype).reshape(w.shape)


def merge_into(model, adapters: AdapterSet):
    """A standalone copy of ``model`` with every pair folded into its target."""
    merged = model.copy()
    for name, pair in adapters.pairs.items():
        merged[name].data = merge(model[name].data, pair)
    return merged


# -- FADLORA1 --------------------------------------------------------------


def adapter_bytes(aset: AdapterSet) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", VERSION, aset.base_fingerprint, len(aset.pairs))]
    for name, pair in aset.pairs.items():
        parts.append(pack_name(name))
        parts.append(struct.pack("<If", pair.rank, pair.scaling))
        parts.append(np.ascontiguousarray(pair.A.data, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(pair.B.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_adapters(aset: AdapterSet, path) -> int:
    data = adapter_bytes(aset)
    atomic_write_bytes(path, data)
    return len(data)


def read_adapter_header(path) -> tuple[int, int]:
    """(version, base_fingerprint) without needing the base model."""
    r = Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != MAGIC:
        raise BadMagic(f"{path}: not a FADLORA1 adapter file")
    version, fp, _ = r.unpack("IQI")
    return version, fp


def load_adapters(path, expected_base, tag: str | None = None) -> AdapterSet:
    """Read an adapter file; the fingerprint must match ``expected_base``.

    The file stores only ranks, so pair shapes come from the base model's
    target weights.
    """
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    if r.take(8) != MAGIC:
        raise BadMagic(f"{path}: not a FADLORA1 adapter file")
    version, fp, count = r.unpack("IQI")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported adapter version {version}")
    expected = expected_base.fingerprint()
    if fp != expected:
        raise FingerprintMismatch(f"{path}: adapters were trained against base {fp:016x}, loaded base is {expected:016x}")
    dtype = ad.get_dtype()
    pairs = {}
    for _ in range(count):
        name = r.name()
        if name not in expected_base.adaptable():
            raise UnknownAdapterTarget(f"{path}: target {name!r} not in base model")
        rank, scaling = r.unpack("If")
        d_out, d_in = matrix_shape(expected_base[name].shape)
        a = np.frombuffer(r.take(4 * d_out * rank), dtype="<f4").reshape(d_out, rank).astype(dtype)
        b = np.frombuffer(r.take(4 * rank * d_in), dtype="<f4").reshape(rank, d_in).astype(dtype)
        pairs[name] = LoraPair(name, Tensor(a), Tensor(b), float(scaling))
    return AdapterSet(tag if tag is not None else path.stem, pairs, fp)
