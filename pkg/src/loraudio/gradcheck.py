"""Randomized finite-difference cases for every operator and for the adapted model loss.

Each case builder takes a generator and returns ``(f, params)`` where ``f()``
rebuilds the scalar loss from the current parameter values. Run under
``precision("f64")``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lora import init_adapters
from .senet import SENetConfig, build_model, forward

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _param(rng, shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return Tensor(x, requires_grad=True)


def _weighted_sum(y: Tensor, rng) -> Callable[[Tensor], Tensor]:
    # a fixed random readout so every output element gets a distinct weight
    r = Tensor(rng.standard_normal(y.shape))
    return lambda out: ad.sum_all(ad.mul(out, r))


def _unary(op, shape, away=0.0):
    def build(rng) -> Case:
        x = _param(rng, shape, away)
        readout = _weighted_sum(op(x), rng)
        return (lambda: readout(op(x))), [x]

    return build


def _binary(op, shape_a, shape_b):
    def build(rng) -> Case:
        a, b = _param(rng, shape_a), _param(rng, shape_b)
        readout = _weighted_sum(op(a, b), rng)
        return (lambda: readout(op(a, b))), [a, b]

    return build


def _conv(rng) -> Case:
    x, w, b = _param(rng, (2, 3, 6, 5)), _param(rng, (4, 3, 3, 3)), _param(rng, (4,))
    op = lambda: ad.conv2d(x, w, b, stride=2, pad=1)
    readout = _weighted_sum(op(), rng)
    return (lambda: readout(op())), [x, w, b]


def _cross_entropy(rng) -> Case:
    logits = _param(rng, (5, 3))
    labels = rng.integers(0, 3, size=5)
    return (lambda: ad.softmax_cross_entropy(logits, labels)), [logits]


def _channel_scale(rng) -> Case:
    x, g = _param(rng, (2, 3, 4, 4)), Tensor(rng.uniform(0.1, 0.9, (2, 3)), requires_grad=True)
    readout = _weighted_sum(ad.channel_scale(x, g), rng)
    return (lambda: readout(ad.channel_scale(x, g))), [x, g]


OPERATOR_CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "add": _binary(ad.add, (3, 4), (3, 4)),
    "mul": _binary(ad.mul, (3, 4), (3, 4)),
    "add_bias": _binary(lambda x, b: ad.add_bias(x, b, axis=1), (2, 3, 2, 2), (3,)),
    "scale": _unary(lambda x: ad.scale(x, -1.7), (3, 4)),
    "relu": _unary(ad.relu, (4, 5), away=0.1),
    "sigmoid": _unary(ad.sigmoid, (4, 5)),
    "sum_all": _unary(lambda x: ad.scale(ad.sum_all(x), 0.5), (3, 3)),
    "reshape": _unary(lambda x: ad.reshape(x, (6, 2)), (3, 4)),
    "transpose": _unary(lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "flatten": _unary(ad.flatten, (2, 3, 2, 2)),
    "global_avg_pool": _unary(ad.global_avg_pool, (2, 3, 4, 5)),
    "im2col": _unary(lambda x: ad.im2col(x, 3, 2, stride=2, pad=1), (2, 2, 5, 4)),
    "conv2d": _conv,
    "channel_scale": _channel_scale,
    "softmax_cross_entropy": _cross_entropy,
}

TINY_MODEL = SENetConfig(feature_dims=6, stem_channels=(2, 4, 4), se_reduction=2, blocks_per_sublayer=1)


def adapted_loss_case(rng, cfg: SENetConfig = TINY_MODEL, rank: int = 2) -> Case:
    """Cross-entropy of the frozen base plus adapters, differentiated w.r.t. every A and B."""
    seed = int(rng.integers(2**31))
    model = build_model(cfg, seed)
    model.set_trainable(False)
    adapters = init_adapters(model, cfg.default_adapter_targets(), rank, seed, scaling=2.0, clamp_rank=True)
    for pair in adapters.pairs.values():
        # move off the zero-A init so B receives a gradient too
        pair.A.data[:] = rng.standard_normal(pair.A.shape) * 0.3
        pair.B.data[:] = rng.standard_normal(pair.B.shape) * 0.3
    x = rng.standard_normal((3, 1, 8, cfg.feature_dims))
    y = rng.integers(0, 2, size=3)
    return (lambda: ad.softmax_cross_entropy(forward(model, x, adapters), y)), adapters.parameters()


def check(builder, seed: int) -> float:
    with ad.precision("f64"):
        f, params = builder(np.random.default_rng(seed))
        return ad.finite_diff_check(f, params)
