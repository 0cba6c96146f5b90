import struct

import numpy as np
import pytest
from scipy.special import expit

from loraudio import autodiff as ad
from loraudio.autodiff import Tensor
from loraudio.errors import BadMagic, ShapeMismatch, TruncatedFile, UnknownAdapterTarget, ValidationError
from loraudio.lora import AdapterSet, init_adapters
from loraudio.senet import (
    SENetConfig,
    build_model,
    checkpoint_bytes,
    forward,
    infer_config,
    load_checkpoint,
    save_checkpoint,
    score,
    se_block_forward,
    se_gate,
)

SMALL = SENetConfig(stem_channels=(4, 8, 8), se_reduction=2, blocks_per_sublayer=2)


def test_paper_defaults():
    cfg = SENetConfig()
    assert cfg.stem_kernels == (9, 7, 5)
    assert cfg.stem_channels == (128, 256, 512)
    shapes = cfg.shape_table()
    assert shapes["stem1.w"] == (128, 1, 9, 9)
    assert shapes["stem2.w"] == (256, 128, 7, 7)
    assert shapes["stem3.w"] == (512, 256, 5, 5)
    assert shapes["head.w"] == (2, 512)


def test_config_validation():
    with pytest.raises(ValidationError):
        SENetConfig(stem_channels=(8, 16))
    with pytest.raises(ValidationError):
        SENetConfig(stem_channels=(8, 12, 16), se_reduction=8)


def _count_by_formula(cfg: SENetConfig) -> int:
    total = 2 * cfg.feature_dims
    c_in = cfg.in_channels
    for c, k in zip(cfg.stem_channels, cfg.stem_kernels):
        h = c // cfg.se_reduction
        total += c * c_in * k * k + c
        total += cfg.blocks_per_sublayer * (2 * 9 * c * c + h * c + h + c * h + c)
        c_in = c
    return total + cfg.n_classes * c_in + cfg.n_classes


@pytest.mark.parametrize("cfg", [SENetConfig(), SMALL])
def test_parameter_count_audit(cfg):
    assert sum(int(np.prod(s)) for s in cfg.shape_table().values()) == _count_by_formula(cfg)


def test_build_counts_and_determinism():
    a, b = build_model(SMALL, 3), build_model(SMALL, 3)
    assert a.num_params() == _count_by_formula(SMALL)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(build_model(SMALL, 4))
    assert not np.any(a["stem1.b"].data) and not np.any(a["head.b"].data)


def _block(seed=0, c=4):
    cfg = SENetConfig(stem_channels=(c, c, c), se_reduction=2, blocks_per_sublayer=1)
    return build_model(cfg, seed)


def test_zero_gate_scales_by_half():
    m = _block()
    for part in ("fc1", "fc2"):
        m[f"sub1.block1.{part}.w"].data[:] = 0
        m[f"sub1.block1.{part}.b"].data[:] = 0
    gate = se_gate(m, "sub1.block1", Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3))))
    assert np.all(gate.data == 0.5)


def test_zero_branch_is_relu_of_skip():
    m = _block()
    m["sub1.block1.conv1.w"].data[:] = 0
    m["sub1.block1.conv2.w"].data[:] = 0
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(se_block_forward(Tensor(x), m, "sub1.block1").data, np.maximum(x, 0))


def _conv3x3_same(x, w):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(3):
        for j in range(3):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i : i + h, j : j + wd], w[:, :, i, j])
    return out


def test_se_block_matches_straight_line_oracle(f64):
    m = _block(seed=5)
    x = np.random.default_rng(2).standard_normal((2, 4, 3, 3))
    p = {k: m[f"sub1.block1.{k}"].data for k in ("conv1.w", "conv2.w", "fc1.w", "fc1.b", "fc2.w", "fc2.b")}
    y = np.maximum(_conv3x3_same(x, p["conv1.w"]), 0)
    y = _conv3x3_same(y, p["conv2.w"])
    pooled = y.mean(axis=(2, 3))
    gate = expit(np.maximum(pooled @ p["fc1.w"].T + p["fc1.b"], 0) @ p["fc2.w"].T + p["fc2.b"])
    ref = np.maximum(y * gate[:, :, None, None] + x, 0)
    np.testing.assert_allclose(se_block_forward(Tensor(x), m, "sub1.block1").data, ref, atol=1e-6)


def test_gate_is_per_channel_scalar_in_unit_interval():
    m = _block(seed=2)
    y = Tensor(np.random.default_rng(3).standard_normal((3, 4, 5, 5)))
    g = se_gate(m, "sub1.block1", y).data
    assert g.shape == (3, 4) and np.all((g > 0) & (g < 1))
    np.testing.assert_allclose(ad.channel_scale(y, Tensor(g)).data, y.data * g[:, :, None, None])


def test_block_shape_check():
    with pytest.raises(ShapeMismatch):
        se_block_forward(Tensor(np.zeros((1, 3, 4, 4))), _block(), "sub1.block1")


def _batch(n=2, seed=0, cfg=SMALL):
    return np.random.default_rng(seed).standard_normal((n, 1, 96, cfg.feature_dims)).astype(np.float32)


def test_forward_shapes_and_batch_of_64():
    m = build_model(SMALL, 0)
    with ad.no_grad():
        assert forward(m, _batch(64)).shape == (64, 2)
    with pytest.raises(ShapeMismatch):
        forward(m, np.zeros((2, 1, 96, 20), dtype=np.float32))


def test_zero_batch_gives_head_bias():
    m = build_model(SMALL, 0)
    m["head.b"].data[:] = [0.25, -1.5]
    out = forward(m, np.zeros((3, 1, 96, 60), dtype=np.float32))
    assert np.all(out.data == m["head.b"].data)


def test_empty_adapter_set_is_bitwise_identical():
    m = build_model(SMALL, 0)
    x = _batch()
    assert forward(m, x, AdapterSet("E")).data.tobytes() == forward(m, x).data.tobytes()
    assert forward(m, x).data.tobytes() == forward(m, x.copy()).data.tobytes()


def test_unknown_adapter_target_rejected():
    m = build_model(SMALL, 0)
    aset = init_adapters(m, ["head.w"], 1, 0)
    aset.pairs["nope.w"] = aset.pairs.pop("head.w")
    with pytest.raises(UnknownAdapterTarget):
        forward(m, _batch(), aset)


def test_score_convention():
    np.testing.assert_array_equal(score(np.array([[2.0, 2.0], [3.0, 1.0]])), [0, 2])
    z = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_allclose(score(z + 7.5), score(z))


def test_default_adapter_targets():
    targets = SMALL.default_adapter_targets()
    assert targets[:2] == ["stem1.w", "sub1.block1.fc1.w"] and targets[-1] == "head.w"
    assert not any(".conv" in t for t in targets)
    assert len(targets) == 3 + 3 * 2 * 2 + 1


def test_checkpoint_round_trip(tmp_path):
    m = build_model(SMALL, 1)
    m.fit_input_norm(_batch(4))
    size = save_checkpoint(m, tmp_path / "m.fadckpt")
    raw = (tmp_path / "m.fadckpt").read_bytes()
    assert size == len(raw) and raw[:8] == b"FADCKPT1"
    back = load_checkpoint(tmp_path / "m.fadckpt")
    assert back.cfg == SMALL
    assert checkpoint_bytes(back) == raw
    assert infer_config({n: t.shape for n, t in m.tensors.items()}) == SMALL


def test_checkpoint_layout_first_tensor(tmp_path):
    m = build_model(SMALL, 1)
    raw = checkpoint_bytes(m)
    version, count = struct.unpack("<II", raw[8:16])
    (name_len,) = struct.unpack("<H", raw[16:18])
    assert (version, count) == (1, len(m.tensors))
    assert raw[18 : 18 + name_len] == b"input.mean"
    assert raw[18 + name_len] == 1
    assert struct.unpack("<I", raw[19 + name_len : 23 + name_len]) == (60,)


def test_checkpoint_errors(tmp_path):
    raw = checkpoint_bytes(build_model(SMALL, 1))
    (tmp_path / "bad").write_bytes(b"FADLORA1" + raw[8:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "cut").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "cut")


def test_frozen_model_is_read_only():
    m = build_model(SMALL, 0)
    m.set_trainable(False)
    with pytest.raises(ValueError):
        m["stem1.w"].data[0] = 1.0
    assert not any(t.requires_grad for t in m.tensors.values())
