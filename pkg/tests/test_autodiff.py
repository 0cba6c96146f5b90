import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loraudio import autodiff as ad
from loraudio.autodiff import Tensor
from loraudio.errors import MissingGrad, NonScalarLoss, ShapeMismatch
from loraudio.gradcheck import OPERATOR_CASES, check


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0, 2])


def test_conv_of_ones_is_nine():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9


def _conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2), (3, 0)])
def test_conv_matches_direct_summation(f64, rng, stride, pad):
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, _conv_loops(x, w, b, stride, pad), atol=1e-12)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        ad.channel_scale(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3))))


def test_grad_of_square():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(ad.mul(x, x))
    assert x.grad == 6


def test_grad_of_relu_sum():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_non_participating_leaf_gets_zero():
    x, y = Tensor([1.0, 2.0], requires_grad=True), Tensor([5.0], requires_grad=True)
    ad.backward(ad.sum_all(x), [x, y])
    np.testing.assert_array_equal(y.grad, [0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLoss):
        ad.backward(ad.relu(x))


def test_shared_subexpression_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.sum_all(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_matmul_chain_against_finite_differences(f64, rng):
    a, b = Tensor(rng.standard_normal((3, 4)), requires_grad=True), Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.sum_all(ad.relu(ad.matmul(a, b))), [a, b]) <= 1e-6


def test_finite_diff_linear_and_quadratic(f64, rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    c = Tensor(rng.standard_normal(5))
    assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(x, c)), [x]) <= 1e-10
    assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul(x, x)), [x]) <= 1e-8


@pytest.mark.parametrize("name", sorted(OPERATOR_CASES))
def test_operator_gradients(name):
    for seed in range(3):
        assert check(OPERATOR_CASES[name], seed) <= 1e-5


def test_adam_zero_gradient_keeps_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    ad.adam_step([p], ad.AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_by_hand(f64):
    w = Tensor([1.0], requires_grad=True)
    w.grad = np.array([1.0])
    state = ad.adam_step([w], ad.AdamState())
    # m_hat = v_hat = 1 after bias correction
    assert state.t == 1
    assert w.data[0] == pytest.approx(1 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_two_steps_by_hand(f64):
    w = Tensor([0.0], requires_grad=True)
    state = ad.AdamState(lr=0.1)
    expected, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate([2.0, -1.0], start=1):
        w.grad = np.array([g])
        ad.adam_step([w], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert w.data[0] == pytest.approx(expected, abs=1e-14)


def test_adam_missing_grad():
    with pytest.raises(MissingGrad):
        ad.adam_step([Tensor([1.0], requires_grad=True)], ad.AdamState())


def test_adam_defaults():
    s = ad.AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (0.001, 0.9, 0.999, 1e-8)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=st.floats(-50, 50)), st.data())
def test_cross_entropy_properties(logits, data):
    labels = np.array(data.draw(st.lists(st.integers(0, logits.shape[1] - 1), min_size=logits.shape[0], max_size=logits.shape[0])))
    with ad.precision("f64"):
        p = ad.softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
        assert ad.softmax_cross_entropy(Tensor(logits), labels).item() >= 0


@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(3, 6)), elements=st.floats(-4, 4, width=32)))
def test_forward_is_bitwise_deterministic(x):
    w = np.linspace(-1, 1, x.shape[1] * 2 * 9, dtype=np.float32).reshape(2, x.shape[1], 3, 3)
    a = ad.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = ad.conv2d(Tensor(x.copy()), Tensor(w.copy()), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_precision_modes():
    before = ad.get_dtype()
    with ad.precision("f64"):
        assert Tensor([1.0]).data.dtype == np.float64
    with ad.precision("f32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert ad.get_dtype() == before
