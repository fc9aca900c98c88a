import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naturalize import functional as F
from naturalize.errors import ContractError, DegenerateBatchError, DimensionError
from naturalize.optim import AdamState, adam_step
from naturalize.tensor import Tape, Tensor

from gradcheck import check_gradients, numeric_grad, rel_error


def _bn_train(x, g, b):
    c = x.shape[1]
    rm, rv = Tensor(np.zeros(c)), Tensor(np.ones(c))
    return F.batch_norm(x, g, b, rm, rv, train=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    rm = Tensor(np.linspace(-0.3, 0.2, c))
    rv = Tensor(np.linspace(0.5, 2.0, c))
    return F.batch_norm(x, g, b, rm, rv, train=False)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 5)).astype(np.float32)
    w = Tensor(np.ones((1, 1, 1, 1), np.float32))
    for c in range(3):
        out = F.conv2d(Tensor(x[c : c + 1]), w, Tensor(np.zeros(1, np.float32)), 1, 0)
        np.testing.assert_array_equal(out.data, x[c : c + 1])


def test_conv_all_ones_on_constant():
    c = 2.5
    x = Tensor(np.full((1, 6, 6), c))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1)
    assert out.shape == (1, 6, 6)
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * c)
    assert out.data[0, 0, 0] == pytest.approx(4 * c)


def test_conv_gradients_fd():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    err = check_gradients(lambda x, w, b: F.conv2d(x, w, b, 1, 1), [x, w, b], rng)
    assert err < 1e-4


def test_conv_shape_errors_name_axes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError, match="input channels"):
        F.conv2d(x, Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(DimensionError, match="odd"):
        F.conv2d(x, Tensor(np.zeros((3, 2, 2, 2))))
    with pytest.raises(DimensionError, match="H"):
        F.conv2d(Tensor(np.zeros((1, 2, 1, 8))), Tensor(np.zeros((3, 2, 3, 3))))


def test_conv_stride2_shape():
    out = F.conv2d(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((16, 3, 3, 3))), None, stride=2, padding=1)
    assert out.shape == (1, 16, 32, 32)


# ---------------------------------------------------------------- conv2d_transpose


def test_tconv_identity_kernel():
    x = np.random.default_rng(2).standard_normal((1, 1, 4, 4))
    out = F.conv2d_transpose(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_tconv_stride2_shape():
    out = F.conv2d_transpose(Tensor(np.zeros((128, 8, 8), np.float32)), Tensor(np.zeros((128, 64, 3, 3), np.float32)), None, 2, 1)
    assert out.shape == (64, 16, 16)


@pytest.mark.parametrize("stride", [1, 2])
def test_tconv_equals_conv_input_gradient(stride):
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    w = rng.standard_normal((4, 3, 3, 3))
    with Tape() as tape:
        y = F.conv2d(x, Tensor(w), None, stride, 1)
        g = rng.standard_normal(y.shape)
        loss = (y * Tensor(g)).sum()
    tape.backward(loss)
    adj = F.conv2d_transpose(Tensor(g), Tensor(w), None, stride, 1, output_padding=stride - 1)
    np.testing.assert_allclose(adj.data, x.grad, rtol=1e-12, atol=1e-12)


def test_tconv_adjoint_inner_product():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((5, 3, 3, 3))
        y = rng.standard_normal((2, 5, 4, 4))
        lhs = np.sum(F.conv2d(Tensor(x), Tensor(w), None, 2, 1).data * y)
        rhs = np.sum(x * F.conv2d_transpose(Tensor(y), Tensor(w), None, 2, 1).data)
        assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(lhs))


def test_tconv_gradients_fd():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(3)
    err = check_gradients(lambda x, w, b: F.conv2d_transpose(x, w, b, 2, 1), [x, w, b], rng)
    assert err < 1e-4


# ---------------------------------------------------------------- pixel shuffle


def test_pixel_shuffle_shape_and_order():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = np.zeros((4, 2, 2))
    x[:, 0, 0] = [a, b, c, d]
    out = F.pixel_shuffle(Tensor(x), 2)
    assert out.shape == (1, 4, 4)
    np.testing.assert_array_equal(out.data[0, :2, :2], [[a, b], [c, d]])


def test_pixel_shuffle_index_map_brute_force():
    rng = np.random.default_rng(6)
    r, c, h, w = 3, 2, 2, 3
    x = rng.standard_normal((c * r * r, h, w))
    out = F.pixel_shuffle(Tensor(x), r).data
    for ch in range(c):
        for y in range(h):
            for xx in range(w):
                for dy in range(r):
                    for dx in range(r):
                        assert out[ch, y * r + dy, xx * r + dx] == x[ch * r * r + dy * r + dx, y, xx]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pixel_shuffle_bijection(r, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, c * r * r, h, w)).astype(np.float32)
    back = F.pixel_unshuffle(F.pixel_shuffle(Tensor(x), r), r)
    assert np.array_equal(back.data, x)


def test_pixel_shuffle_indivisible():
    with pytest.raises(DimensionError):
        F.pixel_shuffle(Tensor(np.zeros((6, 2, 2))), 2)


# ---------------------------------------------------------------- pooling


def test_avg_pool_values_and_grad():
    c = Tensor(np.full((2, 4, 4), 3.0))
    np.testing.assert_array_equal(F.avg_pool2(c).data, np.full((2, 2, 2), 3.0))
    block = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert F.avg_pool2(block).data.item() == 2.5
    x = Tensor(np.random.default_rng(7).standard_normal((1, 3, 4, 6)), requires_grad=True)
    with Tape() as tape:
        loss = F.avg_pool2(x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 0.25))


def test_avg_pool_odd_rejected():
    with pytest.raises(DimensionError):
        F.avg_pool2(Tensor(np.zeros((1, 3, 4))))


# ---------------------------------------------------------------- batch norm


def test_batch_norm_identity_on_standardized():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn_train(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batch_norm_gamma_zero_beta_five():
    x = Tensor(np.random.default_rng(9).standard_normal((3, 2, 4, 4)))
    for fn in (_bn_train, _bn_eval):
        out = fn(x, Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)))
        np.testing.assert_array_equal(out.data, np.full(x.shape, 5.0))


def test_batch_norm_train_statistics():
    x = Tensor(np.random.default_rng(10).normal(3.0, 7.0, (8, 3, 6, 6)))
    out = _bn_train(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-4)


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(11).normal(2.0, 3.0, (4, 2, 3, 3))
    rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
    F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, train=True)
    m = x.shape[0] * 9
    np.testing.assert_allclose(rm.data, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv.data, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    before = (rm.data.copy(), rv.data.copy())
    F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, train=False)
    assert np.array_equal(rm.data, before[0]) and np.array_equal(rv.data, before[1])


def test_batch_norm_degenerate():
    with pytest.raises(DegenerateBatchError):
        _bn_train(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("fn", [_bn_train, _bn_eval])
def test_batch_norm_gradients_fd(fn):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal(2)
    b = rng.standard_normal(2)
    assert check_gradients(fn, [x, g, b], rng) < 1e-4


# ---------------------------------------------------------------- elu, mse


def test_elu_values():
    assert F.elu(Tensor(0.0)).item() == 0.0
    assert F.elu(Tensor(1.0)).item() == 1.0
    assert F.elu(Tensor(-1.0, dtype=np.float64)).item() == pytest.approx(math.exp(-1) - 1, abs=1e-12)
    assert F.elu(Tensor(-1.0, dtype=np.float64)).item() == pytest.approx(-0.63212, abs=1e-5)


def test_mse_values():
    assert F.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert F.mse_loss(Tensor([0.0, 0.0]), Tensor([2.0, 0.0])).item() == 2.0
    rng = np.random.default_rng(13)
    a, b = Tensor(rng.standard_normal(7)), Tensor(rng.standard_normal(7))
    assert F.mse_loss(a, b).item() == F.mse_loss(b, a).item()
    with pytest.raises(DimensionError):
        F.mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- tape


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    assert x.grad == 6.0


def test_sum_elu_wx_fd():
    rng = np.random.default_rng(14)
    w = rng.standard_normal((4, 3))
    x = rng.standard_normal((3, 2))
    wt = Tensor(w.copy(), requires_grad=True)
    with Tape() as tape:
        loss = F.elu(wt @ Tensor(x)).sum()
    tape.backward(loss)
    num = numeric_grad(lambda: float(F.elu(Tensor(w) @ Tensor(x)).data.sum()), w)
    assert rel_error(wt.grad, num) < 1e-4


def test_tape_consumed():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_requires_scalar_and_nonempty():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)
    with pytest.raises(ContractError):
        Tape().backward(Tensor(1.0))


def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_reverse_visits_each_node_once():
    # a diamond graph: x feeds two branches that merge
    x = Tensor(1.5, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        a = x * 3.0
        b = x * x
        loss = a * b + a
    assert len(tape) == 4
    tape.backward(loss)
    # d/dx (3x * x^2 + 3x) = 9x^2 + 3
    assert x.grad == pytest.approx(9 * 1.5**2 + 3)


def test_forward_determinism():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    runs = [F.elu(F.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    before = p["w"].data.copy()
    s = AdamState(lr=0.1)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, s)
    assert np.array_equal(p["w"].data, before)
    assert s.step == 3


def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([0.0, 0.0, 0.0]))}
    s = AdamState(lr=0.01)
    g = np.array([3.0, -0.5, 1e-2])
    adam_step(p, {"w": g}, s)
    # m_hat = g, v_hat = g^2  =>  update = lr * g / (|g| + eps)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(p["w"].data), 0.01, rtol=1e-5)


def test_adam_scalar_convergence():
    w = Tensor(np.array([0.0]), requires_grad=True)
    s = AdamState(lr=0.1)
    for _ in range(200):
        with Tape() as tape:
            loss = ((w - 3.0) ** 2).sum()
        tape.backward(loss)
        adam_step({"w": w}, {"w": w.grad}, s)
        w.grad = None
    assert abs(w.data[0] - 3.0) < 0.05


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState())
