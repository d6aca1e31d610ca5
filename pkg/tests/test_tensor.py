import numpy as np
import pytest

from chandnas import tensor as T
from chandnas.optim import Adam, AdamState, MissingGradError, adam_step, sgd_step
from oracles import logsumexp_ce, naive_conv2d, naive_matmul


def test_add_elementwise():
    out = T.Tensor([1.0, 2.0]) + T.Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_ones_is_identity():
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal((x * T.ones_like(x)).data, x.data)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    out = (T.Tensor(a) @ T.Tensor(b)).data
    ref = naive_matmul(a, b)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_matmul_shape_mismatch_is_reported():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.Tensor(np.ones((2, 3))) @ T.Tensor(np.ones((2, 3)))


def test_unknown_op_kind():
    with pytest.raises(T.UnknownOpError):
        T.forward_op("frobnicate", [T.Tensor(1.0)])


def test_broadcast_incompatible_shapes():
    with pytest.raises(T.ShapeError):
        T.Tensor(np.ones(3)) + T.Tensor(np.ones(4))


def test_data_and_grad_lengths():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert x.size == x.data.size == 6
    T.backward((x * x).sum())
    assert x.grad.shape == x.data.shape


def test_sum_gradient_is_ones():
    x = T.Tensor(np.random.default_rng(2).normal(size=(2, 3, 4)), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_square_gradient():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_every_reachable_leaf_gets_a_grad():
    rng = np.random.default_rng(3)
    a = T.Tensor(rng.normal(size=3), requires_grad=True)
    b = T.Tensor(rng.normal(size=3), requires_grad=True)
    c = T.Tensor(rng.normal(size=3))  # constant
    T.backward(((a * b).relu() + T.forward_op("exp", [a]) * c).sum())
    assert a.grad is not None and b.grad is not None and c.grad is None


def test_shared_subexpression_accumulates():
    x = T.Tensor([2.0], requires_grad=True)
    y = x * x
    T.backward((y + y).sum())  # d(2x^2)/dx = 4x
    np.testing.assert_array_equal(x.grad, [8.0])


def test_tape_is_topological():
    x = T.Tensor(np.ones(3), requires_grad=True)
    root = ((x * 2.0).relu() + x).sum()
    tape = T.build_tape(root)
    pos = {id(n.output): i for i, n in enumerate(tape)}
    for i, node in enumerate(tape):
        for inp in node.inputs:
            if inp.node is not None:
                assert pos[id(inp)] < i


def test_second_backward_is_an_error():
    x = T.Tensor(np.ones(3), requires_grad=True)
    root = (x * x).sum()
    T.backward(root)
    with pytest.raises(T.TapeConsumedError):
        T.backward(root)


def test_non_scalar_root_rejected():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.NonScalarRootError):
        T.backward(x * 2.0)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert y.node is None and not y.requires_grad


def test_backward_is_bitwise_repeatable():
    def run():
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = T.conv2d(x, w, stride=2, padding=1).relu()
        T.backward(T.softmax_cross_entropy(T.global_avgpool(out), [0, 3]))
        return x.grad.copy(), w.grad.copy()

    (gx1, gw1), (gx2, gw2) = run(), run()
    assert gx1.tobytes() == gx2.tobytes() and gw1.tobytes() == gw2.tobytes()


# ------------------------------------------------------------------ layers


def test_conv_sum_of_ones():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(5).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, (2, 2), (1, 1)), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_random_geometry(seed):
    rng = np.random.default_rng(100 + seed)
    c, co = rng.integers(1, 5, size=2)
    ky, kx = rng.integers(1, 5, size=2)
    sy, sx = rng.integers(1, 3, size=2)
    py, px = rng.integers(0, 3, size=2)
    x = rng.normal(size=(2, c, 9, 7))
    w = rng.normal(size=(co, c, ky, kx))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=(int(sy), int(sx)), padding=(int(py), int(px))).data
    ref = naive_conv2d(x, w, None, (sy, sx), (py, px))
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_depthwise_matches_loop_reference():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(2, 5, 7, 7)), rng.normal(size=(5, 1, 3, 3)), rng.normal(size=5)
    out = T.dw_conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data
    ref = naive_conv2d(x, w, b, (2, 2), (1, 1), depthwise=True)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 3, 5, 5))), T.Tensor(np.ones((2, 4, 3, 3))))


def test_pools():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.maxpool2d(T.Tensor(x), 2).data.ravel(), [5, 7, 13, 15])
    np.testing.assert_array_equal(T.avgpool2d(T.Tensor(x), 2).data.ravel(), [2.5, 4.5, 10.5, 12.5])
    np.testing.assert_allclose(T.global_avgpool(T.Tensor(x)).data, [[7.5]])


def test_batchnorm_training_normalizes():
    x = np.random.default_rng(8).normal(3.0, 2.0, size=(16, 2, 4, 4))
    out = T.forward_op("batchnorm", [T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))],
                       {"training": True, "eps": 1e-5}).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((4, 10))), [0, 3, 5, 9]).item()
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_saturated():
    labels = np.array([1, 0, 2])
    z = np.full((3, 3), -20.0)
    z[np.arange(3), labels] = 20.0
    assert T.softmax_cross_entropy(T.Tensor(z), labels).item() < 1e-8


def test_cross_entropy_matches_logsumexp():
    rng = np.random.default_rng(9)
    z, y = rng.normal(size=(7, 5)) * 3, rng.integers(0, 5, size=7)
    assert T.softmax_cross_entropy(T.Tensor(z), y).item() == pytest.approx(logsumexp_ce(z, y), rel=1e-12)


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError, match="label out of range"):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- optimizers


def test_sgd_step():
    w = T.Tensor([1.0])
    w.grad = np.array([0.5])
    sgd_step([w], 0.1)
    assert w.data[0] == pytest.approx(0.95, abs=1e-15)
    assert w.grad is None


def test_sgd_zero_grad_keeps_param():
    w = T.Tensor([1.25])
    w.grad = np.array([0.0])
    sgd_step([w], 0.1)
    assert w.data[0] == 1.25


@pytest.mark.parametrize("g", [1e-6, 0.3, -7.0, 1e4])
def test_adam_first_step_magnitude(g):
    w = T.Tensor([2.0])
    w.grad = np.array([g])
    adam_step([w], 0.01)
    # first bias-corrected step is lr * g / (|g| + eps)
    assert abs(w.data[0] - 2.0) == pytest.approx(0.01 * abs(g) / (abs(g) + 1e-8), rel=1e-12)
    assert w.grad is None


def test_adam_state_persists():
    w = T.Tensor([0.0])
    opt = Adam([w], 0.1)
    for _ in range(3):
        w.grad = np.array([1.0])
        opt.step()
    assert opt.state.step == 3
    assert w.data[0] == pytest.approx(-0.3, rel=1e-6)


def test_missing_grad_is_an_error():
    with pytest.raises(MissingGradError):
        sgd_step([T.Tensor([1.0])], 0.1)
    with pytest.raises(MissingGradError):
        adam_step([T.Tensor([1.0])], 0.1, state=AdamState())
