import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check
from swr.diffcore import (Adam, AdamState, ShapeError, Tensor, adam_step, backward, cosine_schedule,
                          get_tape, no_grad, ops, sgd_step)
from swr.rng import Rng


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


# forward examples -----------------------------------------------------------

def test_relu_example():
    assert ops.relu(t([-1, 0, 2])).data.tolist() == [0, 0, 2]


def test_softmax_symmetric():
    assert ops.softmax(t([0, 0])).data.tolist() == [0.5, 0.5]


def test_conv_ones():
    out = ops.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_matches_direct_loop():
    rs = np.random.RandomState(3)
    x = rs.randn(2, 3, 5, 7).astype(np.float32)
    w = rs.randn(4, 3, 3, 2).astype(np.float32)
    out = ops.conv2d(t(x), t(w), stride=(2, 1), padding=(1, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64)
    ho, wo = out.shape[2:]
    ref = np.zeros(out.shape)
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, j:j + 2] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_depthwise_and_pointwise_match_dense_conv():
    rs = np.random.RandomState(4)
    x = rs.randn(2, 3, 6, 5).astype(np.float32)
    wd = rs.randn(3, 1, 3, 1).astype(np.float32)
    dense = np.zeros((3, 3, 3, 1), np.float32)
    for c in range(3):
        dense[c, c] = wd[c, 0]
    np.testing.assert_allclose(ops.depthwise_conv2d(t(x), t(wd), (2, 1), (1, 0)).data,
                               ops.conv2d(t(x), t(dense), (2, 1), (1, 0)).data, rtol=1e-5, atol=1e-6)
    wp = rs.randn(4, 3, 1, 1).astype(np.float32)
    np.testing.assert_allclose(ops.pointwise_conv2d(t(x), t(wp)).data,
                               ops.conv2d(t(x), t(wp)).data, rtol=1e-5, atol=1e-6)


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d.*3"):
        ops.conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((2, 2, 3, 3))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(t(np.ones(3)), t(np.ones(4)))
    with pytest.raises(ShapeError, match="depthwise"):
        ops.depthwise_conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((2, 1, 3, 3))))


# backward examples ----------------------------------------------------------

def test_backward_square():
    w = t([1, 2], grad=True)
    backward(ops.sum(ops.mul(w, w)))
    assert w.grad.tolist() == [2, 4]


def test_backward_cross_entropy():
    z = t([[0, 0]], grad=True)
    backward(ops.cross_entropy(z, [0]))
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]])


def test_backward_rejects_non_scalar():
    w = t([1, 2], grad=True)
    with pytest.raises(ShapeError):
        backward(ops.mul(w, w))


def test_tape_cleared_and_reverse_order():
    tape = get_tape()
    tape.clear()
    w = t([1.0, -2.0], grad=True)
    a = ops.relu(w)
    b = ops.scale(a, 3.0)
    loss = ops.sum(b)
    assert [n.op for n in tape.nodes] == ["relu", "scale", "sum"]
    visited = []
    for node in tape.nodes:
        inner = node.backward
        node.backward = (lambda f, op: (lambda g: (visited.append(op), f(g))[1]))(inner, node.op)
    backward(loss)
    assert visited == ["sum", "scale", "relu"]
    assert len(tape) == 0


def test_shared_input_accumulates_once_per_call():
    w = t([3.0], grad=True)
    backward(ops.sum(ops.add(w, w)))
    assert w.grad.tolist() == [2.0]
    backward(ops.sum(ops.add(w, w)))
    assert w.grad.tolist() == [2.0]


def test_no_grad_records_nothing():
    w = t([1.0], grad=True)
    with no_grad():
        out = ops.relu(w)
    assert len(get_tape()) == 0 and not out.requires_grad


def test_tapes_are_per_thread():
    lengths = []

    def work():
        w = t([1.0, 2.0], grad=True)
        ops.relu(w)
        lengths.append(len(get_tape()))
        get_tape().clear()

    get_tape().clear()
    th = threading.Thread(target=work)
    th.start()
    th.join()
    assert lengths == [1] and len(get_tape()) == 0


# finite-difference checks ---------------------------------------------------

def _away_from_zero(rs, shape, margin=0.05):
    x = rs.randn(*shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


GRAD_CASES = {
    "matmul": (lambda a, b: ops.matmul(a, b), lambda rs: [rs.randn(3, 4), rs.randn(4, 2)]),
    "add_broadcast": (lambda a, b: ops.add(a, b), lambda rs: [rs.randn(3, 4), rs.randn(4)]),
    "sub": (lambda a, b: ops.sub(a, b), lambda rs: [rs.randn(3, 2), rs.randn(3, 2)]),
    "mul_scalar_tensor": (lambda a, b: ops.mul(a, b), lambda rs: [rs.randn(2, 3), rs.randn()]),
    "scale": (lambda a: ops.scale(a, -1.7), lambda rs: [rs.randn(5)]),
    "relu": (lambda a: ops.relu(a), lambda rs: [_away_from_zero(rs, (4, 3))]),
    "abs": (lambda a: ops.abs(a), lambda rs: [_away_from_zero(rs, (6,))]),
    "conv2d": (lambda x, w: ops.conv2d(x, w, (2, 1), (1, 1)),
               lambda rs: [rs.randn(2, 2, 5, 4), rs.randn(3, 2, 3, 3)]),
    "depthwise_conv2d": (lambda x, w: ops.depthwise_conv2d(x, w, (1, 1), (0, 1)),
                         lambda rs: [rs.randn(2, 3, 4, 5), rs.randn(3, 1, 1, 3)]),
    "pointwise_conv2d": (lambda x, w: ops.pointwise_conv2d(x, w),
                         lambda rs: [rs.randn(2, 3, 3, 2), rs.randn(4, 3, 1, 1)]),
    "batch_norm_train": (lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(3, np.float32),
                                                        np.ones(3, np.float32), True),
                         lambda rs: [rs.randn(4, 3, 2, 2), rs.randn(3), rs.randn(3)]),
    "batch_norm_eval": (lambda x, g, b: ops.batch_norm(x, g, b, np.full(3, 0.3, np.float32),
                                                       np.full(3, 2.0, np.float32), False),
                        lambda rs: [rs.randn(5, 3), rs.randn(3), rs.randn(3)]),
    "avg_pool2d": (lambda x: ops.avg_pool2d(x, (2, 2)), lambda rs: [rs.randn(2, 2, 5, 4)]),
    "global_avg_pool": (lambda x: ops.global_avg_pool(x), lambda rs: [rs.randn(2, 3, 3, 4)]),
    "softmax": (lambda a: ops.softmax(a), lambda rs: [rs.randn(3, 4)]),
    "log_softmax": (lambda a: ops.log_softmax(a), lambda rs: [rs.randn(3, 4)]),
    "cross_entropy": (lambda a: ops.cross_entropy(a, [0, 2, 1]), lambda rs: [rs.randn(3, 4)]),
    "cross_entropy_smoothed": (lambda a: ops.cross_entropy(a, [1, 0], 0.3), lambda rs: [rs.randn(2, 3)]),
    "reshape_getitem": (lambda a: ops.getitem(ops.reshape(a, (3, 2)), (slice(None), 0)),
                        lambda rs: [rs.randn(6)]),
    "mean": (lambda a: ops.mean(a), lambda rs: [rs.randn(2, 5)]),
    "sum": (lambda a: ops.sum(a), lambda rs: [rs.randn(3, 4)]),
    "linear": (lambda x, w, b: ops.linear(x, w, b), lambda rs: [rs.randn(3, 4), rs.randn(4, 2), rs.randn(2)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    fn, make = GRAD_CASES[name]
    errors = [check(fn, make(np.random.RandomState(seed)), seed=seed) for seed in range(20)]
    assert max(errors) < 1e-3, (name, max(errors))


def test_gumbel_soft_path_gradient():
    """Straight-through gradient equals the gradient of the tempered softmax at fixed noise."""
    for seed in range(20):
        rs = np.random.RandomState(seed)
        noise = rs.gumbel(size=(4, 2))
        tau = 0.5 + rs.rand()
        logits = rs.randn(4, 2)
        w = rs.randn(4, 2).astype(np.float32)
        lt = Tensor(logits.astype(np.float32), requires_grad=True)
        backward(ops.sum(ops.mul(ops.gumbel_softmax_hard(lt, tau, noise=noise), Tensor(w))))
        soft = lambda a: ops.softmax(ops.scale(ops.add(a, Tensor(noise.astype(a.data.dtype))), 1 / tau))
        soft_t = Tensor(logits.astype(np.float32), requires_grad=True)
        backward(ops.sum(ops.mul(soft(soft_t), Tensor(w))))
        np.testing.assert_allclose(lt.grad, soft_t.grad, rtol=1e-5, atol=1e-7)
        # and the soft path itself against finite differences
        assert check(lambda a: ops.mul(soft(a), Tensor(w.astype(a.data.dtype))), [logits], seed=seed) < 1e-3


def test_random_conv_net_gradients():
    # squaring stands in for relu here: finite differences across a relu kink are meaningless
    def net(x, w1, g, b, w2, w3, head):
        h = ops.conv2d(x, w1, (2, 1), (1, 1))
        h = ops.batch_norm(h, g, b, np.zeros(3, np.float32), np.ones(3, np.float32), True)
        h = ops.depthwise_conv2d(ops.mul(h, h), w2, 1, (1, 0))
        h = ops.pointwise_conv2d(h, w3)
        return ops.log_softmax(ops.matmul(ops.global_avg_pool(h), head))

    for seed in range(20):
        rs = np.random.RandomState(100 + seed)
        arrays = [rs.randn(3, 1, 6, 5), rs.randn(3, 1, 3, 3), 1 + 0.1 * rs.randn(3), rs.randn(3),
                  rs.randn(3, 1, 3, 1), rs.randn(4, 3, 1, 1), rs.randn(4, 5)]
        assert check(net, arrays, seed=seed, wrt=range(1, 7)) < 1e-3


# gumbel ---------------------------------------------------------------------

def test_gumbel_one_hot_and_tau_validation():
    rng = Rng(0)
    for i in range(50):
        out = ops.gumbel_softmax_hard(t(np.random.RandomState(i).randn(2) * 3), 0.7, rng.split(i)).data
        assert out.tolist() in ([1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        ops.gumbel_softmax_hard(t([0.0, 0.0]), 0.0, rng)


def test_gumbel_confident_logits():
    rng = Rng(1)
    draws = ops.gumbel_softmax_hard(t(np.tile([10.0, -10.0], (1000, 1))), 0.1, rng).data
    assert draws[:, 0].mean() >= 0.99


def test_gumbel_symmetric_rate():
    draws = ops.gumbel_softmax_hard(t(np.zeros((10000, 2))), 1.0, Rng(2)).data
    assert abs(draws[:, 0].mean() - 0.5) <= 0.02


def test_gumbel_deterministic():
    a = ops.gumbel_softmax_hard(t(np.zeros((64, 2))), 1.0, Rng(5, ("x",))).data
    b = ops.gumbel_softmax_hard(t(np.zeros((64, 2))), 1.0, Rng(5, ("x",))).data
    assert a.tobytes() == b.tobytes()


# optimizers -----------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = t([1.0, -2.0], grad=True)
    state = AdamState()
    adam_step({"p": p}, 0.1, state)
    assert p.data.tolist() == [1.0, -2.0] and state.step == 1


def test_adam_first_step_magnitude():
    p = t([0.5], grad=True)
    p.grad = np.array([1.0], np.float32)
    adam_step({"p": p}, 0.1, AdamState())
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-6)


def test_adam_identical_params_stay_identical():
    a, b = t([0.3, 0.1], grad=True), t([0.3, 0.1], grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.05)
    rs = np.random.RandomState(0)
    for _ in range(10):
        g = rs.randn(2).astype(np.float32)
        a.grad, b.grad = g.copy(), g.copy()
        opt.step()
    assert a.data.tobytes() == b.data.tobytes()


def test_optimizers_reject_nan():
    p = t([1.0], grad=True)
    p.grad = np.array([np.nan], np.float32)
    with pytest.raises(FloatingPointError, match="weights"):
        adam_step({"weights": p}, 0.1, AdamState())
    with pytest.raises(FloatingPointError, match="weights"):
        sgd_step({"weights": p}, 0.1)
    assert p.data[0] == 1.0


def test_sgd_step():
    p = t([1.0], grad=True)
    p.grad = np.array([2.0], np.float32)
    sgd_step({"p": p}, 0.25)
    assert p.data[0] == pytest.approx(0.5)


# schedule -------------------------------------------------------------------

@pytest.mark.parametrize("step,expected", [(0, 2.0), (100, 0.5), (50, 1.25), (150, 0.5)])
def test_cosine_schedule_examples(step, expected):
    assert cosine_schedule(2.0, 0.5, step, 100) == pytest.approx(expected)


@given(st.floats(0.01, 5), st.floats(0.01, 5), st.integers(1, 500), st.data())
def test_cosine_schedule_bounded_and_monotone(start, end, total, data):
    t0 = data.draw(st.integers(0, total))
    t1 = data.draw(st.integers(t0, total))
    v0, v1 = cosine_schedule(start, end, t0, total), cosine_schedule(start, end, t1, total)
    lo, hi = min(start, end), max(start, end)
    assert lo - 1e-12 <= v0 <= hi + 1e-12
    assert (v1 - v0) * (end - start) >= -1e-12


# properties -----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_norm_eval_is_pure_affine(seed):
    rs = np.random.RandomState(seed % (2**32))
    x = rs.randn(6, 3).astype(np.float32)
    mean, var = rs.randn(3).astype(np.float32), (rs.rand(3) + 0.5).astype(np.float32)
    mean0, var0 = mean.copy(), var.copy()
    g, b = t(rs.randn(3)), t(rs.randn(3))

    def f(z):
        return ops.batch_norm(t(z), g, b, mean, var, False).data

    y0, y1, y2 = f(np.zeros_like(x)), f(x), f(2 * x)
    np.testing.assert_allclose(y2 - y0, 2 * (y1 - y0), rtol=1e-4, atol=1e-4)
    assert mean.tobytes() == mean0.tobytes() and var.tobytes() == var0.tobytes()


def test_batch_norm_train_updates_running_mean():
    x = t(np.full((4, 2), 3.0) + np.arange(4)[:, None])
    mean, var = np.zeros(2, np.float32), np.ones(2, np.float32)
    ops.batch_norm(x, t(np.ones(2)), t(np.zeros(2)), mean, var, True, momentum=0.1)
    np.testing.assert_allclose(mean, 0.1 * 4.5)
    np.testing.assert_allclose(var, 0.9 + 0.1 * np.var(np.arange(4), ddof=1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_ops_deterministic(seed):
    rs = np.random.RandomState(seed)
    x, w = rs.randn(2, 2, 5, 5), rs.randn(3, 2, 3, 3)
    outs = [ops.conv2d(t(x), t(w), 1, 1).data.tobytes() for _ in range(2)]
    assert outs[0] == outs[1]
    logits = rs.randn(8, 2)
    draws = [ops.gumbel_softmax_hard(t(logits), 0.5, Rng(seed)).data.tobytes() for _ in range(2)]
    assert draws[0] == draws[1]


def test_float32_throughout():
    x = t(np.ones((2, 1, 4, 4)))
    w = t(np.ones((1, 1, 3, 3)))
    assert ops.conv2d(x, w, 1, 1).data.dtype == np.float32
    assert ops.batch_norm(ops.conv2d(x, w, 1, 1), t([1.0]), t([0.0]), np.zeros(1, np.float32),
                          np.ones(1, np.float32), True).data.dtype == np.float32
