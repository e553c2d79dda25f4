import threading

import numpy as np
import pytest

from scr import numerics as nx
from scr.errors import NotScalar, ShapeError
from scr.numerics import Tape, Tensor, backward, finite_diff_check


def param(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


def total(t):
    """Scalar sum of a tensor as a differentiable op (ones-vector products)."""
    rows, cols = t.shape
    return nx.matmul(nx.matmul(Tensor(np.ones((1, rows))), t), Tensor(np.ones((cols, 1))))


def weighted(t, seed=99):
    w = Tensor(np.random.default_rng(seed).normal(size=t.shape))
    return total(nx.hadamard(t, w))


def test_hadamard_example():
    assert nx.hadamard(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])).data.tolist() == [[3, 8]]


def test_segment_mean_std_example():
    mean, std = nx.segment_mean_std(Tensor([[2.0], [4.0]]), np.array([0, 0]), 2)
    assert mean.data[0, 0] == pytest.approx(3)
    assert std.data[0, 0] == pytest.approx(1, abs=1e-4)
    assert mean.data[1, 0] == 0 and std.data[1, 0] == 0


def test_single_message_std_is_zero_with_finite_gradient():
    m = Tensor([[5.0, -1.0]], requires_grad=True)
    with Tape() as tape:
        _, std = nx.segment_mean_std(m, np.array([0]), 1)
        loss = total(std)
    assert std.data.tolist() == [[0, 0]]
    backward(tape, loss)
    assert np.all(np.isfinite(m.grad)) and np.all(m.grad == 0)


def test_layer_norm_constant_row():
    assert nx.layer_norm(Tensor([[1.0, 1.0, 1.0, 1.0]])).data.tolist() == [[0, 0, 0, 0]]


def test_square_gradient():
    x = Tensor([[3.0]], requires_grad=True)
    with Tape() as tape:
        y = nx.hadamard(x, x)
    backward(tape, y)
    assert x.grad[0, 0] == pytest.approx(6)


def test_bce_gradient_at_zero():
    z = Tensor([[0.0]], requires_grad=True)
    with Tape() as tape:
        loss = nx.bce_with_logits(z, [1.0])
    backward(tape, loss)
    assert z.grad[0, 0] == pytest.approx(-0.5)
    assert loss.item() == pytest.approx(np.log(2))


def test_not_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = nx.relu(x)
    with pytest.raises(NotScalar):
        backward(tape, y)


def test_shape_errors():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))
    with pytest.raises(IndexError):
        nx.scatter_add(Tensor(np.ones((2, 1))), np.array([0, 5]), 3)


def test_no_grad_records_nothing():
    x = param((2, 2))
    with Tape() as tape:
        with nx.no_grad():
            nx.relu(x)
    assert len(tape) == 0


# per-primitive finite-difference checks in double precision

def check(fn, *tensors, tol=1e-6):
    err = finite_diff_check(fn, list(tensors), h=1e-5)
    assert err < tol, err


def test_grad_matmul():
    a, b = param((4, 3), 1), param((3, 2), 2)
    check(lambda: weighted(nx.matmul(a, b)), a, b)


def test_grad_add_broadcast():
    a, b = param((4, 3), 1), param((1, 3), 2)
    check(lambda: weighted(nx.add(a, b)), a, b)


def test_grad_hadamard_broadcast():
    a, b = param((4, 3), 1), param((1, 3), 2)
    check(lambda: weighted(nx.hadamard(a, b)), a, b)


def test_grad_relu_smooth_region():
    a = Tensor(np.array([[0.5, -0.7], [1.2, -2.0]]), requires_grad=True)
    check(lambda: weighted(nx.relu(a)), a)


def test_grad_sigmoid():
    a = param((3, 3), 3)
    check(lambda: weighted(nx.sigmoid(a)), a)


def test_grad_layer_norm():
    x, g, b = param((4, 5), 1), param((1, 5), 2), param((1, 5), 3)
    check(lambda: weighted(nx.layer_norm(x, g, b)), x, g, b, tol=1e-5)


def test_grad_concat_gather_scatter():
    a, b = param((3, 2), 1), param((3, 1), 2)
    idx = np.array([0, 2, 2, 1, 0])
    check(lambda: weighted(nx.scatter_add(nx.gather_rows(nx.concat([a, b]), idx), idx[::-1].copy(), 3)), a, b)


def test_grad_segment_mean_std():
    m = param((7, 3), 4)
    idx = np.array([0, 0, 1, 2, 2, 2, 0])
    check(lambda: weighted(nx.add(*nx.segment_mean_std(m, idx, 4))), m, tol=1e-5)


def test_grad_bce():
    z = param((6, 1), 5)
    y = np.array([1, 0, 0, 1, 0, 1.0])
    w = np.arange(1, 7) / 21.0
    check(lambda: nx.bce_with_logits(z, y, w), z)


def test_finite_diff_linear_exact():
    w = param((3, 1), 1)
    x = Tensor(np.random.default_rng(2).normal(size=(5, 3)))
    assert finite_diff_check(lambda: total(nx.matmul(x, w)), [w]) < 1e-8


def test_scatter_add_order_independent():
    rng = np.random.default_rng(0)
    msgs = rng.normal(size=(500, 4)).astype(np.float32) * 1e3
    idx = rng.integers(0, 20, 500)
    perm = rng.permutation(500)
    a = nx.scatter_add(Tensor(msgs), idx, 20).data
    b = nx.scatter_add(Tensor(msgs[perm]), idx[perm], 20).data
    assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(a))


def test_parallel_tapes_with_sinks():
    w = param((3, 3), 1)
    xs = [Tensor(np.random.default_rng(s).normal(size=(4, 3))) for s in range(6)]
    sinks = [None] * len(xs)

    def run(i):
        sink = {}
        with Tape() as tape:
            loss = weighted(nx.relu(nx.matmul(xs[i], w)))
        backward(tape, loss, sink=sink)
        sinks[i] = sink[id(w)]

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i, x in enumerate(xs):
        w.grad = None
        with Tape() as tape:
            loss = weighted(nx.relu(nx.matmul(x, w)))
        backward(tape, loss)
        assert np.array_equal(sinks[i], w.grad)


def test_debug_mode_catches_non_finite():
    nx.set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            nx.matmul(Tensor([[np.inf]]), Tensor([[0.0]]))
    finally:
        nx.set_debug(False)
