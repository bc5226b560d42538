import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdetect import autodiff as ad
from qdetect.autodiff import Parameter
from qdetect.errors import ContractError, DimensionError, GradientError


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar f over every entry of array x (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(np.eye(2), A)
    assert np.array_equal(out.value, A)


def test_matmul_hand_product():
    out = ad.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
    assert np.array_equal(out.value, [[19, 22], [43, 50]])


def test_matmul_inner_dim_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# --- elementwise ----------------------------------------------------------

def test_sigmoid_zero():
    assert ad.sigmoid(np.array([0.0])).value[0] == 0.5


def test_relu_definition():
    out = ad.relu(np.array([-3.2, 3.2])).value
    assert out[0] == 0.0 and out[1] == 3.2


def test_tanh_scalar_oracle():
    assert abs(ad.tanh(np.array([0.5])).value[0] - 0.46211715726000974) < 1e-12


def test_elementwise_dispatch_and_unknown():
    a, b = np.array([1.0, 2.0]), np.array([3.0, 5.0])
    assert np.array_equal(ad.elementwise("mul", a, b).value, [3.0, 10.0])
    with pytest.raises(ValueError):
        ad.elementwise("cube", a)


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


# --- softmax --------------------------------------------------------------

def test_softmax_uniform():
    p = ad.softmax_masked(np.zeros((1, 3)), np.ones((1, 3))).value
    assert np.allclose(p, 1 / 3, atol=0, rtol=1e-15)


def test_softmax_masked_uniform():
    p = ad.softmax_masked(np.array([[5.0, 5, 5]]), np.array([[1, 1, 0]])).value
    assert np.array_equal(p, [[0.5, 0.5, 0.0]])


def test_softmax_exp_sum_oracle():
    p = ad.softmax_masked(np.array([[1.0, 2, 3]]), np.ones((1, 3))).value
    assert np.allclose(p, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)


def test_softmax_empty_mask_row():
    with pytest.raises(ContractError):
        ad.softmax_masked(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]]))


# --- concat ---------------------------------------------------------------

def test_concat_vectors():
    assert np.array_equal(ad.concat([np.array([1.0, 2]), np.array([3.0])], 0).value, [1, 2, 3])


def test_concat_shape_arithmetic():
    assert ad.concat([np.ones((2, 200)), np.ones((2, 200))], axis=1).shape == (2, 400)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        ad.concat([np.ones((2, 3)), np.ones((4, 3))], axis=1)


# --- backward -------------------------------------------------------------

def test_square_gradient():
    x = Parameter(np.array([3.0]), "x")
    ad.mul(x, x).backward()
    assert x.grad[0] == 6.0


def test_sigmoid_dot_matches_fd():
    rng = np.random.default_rng(0)
    w = Parameter(rng.standard_normal(5), "w")
    x = rng.standard_normal((5, 1))

    def loss():
        return ad.sum_all(ad.sigmoid(ad.matmul(ad.reshape(w, (1, 5)), x)))

    loss().backward()
    num = fd_grad(lambda: loss().value.item(), w.value)
    assert rel_err(w.grad, num) < 1e-6


def test_two_backward_calls_double():
    rng = np.random.default_rng(1)
    w = Parameter(rng.standard_normal((3, 2)), "w")
    loss = ad.sum_all(ad.tanh(ad.matmul(rng.standard_normal((4, 3)), w)))
    loss.backward()
    once = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2 * once)


def test_backward_requires_scalar():
    w = Parameter(np.ones(3), "w")
    with pytest.raises(ContractError):
        ad.tanh(w).backward()


def test_shared_subgraph_accumulates():
    # y = a*a + a, used twice through a shared node
    a = Parameter(np.array([2.0]), "a")
    s = ad.mul(a, a)
    ad.sum_all(ad.add(ad.add(s, a), s)).backward()
    assert a.grad[0] == 2 * 2 * 2.0 + 1


def test_check_finite_flags_nan():
    ad.set_check_finite(True)
    try:
        with pytest.raises(GradientError):
            ad.mul(np.array([np.inf]), np.array([0.0]))
    finally:
        ad.set_check_finite(False)


# --- op-level gradient properties -----------------------------------------

dims = st.integers(1, 8)


def _check_op(build, shapes, seed, positive=False):
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.standard_normal(s) + (3.0 if positive else 0.0), f"p{i}")
              for i, s in enumerate(shapes)]
    weights = None

    def loss():
        out = build(*params)
        nonlocal weights
        if weights is None:
            # magnitudes kept away from 0 so no entry's gradient drowns in rounding noise
            wr = np.random.default_rng(seed + 1)
            weights = wr.choice([-1.0, 1.0], out.shape) * wr.uniform(0.5, 1.5, out.shape)
        return ad.sum_all(ad.mul(out, weights))

    loss().backward()
    for p in params:
        num = fd_grad(lambda: loss().value.item(), p.value)
        assert rel_err(p.grad, num) < 1e-6, p.name


@settings(max_examples=10, deadline=None)
@given(n=dims, k=dims, m=dims, seed=st.integers(0, 10_000))
def test_matmul_gradient(n, k, m, seed):
    _check_op(ad.matmul, [(n, k), (k, m)], seed)


@settings(max_examples=10, deadline=None)
@given(n=dims, d=dims, seed=st.integers(0, 10_000))
def test_binary_and_bias_gradients(n, d, seed):
    _check_op(ad.add, [(n, d), (n, d)], seed)
    _check_op(ad.sub, [(n, d), (d,)], seed)
    _check_op(ad.mul, [(n, d), (d,)], seed)
    _check_op(lambda a, b: ad.mul(a, b), [(n, d), (n, d)], seed)


@settings(max_examples=10, deadline=None)
@given(n=dims, d=dims, seed=st.integers(0, 10_000))
def test_unary_gradients(n, d, seed):
    _check_op(ad.sigmoid, [(n, d)], seed)
    _check_op(ad.tanh, [(n, d)], seed)
    _check_op(lambda a: ad.scale(a, -1.7), [(n, d)], seed)
    _check_op(ad.relu, [(n, d)], seed, positive=True)   # away from the kink
    _check_op(lambda a: ad.reshape(a, (d, n)), [(n, d)], seed)
    _check_op(ad.mean_all, [(n, d)], seed)


@settings(max_examples=10, deadline=None)
@given(n=dims, T=dims, d=dims, seed=st.integers(0, 10_000))
def test_time_op_gradients(n, T, d, seed):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, T + 1, n)
    mask = np.arange(T)[None, :] < lengths[:, None]
    perm = np.argsort(rng.random((n, T)), axis=1)
    _check_op(lambda a: ad.take_time(a, T - 1), [(n, T, d)], seed)
    _check_op(lambda a: ad.slice_last(a, 0, max(1, d // 2)), [(n, T, d)], seed)
    _check_op(lambda a: ad.gather_time(a, lengths - 1), [(n, T, d)], seed)
    _check_op(lambda a: ad.permute_time(a, perm), [(n, T, d)], seed)
    _check_op(lambda a: ad.repeat_time(a, T), [(n, d)], seed)
    _check_op(lambda *xs: ad.stack_time(list(xs)), [(n, d)] * T, seed)
    _check_op(ad.weighted_time_sum, [(n, T), (n, T, d)], seed)
    _check_op(lambda a: ad.softmax_masked(a, mask), [(n, T)], seed)
    _check_op(lambda a, b: ad.where(np.broadcast_to(mask[:, :, None], (n, T, d)), a, b),
              [(n, T, d), (n, T, d)], seed)
    _check_op(lambda a, b: ad.concat([a, b], axis=1), [(n, T, d), (n, 2, d)], seed)


def test_gather_rows_scatter_and_frozen():
    table = Parameter(np.arange(12.0).reshape(4, 3), "E")
    out = ad.gather_rows(table, np.array([[2, 2], [0, 1]]), frozen_rows=(0,))
    ad.sum_all(out).backward()
    assert np.array_equal(table.grad[2], [2.0, 2.0, 2.0])
    assert np.array_equal(table.grad[0], [0.0, 0.0, 0.0])
    assert np.array_equal(table.grad[1], [1.0, 1.0, 1.0])


# --- grad_check -----------------------------------------------------------

def test_grad_check_linear_model():
    rng = np.random.default_rng(3)
    W = Parameter(rng.standard_normal((4, 2)), "W")
    b = Parameter(rng.standard_normal(2), "b")
    X, Y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))

    def f():
        r = ad.sub(ad.add(ad.matmul(X, W), b), Y)
        return ad.mean_all(ad.mul(r, r))

    report = ad.grad_check(f, [W, b], eps=1e-5, tol=1e-8)
    assert report.passed and report.max_error < 1e-8


def test_grad_check_catches_wrong_rule():
    w = Parameter(np.array([0.3, -0.7, 1.1]), "w")

    def bad_tanh(a):
        t = np.tanh(a.value)
        return ad._make(t, (a,), lambda g: (g * (1 - t),), "bad_tanh")   # wrong: 1 - t

    report = ad.grad_check(lambda: ad.sum_all(bad_tanh(w)), [w])
    assert not report.passed


def test_grad_check_fourth_order_stencil():
    w = Parameter(np.array([0.4, -1.3]), "w")
    f = lambda: ad.sum_all(ad.tanh(ad.mul(w, w)))
    report = ad.grad_check(f, {"w": w}, eps=1e-2, stencil=4, tol=1e-6)
    assert report.passed, report


def test_grad_check_shrinks_step_across_relu_kink():
    # pre-activation sits 1e-4 from the kink; a 1e-2 step would cross it
    w = Parameter(np.array([1e-4, 0.5]), "w")
    f = lambda: ad.sum_all(ad.mul(ad.relu(w), np.array([2.0, 3.0])))
    assert ad.grad_check(f, [w], eps=1e-2, stencil=4, tol=1e-6).passed


def test_grad_check_restores_parameters_and_clears_grads():
    w = Parameter(np.array([0.2, 0.9]), "w")
    before = w.value.copy()
    ad.grad_check(lambda: ad.sum_all(ad.sigmoid(w)), [w], stencil=4, eps=1e-3)
    assert np.array_equal(w.value, before) and w.grad is None
