import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cclis import numerics as nx
from cclis.numerics import NumericsError, ShapeError, Tape, Tensor, backward, finite_diff_check


def test_relu_forward():
    assert np.array_equal(nx.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])


def test_l2_normalize_three_four_five():
    out = nx.l2_normalize(Tensor(np.array([[3.0, 4.0]])))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)


def test_softmax_symmetric():
    np.testing.assert_allclose(nx.softmax(Tensor(np.array([[0.0, 0.0]]))).data, [[0.5, 0.5]])


def test_backward_square():
    tape = Tape()
    x = tape.leaf([3.0])
    grads = backward(nx.reduce_sum(nx.mul(x, x)))
    np.testing.assert_allclose(grads[x], [6.0])


def test_backward_log_softmax_picks_p_minus_y():
    tape = Tape()
    x = tape.leaf([[0.0, 0.0]])
    root = nx.neg(nx.nll_gather(nx.log_softmax(x), np.array([0])))  # log softmax(x)[0]
    np.testing.assert_allclose(backward(root)[x], [[0.5, -0.5]])


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(nx.relu(x))


def test_tape_consumed_after_backward():
    tape = Tape()
    x = tape.leaf([1.0])
    root = nx.reduce_sum(x)
    backward(root)
    assert tape.consumed
    with pytest.raises(RuntimeError):
        backward(root)


def test_unreached_leaf_absent():
    tape = Tape()
    x, y = tape.leaf([1.0]), tape.leaf([2.0])
    grads = backward(nx.reduce_sum(x))
    assert x in grads and y not in grads


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_exp_overflow_raises():
    with pytest.raises(NumericsError):
        nx.exp(Tensor(np.array([800.0])))


def test_log_nonpositive_raises():
    with pytest.raises(NumericsError):
        nx.log(Tensor(np.array([0.0, 1.0])))


def test_zero_vector_normalize_raises_but_eps_variant_does_not():
    z = Tensor(np.zeros((1, 3)))
    with pytest.raises(NumericsError):
        nx.l2_normalize(z)
    assert np.all(np.isfinite(nx.l2_normalize(z, eps=nx.SAFE_EPS).data))


def test_finite_diff_quadratic_exact():
    err = finite_diff_check(lambda p: nx.reduce_sum(nx.mul(p[0], p[0])), [np.array([3.0])], h=1e-5)
    assert err < 1e-8


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: nx.reduce_sum(p[0]), [np.array([1.0])], h=0.0)


def test_finite_diff_non_finite_raises():
    # log is finite at x=1e-6 but the perturbed point x-h is negative
    with pytest.raises(NumericsError):
        finite_diff_check(lambda p: nx.reduce_sum(nx.log(p[0])), [np.array([1e-6])], h=1e-5)


def _composite(seed):
    """Random scalar composition touching every registered op."""
    rng = np.random.default_rng(seed)
    n, d, k = rng.integers(2, 5), rng.integers(2, 5), rng.integers(2, 4)
    a = rng.normal(size=(n, d))
    w = rng.normal(size=(d, k))
    b = rng.normal(size=k)
    v = rng.normal(size=k)
    targets = rng.integers(k, size=n)
    rows = rng.integers(n, size=n)

    def f(p):
        a_, w_, b_, v_ = p
        h = nx.relu(nx.add(nx.matmul(a_, w_), b_))
        h = nx.add(h, nx.scale(nx.matmul(a_, w_), 0.5))
        z = nx.l2_normalize(nx.sub(h, nx.neg(b_)), eps=1e-12)
        s = nx.take_rows(nx.log_softmax(z), rows)
        loss = nx.nll_gather(s, targets)
        sm = nx.softmax(nx.transpose(nx.mul(z, z)))
        loss = nx.add(loss, nx.reduce_mean(nx.log(nx.add(sm, 1.0))))
        loss = nx.add(loss, nx.dot(nx.exp(nx.scale(v_, 0.3)), v_))
        return loss

    return f, [a, w, b, v]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_matches_finite_differences_property(seed):
    f, params = _composite(seed)
    assert finite_diff_check(f, params) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_and_normalized_rows(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10, size=(4, 6))
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(nx.l2_normalize(Tensor(x)).data, axis=1), 1.0, atol=1e-12)


def test_tape_replay_bitwise_deterministic():
    f, params = _composite(7)

    def grads():
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        g = backward(f(leaves))
        return [g[x] for x in leaves]

    for a, b in zip(grads(), grads()):
        assert np.array_equal(a, b)


def test_mixed_tapes_rejected():
    a, b = Tape().leaf([1.0]), Tape().leaf([2.0])
    with pytest.raises(ValueError):
        nx.add(a, b)


def test_untracked_ops_do_not_record():
    out = nx.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert not out.tracked
