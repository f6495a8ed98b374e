import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aga import autodiff as ad, oracles
from aga.autodiff import ShapeError, Tensor, backward, finite_difference_check, trace
from aga.verify import _elementwise_cases


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity_and_forced():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match="3"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_matches_scalar_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert np.allclose((Tensor(a) @ Tensor(b)).data, oracles.matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = _p(rng, 4, 5), _p(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    assert finite_difference_check(lambda: ((a @ b) * w).sum(), [a, b]) <= 1e-6


def test_row_softmax_examples():
    assert np.allclose(ad.row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ad.row_softmax(Tensor([[2.5, 7.0]]), mask=np.array([[True, False]]))
    assert np.array_equal(out.data, [[1.0, 0.0]])


def test_row_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError):
        ad.row_softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True] * 3, [False] * 3]))


def test_row_softmax_oracle_and_gradient():
    rng = np.random.default_rng(1)
    x = _p(rng, 3, 4)
    ref = np.array([oracles.softmax(list(r)) for r in x.data])
    assert np.abs(ad.row_softmax(x).data - ref).max() <= 1e-12
    w = rng.normal(size=(3, 4))
    assert finite_difference_check(lambda: (ad.row_softmax(x) * w).sum(), [x]) <= 1e-6


def test_masked_softmax_gradient():
    rng = np.random.default_rng(2)
    x = _p(rng, 3, 5)
    mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=bool)
    w = rng.normal(size=(3, 5))
    assert finite_difference_check(lambda: (ad.row_softmax(x, mask) * w).sum(), [x]) <= 1e-6


def test_l2_normalize_examples():
    assert np.array_equal(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    assert np.array_equal(ad.l2_normalize(Tensor(np.zeros(4))).data, np.zeros(4))


def test_l2_normalize_norms_and_gradient():
    rng = np.random.default_rng(3)
    x = _p(rng, 50, 8)
    n = np.linalg.norm(ad.l2_normalize(x).data, axis=1)
    # upper end allows one ulp of rounding in the norm itself
    assert (n >= 1 - 1e-9).all() and (n <= 1 + 2**-52).all()
    w = rng.normal(size=(50, 8))
    assert finite_difference_check(lambda: (ad.l2_normalize(x) * w).sum(), [x]) <= 1e-6


def test_l2_normalize_zero_vector_gradient_is_finite():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    ad.l2_normalize(x).sum().backward()
    assert np.isfinite(x.grad).all()


@pytest.mark.parametrize("name", sorted(_elementwise_cases(np.random.default_rng(0))))
def test_op_gradients(name):
    f, params = _elementwise_cases(np.random.default_rng(5))[name]
    assert finite_difference_check(f, params) <= 1e-6


@given(st.integers(0, 2**31 - 1))
def test_op_gradients_random_points(seed):
    # different random points for every op, ties have probability zero
    for name, (f, params) in _elementwise_cases(np.random.default_rng(seed)).items():
        assert finite_difference_check(f, params) <= 1e-6, name


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_zero_times_x():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    (x * 0.0).sum().backward()
    assert np.array_equal(x.grad, np.zeros((3, 2)))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert not x.has_grad


def test_shared_subexpression_gradient():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    y = x.tanh()
    (y * y + y).sum().backward()
    t = np.tanh(x.data)
    assert np.allclose(x.grad, (2 * t + 1) * (1 - t**2), atol=1e-14)


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_linearity(xv, a, b):
    w = np.linspace(-1, 1, 8).reshape(4, 2)
    x = Tensor(xv, requires_grad=True)
    grads = []
    for f in (lambda: (x @ Tensor(w)).tanh().sum(), lambda: (x * x).exp().mean()):
        x.zero_grad()
        f().backward()
        grads.append(x.grad.copy())
    x.zero_grad()
    ((x @ Tensor(w)).tanh().sum() * a + (x * x).exp().mean() * b).backward()
    assert np.allclose(x.grad, a * grads[0] + b * grads[1], atol=1e-12, rtol=1e-12)


def test_trace_is_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = ((x @ x).tanh() * 2.0).sum()
    rec = trace(loss)
    recorded = {e.output for e in rec}  # constants are not part of the record
    seen = set()
    for entry in rec:
        assert all(i in seen for i in entry.inputs if i in recorded)
        seen.add(entry.output)
    assert rec[-1].output == loss.node_id


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(4, 6)))
    f = lambda: ad.row_softmax(ad.l2_normalize(x) @ x.T).data
    assert np.array_equal(f(), f())


def test_finite_difference_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    assert finite_difference_check(lambda: x * x, [x]) <= 1e-9
    x.zero_grad()
    (x * x).backward()
    assert np.isclose(x.grad, 6.0)


def test_finite_difference_detects_wrong_rule(monkeypatch):
    rule = ad.BACKWARD_RULES["tanh"]
    monkeypatch.setitem(ad.BACKWARD_RULES, "tanh", lambda g, out: tuple(-v for v in rule(g, out)))
    x = Tensor(np.array([0.2, -0.4]), requires_grad=True)
    assert finite_difference_check(lambda: x.tanh().sum(), [x]) > 1.0


def test_finite_difference_rejects_nonfinite():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises((FloatingPointError, ValueError)):
        finite_difference_check(lambda: x.log().sum(), [x])
