import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dotuda import tensor as T
from dotuda.errors import DegenerateVectorError, DimensionError, NonFiniteError
from dotuda.tensor import Parameter, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_selector():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    sel = Tensor(np.array([[1.0, 0], [0, 0]]))
    b = Tensor(np.array([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal((sel @ b).data, [[5, 6], [0, 0]])


def test_matmul_gradient_tight():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    err = T.grad_check(lambda xs: (xs[0] @ xs[1] * Tensor(w)).sum(), [a, b])
    assert err < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    out = T.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
    # 50-digit decimal evaluation of exp(i) / sum exp(j)
    expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
    np.testing.assert_allclose(T.softmax(Tensor(np.array([1.0, 2, 3]))).data, expected, rtol=1e-14)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        T.softmax(Tensor(np.array([1.0, np.nan])))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 5.0)), gain, bias).data, np.zeros((1, 4)))
    b = np.array([0.5, -1.0, 2.0, 3.0])
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    np.testing.assert_array_equal(T.layer_norm(x, Tensor(np.zeros(4)), Tensor(b)).data, np.tile(b, (3, 1)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 6)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 6)))
    assert T.grad_check(lambda xs: (T.layer_norm(xs[0], xs[1], xs[2]) * w).sum(), [x, g, b]) < 1e-5


def test_layer_norm_errors():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_cross_entropy_examples():
    assert abs(T.cross_entropy_with_logits(Tensor(np.zeros((1, 4))), [0]).item() - 1.3862943611) < 1e-10
    assert T.cross_entropy_with_logits(Tensor(np.array([[10.0, -10.0]])), [0]).item() < 1e-4


def _scalar_cross_entropy(logits, labels):
    """Loop-level oracle: value and gradient of mean cross-entropy."""
    b, k = len(logits), len(logits[0])
    total, grad = [], [[0.0] * k for _ in range(b)]
    for i in range(b):
        m = max(logits[i])
        z = math.fsum(math.exp(v - m) for v in logits[i])
        total.append(m + math.log(z) - logits[i][labels[i]])
        for j in range(k):
            p = math.exp(logits[i][j] - m) / z
            grad[i][j] = (p - (1.0 if j == labels[i] else 0.0)) / b
    return math.fsum(total) / b, grad


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 3)) * 2
    labels = [0, 2, 1, 1, 0]
    value, grad = _scalar_cross_entropy(logits.tolist(), labels)
    x = Tensor(logits, requires_grad=True)
    loss = T.cross_entropy_with_logits(x, labels)
    loss.backward()
    assert abs(loss.item() - value) < 1e-13
    np.testing.assert_allclose(x.grad, grad, atol=1e-15)


def test_cross_entropy_index_error():
    with pytest.raises(IndexError):
        T.cross_entropy_with_logits(Tensor(np.zeros((2, 3))), [0, 3])


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor(np.array([3.0, 4.0]))).data, [0.6, 0.8], atol=1e-15)
    unit = np.array([[0.6, 0.8], [1.0, 0.0]])
    assert np.max(np.abs(T.l2_normalize(Tensor(unit)).data - unit)) < 1e-12
    x = Tensor(np.random.default_rng(4).standard_normal((1, 5)), requires_grad=True)
    w = Tensor(np.random.default_rng(5).standard_normal((1, 5)))
    assert T.grad_check(lambda t: (T.l2_normalize(t) * w).sum(), x) < 1e-5


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateVectorError):
        T.l2_normalize(Tensor(np.array([[1.0, 1.0], [1e-14, 0.0]])))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_l2_normalize_rows_unit(x):
    norms = np.linalg.norm(x, axis=1)
    x = x[norms > 1e-6]
    if x.shape[0] == 0:
        return
    out = T.l2_normalize(Tensor(x)).data
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) < 1e-12)


def test_sgd_plain_step():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    T.sgd_step([p], [None], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_pure_momentum():
    p = Parameter(np.array([2.0]))
    p.grad = np.zeros(1)
    vel = [np.array([1.0])]
    T.sgd_step([p], vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert 2.0 - p.data[0] == pytest.approx(0.09, abs=1e-15)


def test_sgd_two_steps_match_scalar_simulation():
    theta, v = 0.7, None
    lr, mom, wd, scale = 0.05, 0.9, 1e-3, 10.0
    grads = [0.3, -0.2]
    for g in grads:
        step = g + wd * theta
        v = step if v is None else mom * v + step
        theta -= lr * scale * v
    p = Parameter(np.array([0.7]), lr_scale=scale)
    opt = T.SGD([p], lr, mom, wd)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(theta, abs=1e-15)


def test_sgd_missing_gradient_names_parameter():
    p = Parameter(np.ones(2), name="blocks.0.attn.wq")
    with pytest.raises(ValueError, match="blocks.0.attn.wq"):
        T.sgd_step([p], [None], 0.1, 0.9, 0.0)


def test_parameter_lr_scale_positive():
    with pytest.raises(ValueError):
        Parameter(np.ones(1), lr_scale=0.0)


def test_grad_check_quadratic_and_composite():
    x = Tensor(np.array([1.0, 2, 3]), requires_grad=True)
    assert T.grad_check(lambda t: (t * t).sum(), x) < 1e-8
    v = Tensor(np.array([0.3, -1.0, 2.0]))
    assert T.grad_check(lambda t: (T.softmax(t) * v).sum(), x) < 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_neighborhood():
    x = Tensor(np.array([1e-6, 1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        T.grad_check(lambda t: T.log(t).sum(), x, h=1e-5)


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 5))
    g, b = rng.standard_normal(5), rng.standard_normal(5)

    def run():
        t = T.layer_norm(Tensor(x), Tensor(g), Tensor(b))
        return T.log_softmax(T.gelu(t) @ Tensor(x.T)).data.tobytes()

    assert run() == run()


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    for out in (T.softmax(t), T.log_softmax(t), T.gelu(t), T.layer_norm(t, Tensor(np.ones(x.shape[1])),
                                                                        Tensor(np.zeros(x.shape[1])))):
        assert np.all(np.isfinite(out.data))
    assert math.isfinite(T.cross_entropy_with_logits(t, np.zeros(x.shape[0], dtype=int)).item())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_shapes_match_data(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3,)), requires_grad=True)
    (T.gelu(a * b) @ Tensor(rng.standard_normal((3, 2)))).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
