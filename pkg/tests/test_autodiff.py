import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shield.autodiff import (
    AdamState,
    Param,
    Tensor,
    adam_step,
    add,
    bce_loss,
    concat,
    grad_check,
    hadamard,
    linear,
    matmul,
    mean_pool,
    relu,
    sigmoid,
    transpose,
    tsum,
    vconcat,
)
from shield.errors import DomainError, ShapeError, UsageError


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


# ---------------------------------------------------------------------------
# forward values


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    out = matmul(Tensor(a), Tensor(np.eye(4)))
    assert np.allclose(out.data, a, rtol=0, atol=0)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        assert rel_err(matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    c = rng.standard_normal((5, 2))
    left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
    assert rel_err(left, right) < 1e-9


def test_linear_hand_case():
    w = Param(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    b = Param(np.array([1.0, 1.0, 1.0]))
    out = linear(Tensor([2.0, 3.0]), w, b)
    assert np.array_equal(out.data, [3.0, 4.0, 6.0])


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(Tensor([1.0, 2.0, 3.0]), Param(np.zeros((3, 2))), Param(np.zeros(3)))


def test_hadamard_and_shape_error():
    out = hadamard(Tensor([1.0, -2.0, 3.0]), Tensor([4.0, 5.0, -6.0]))
    assert np.array_equal(out.data, [4.0, -10.0, -18.0])
    with pytest.raises(ShapeError, match=r"\(3,\).*\(2,\)"):
        hadamard(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0]))


def test_mean_pool_matches_column_sums():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((6, 4))
    pooled = mean_pool(Tensor(h)).data
    for j in range(4):
        s = 0.0
        for i in range(6):
            s += h[i, j]
        assert abs(pooled[j] - s / 6) < 1e-12


def test_mean_pool_empty_errors():
    with pytest.raises(ShapeError, match="empty"):
        mean_pool(Tensor(np.zeros((0, 4))))


def test_mean_pool_row_permutation_bit_exact():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((17, 5))
    base = mean_pool(Tensor(h)).data
    for seed in range(20):
        perm = np.random.default_rng(seed).permutation(17)
        assert np.array_equal(mean_pool(Tensor(h[perm])).data, base)


def test_sigmoid_at_zero():
    assert sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_finite():
    lo = sigmoid(Tensor(-1e4)).item()
    hi = sigmoid(Tensor(1e4)).item()
    assert 0.0 <= lo < 1e-300 or lo == 0.0
    assert hi == 1.0 or (0.9999 < hi <= 1.0)


def test_relu():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_concat_order_and_grads():
    a = Param(np.array([1.0, 2.0]))
    b = Param(np.array([3.0]))
    out = concat([a, b])
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])
    tsum(hadamard(out, Tensor([1.0, 10.0, 100.0]))).backward()
    assert np.array_equal(a.grad, [1.0, 10.0])
    assert np.array_equal(b.grad, [100.0])


def test_vconcat_and_transpose():
    a = Param(np.array([[1.0, 2.0]]))
    b = Param(np.array([[3.0, 4.0], [5.0, 6.0]]))
    out = vconcat([a, b])
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    t = transpose(out)
    assert t.shape == (2, 3)
    tsum(hadamard(t, Tensor(np.arange(6.0).reshape(2, 3)))).backward()
    assert np.array_equal(a.grad, [[0.0, 3.0]])
    assert np.array_equal(b.grad, [[1.0, 4.0], [2.0, 5.0]])


def test_bce_at_zero_logit_is_ln2():
    assert abs(bce_loss(Tensor(0.0), 1).item() - math.log(2.0)) < 1e-15
    assert abs(bce_loss(Tensor(0.0), 0).item() - math.log(2.0)) < 1e-15


def test_bce_label_domain():
    with pytest.raises(DomainError):
        bce_loss(Tensor(0.3), 2)
    with pytest.raises(DomainError):
        bce_loss(Tensor(0.3), -1)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False), st.sampled_from([0, 1]))
def test_bce_stable_over_huge_logits(logit, label):
    loss = bce_loss(Tensor(logit), label).item()
    assert math.isfinite(loss)
    assert loss >= 0.0
    # large logit of the correct sign means a near-zero loss
    if logit > 100 and label == 1:
        assert loss < 1e-40


# ---------------------------------------------------------------------------
# gradients


def test_backward_linear_grads():
    x = np.array([2.0, -3.0, 0.5])
    w = Param(np.zeros((2, 3)))
    b = Param(np.zeros(2))
    tsum(linear(Tensor(x), w, b)).backward()
    assert np.array_equal(w.grad, np.vstack([x, x]))
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_backward_sigmoid_chain_at_zero():
    # y = sigmoid(w . x) with w . x == 0: dy/dw = 0.25 * x
    x = np.array([1.0, -2.0, 3.0])
    w = Param(np.zeros(3))
    sigmoid(matmul(w, Tensor(x))).backward()
    assert np.allclose(w.grad, 0.25 * x, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    w = Param(np.ones((2, 2)))
    with pytest.raises(UsageError):
        matmul(w, Tensor(np.ones((2, 2)))).backward()


def test_backward_accumulates_across_reuse():
    w = Param(np.array([3.0]))
    y = add(hadamard(w, w), w)  # w^2 + w -> dy/dw = 2w + 1 = 7
    tsum(y).backward()
    assert np.allclose(w.grad, [7.0])


def test_grad_check_square_function():
    x = Param(np.array([3.0]))
    err = grad_check(lambda: tsum(hadamard(x, x)), [x], eps=1e-5)
    assert err < 1e-8


def test_grad_check_constant_function():
    x = Param(np.array([1.0, 2.0]))
    err = grad_check(lambda: tsum(hadamard(Tensor([1.0]), Tensor([1.0]))), [x], eps=1e-5)
    assert err == 0.0


def primitive_losses():
    """One scalar loss per primitive op, each over its own fresh params."""
    rng = np.random.default_rng(11)
    a = Param(rng.standard_normal((3, 4)))
    b = Param(rng.standard_normal((4, 2)))
    v = Param(rng.standard_normal(4))
    u = Param(rng.standard_normal(4))
    w = Param(rng.standard_normal((2, 4)))
    bias = Param(rng.standard_normal(2))
    s = Param(rng.standard_normal(5) * 0.5)
    cases = [
        ("matmul", lambda: tsum(matmul(a, b)), [a, b]),
        ("dot", lambda: matmul(v, u), [v, u]),
        ("add", lambda: tsum(add(v, u)), [v, u]),
        ("hadamard", lambda: tsum(hadamard(v, u)), [v, u]),
        ("linear", lambda: tsum(linear(v, w, bias)), [v, w, bias]),
        ("mean_pool", lambda: tsum(hadamard(mean_pool(a), mean_pool(a))), [a]),
        ("relu", lambda: tsum(relu(s)), [s]),
        ("sigmoid", lambda: tsum(sigmoid(s)), [s]),
        ("concat", lambda: tsum(hadamard(concat([v, u]), concat([u, v]))), [v, u]),
        ("vconcat", lambda: tsum(matmul(vconcat([a, transpose(b)]), u)), [a, b, u]),
        ("scale", lambda: tsum(v * 2.5), [v]),
        ("bce", lambda: bce_loss(matmul(v, u), 1), [v, u]),
    ]
    return cases


@pytest.mark.parametrize("name,loss_fn,params", primitive_losses(), ids=lambda c: c if isinstance(c, str) else "")
def test_grad_check_primitives(name, loss_fn, params):
    assert grad_check(loss_fn, params, eps=1e-5) < 1e-6


def test_grad_check_rejects_bad_eps():
    x = Param(np.array([1.0]))
    with pytest.raises(DomainError):
        grad_check(lambda: tsum(x), [x], eps=0.0)


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_grad_leaves_params_unchanged():
    p = Param(np.array([1.0, -2.0]))
    state = AdamState([p])
    before = p.data.copy()
    adam_step([p], state)
    assert np.array_equal(p.data, before)


def test_adam_first_step_moves_against_gradient_sign():
    p = Param(np.array([0.5, -0.5, 2.0]))
    state = AdamState([p], lr=1e-3)
    p.grad[...] = np.array([3.0, -0.2, 1e-4])
    before = p.data.copy()
    adam_step([p], state)
    step = p.data - before
    # first bias-corrected step is -lr * g / (|g| + eps), i.e. roughly -lr * sign(g)
    assert np.allclose(step, -1e-3 * np.sign([3.0, -0.2, 1e-4]), rtol=1e-3)
    assert np.array_equal(p.grad, np.zeros(3))


def test_adam_descends_on_quadratic():
    p = Param(np.array([1.0, 1.0]))
    state = AdamState([p], lr=1e-2)
    norms = []
    for _ in range(100):
        loss = tsum(hadamard(p, p))
        norms.append(float(np.linalg.norm(p.data)))
        loss.backward()
        adam_step([p], state)
    norms.append(float(np.linalg.norm(p.data)))
    assert norms[-1] < norms[0]
    # averaged over windows the norm shrinks monotonically
    w = 10
    means = [np.mean(norms[i : i + w]) for i in range(0, 100, w)]
    assert all(m2 < m1 for m1, m2 in zip(means, means[1:]))


def test_adam_rejects_foreign_params():
    p, q = Param(np.array([1.0])), Param(np.array([1.0]))
    state = AdamState([p])
    with pytest.raises(UsageError):
        adam_step([q], state)


def test_training_step_deterministic():
    def run():
        rng = np.random.default_rng(42)
        p = Param(rng.standard_normal(4))
        state = AdamState([p], lr=1e-2)
        for _ in range(5):
            tsum(hadamard(p, p)).backward()
            adam_step([p], state)
        return p.data.copy()

    assert np.array_equal(run(), run())
