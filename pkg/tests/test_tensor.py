import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangle.tensor import (
    ContractError,
    DegeneracyError,
    DimensionError,
    backward,
    complete_basis,
    elementwise,
    matmul,
    orthogonality_error,
    qr_orthonormalize,
    softmax_cross_entropy,
    tensor,
)


def fd_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences in float64, independent of autograd."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def autograd(f, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    backward(f(t))
    return t.grad.numpy()


def rel_err(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-8))


def as_np_fn(f):
    return lambda x: float(f(torch.tensor(x, dtype=torch.float64)))


# matmul


def test_matmul_identity():
    out = matmul(tensor([[1.0, 0.0], [0.0, 1.0]]), tensor([[3.0], [4.0]]))
    assert out.tolist() == [[3.0], [4.0]]


def test_matmul_row_times_column():
    assert matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(DimensionError):
        matmul(torch.zeros(3), torch.zeros(3, 1))


def test_matmul_grads_match_fd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 2))
    bt = torch.tensor(b)
    fa = lambda t: (matmul(t, bt) * torch.tensor(c)).sum()
    assert rel_err(autograd(fa, a), fd_grad(as_np_fn(fa), a)) < 1e-4
    at = torch.tensor(a)
    fb = lambda t: (matmul(at, t) * torch.tensor(c)).sum()
    assert rel_err(autograd(fb, b), fd_grad(as_np_fn(fb), b)) < 1e-4


# elementwise


def test_relu_and_logistic_values():
    assert elementwise("relu", tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert float(elementwise("logistic", tensor(0.0))) == 0.5


def test_elementwise_rejects_general_broadcast():
    with pytest.raises(DimensionError):
        elementwise("add", torch.zeros(3, 1), torch.zeros(1, 3))
    # scalar with tensor is fine
    assert elementwise("mul", torch.ones(3), torch.tensor(2.0)).tolist() == [2.0, 2.0, 2.0]


def test_elementwise_contract():
    with pytest.raises(ContractError):
        elementwise("scale", torch.ones(2))
    with pytest.raises(ContractError):
        elementwise("tanh", torch.ones(2))
    with pytest.raises(ContractError):
        elementwise("add", torch.ones(2))


@pytest.mark.parametrize("op", ["mul", "add"])
def test_binary_grads_match_fd(op):
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=5), rng.normal(size=5)
    yt = torch.tensor(y)
    f = lambda t: (elementwise(op, t, yt) ** 2).sum()
    assert rel_err(autograd(f, x), fd_grad(as_np_fn(f), x)) < 1e-4


@pytest.mark.parametrize("op", ["relu", "logistic", "scale"])
def test_unary_grads_match_fd(op):
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    x[np.abs(x) < 0.05] += 0.2  # keep relu away from its kink
    f = lambda t: (elementwise(op, t, factor=1.7) * torch.arange(1.0, 7.0, dtype=torch.float64)).sum()
    assert rel_err(autograd(f, x), fd_grad(as_np_fn(f), x)) < 1e-4


# cross entropy


def test_ce_uniform_is_log_v():
    assert float(softmax_cross_entropy(torch.zeros(3, 4), [0, 2, 3])) == pytest.approx(math.log(4), abs=1e-6)


def test_ce_saturated_is_zero():
    logits = torch.zeros(1, 5)
    logits[0, 2] = 1000.0
    assert float(softmax_cross_entropy(logits, [2])) == pytest.approx(0.0, abs=1e-6)


def test_ce_matches_explicit_logsumexp():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 5)) * 3
    y = [1, 4]
    oracle = 0.0
    for row, t in zip(z, y):
        m = max(row)
        oracle += m + math.log(sum(math.exp(v - m) for v in row)) - row[t]
    oracle /= 2
    assert float(softmax_cross_entropy(torch.tensor(z, dtype=torch.float64), y)) == pytest.approx(oracle, abs=1e-5)


def test_ce_target_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(torch.zeros(2, 3), [0, 3])


def test_ce_grads_match_fd():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 4))
    f = lambda t: softmax_cross_entropy(t, [0, 3, 1])
    assert rel_err(autograd(f, z), fd_grad(as_np_fn(f), z)) < 1e-4


# backward


def test_backward_sum_and_square():
    x = torch.zeros(3, requires_grad=True)
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = torch.tensor(3.0, requires_grad=True)
    backward(y * y)
    assert float(y.grad) == 6.0


def test_backward_needs_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2)


def test_backward_leaves_frozen_params_alone():
    w = torch.ones(2, requires_grad=True)
    frozen = torch.ones(2)
    backward((w * frozen).sum())
    assert frozen.grad is None and w.grad is not None


def test_three_layer_mlp_grads_match_fd():
    rng = np.random.default_rng(5)
    x = torch.tensor(rng.normal(size=(4, 3)))
    w2 = torch.tensor(rng.normal(size=(5, 4)))
    w3 = torch.tensor(rng.normal(size=(4, 2)))
    w1 = rng.normal(size=(3, 5))

    def f(t):
        h = elementwise("logistic", matmul(x, t))
        h = elementwise("relu", matmul(h, w2))
        return softmax_cross_entropy(matmul(h, w3), [0, 1, 1, 0])

    assert rel_err(autograd(f, w1), fd_grad(as_np_fn(f), w1)) < 1e-4


# orthonormalization


def test_qr_axis_aligned():
    out = qr_orthonormalize(tensor([[2.0, 0.0], [0.0, 3.0]]))
    assert out.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_qr_identity_fixed_point():
    assert torch.equal(qr_orthonormalize(torch.eye(4)), torch.eye(4))


def test_qr_span_matches_hand_gram_schmidt():
    w = tensor([[1.0, 1.0], [1.0, 0.0]])
    q = qr_orthonormalize(w)
    # by hand: e1 = (1,1)/sqrt2, e2 = (1,-1)/sqrt2
    r2 = 1 / math.sqrt(2)
    assert torch.allclose(q, torch.tensor([[r2, r2], [r2, -r2]]), atol=1e-6)
    assert orthogonality_error(q) < 1e-5


def test_qr_projector_preserved_for_partial_rank():
    rng = np.random.default_rng(6)
    w = torch.tensor(rng.normal(size=(2, 5)), dtype=torch.float64)
    q = qr_orthonormalize(w)
    p_oracle = w.T @ torch.linalg.inv(w @ w.T) @ w
    assert torch.allclose(q.T @ q, p_oracle, atol=1e-10)


def test_qr_rank_deficient():
    with pytest.raises(DegeneracyError):
        qr_orthonormalize(tensor([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(DimensionError):
        qr_orthonormalize(torch.ones(3, 2))


def test_complete_basis_keeps_rows():
    w = qr_orthonormalize(torch.tensor([[1.0, 2.0, 0.0, 1.0]]))
    b = complete_basis(w)
    assert b.shape == (4, 4)
    assert torch.equal(b[:1], w)
    assert orthogonality_error(b) < 1e-5


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 6), extra=st.integers(0, 4), seed=st.integers(0, 10_000))
def test_qr_orthonormal_and_idempotent(k, extra, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(k, k + extra, generator=g)
    q = qr_orthonormalize(w)
    assert orthogonality_error(q) < 1e-5
    assert (qr_orthonormalize(q) - q).abs().max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shape=st.tuples(st.integers(1, 4), st.integers(1, 4)))
def test_fd_property_for_composite(seed, shape):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    c = torch.tensor(rng.normal(size=shape))
    f = lambda t: (elementwise("logistic", elementwise("mul", t, c)) * c).sum()
    assert rel_err(autograd(f, x), fd_grad(as_np_fn(f), x)) < 1e-4


def test_determinism():
    def run():
        g = torch.Generator().manual_seed(7)
        a = torch.randn(4, 4, generator=g)
        return qr_orthonormalize(matmul(a, a.T) + torch.eye(4))

    assert torch.equal(run(), run())
