"""L1-regularized multinomial logistic regression for picking feature dims."""

from __future__ import annotations

import numpy as np


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(1, keepdims=True)


def fit_l1_logistic(x, labels, C: float, max_iter: int = 1000, tol: float = 1e-6):
    """Minimize sum_i CE_i + (1/C) * |W|_1 by accelerated proximal gradient.

    Same objective as sklearn's ``LogisticRegression(penalty="l1", C=C)``
    with a multinomial loss; the intercept is not penalized. Returns
    (W [classes x dims], b [classes], classes).
    """
    x = np.asarray(x, dtype=np.float64)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("L1 selection needs at least two classes")
    n, d = x.shape
    k = len(classes)
    onehot = np.eye(k)[y]
    # scaled by 1/n: mean CE + lam * |W|_1
    lam = 1.0 / (C * n)
    xa = np.hstack([x, np.ones((n, 1))])
    lipschitz = 0.5 * np.linalg.norm(xa, 2) ** 2 / n + 1e-12
    step = 1.0 / lipschitz

    def objective(theta):
        z = xa @ theta
        z = z - z.max(1, keepdims=True)
        ce = -(z * onehot).sum(1) + np.log(np.exp(z).sum(1))
        return ce.mean() + lam * np.abs(theta[:d]).sum()

    def prox(theta):
        out = theta.copy()
        w = out[:d]
        out[:d] = np.sign(w) * np.maximum(np.abs(w) - step * lam, 0.0)
        return out

    theta = np.zeros((d + 1, k))
    mom = theta.copy()
    t = 1.0
    prev = objective(theta)
    for _ in range(max_iter):
        grad = xa.T @ (_softmax(xa @ mom) - onehot) / n
        new = prox(mom - step * grad)
        cur = objective(new)
        if cur > prev:  # restart momentum
            mom, t = theta.copy(), 1.0
            grad = xa.T @ (_softmax(xa @ mom) - onehot) / n
            new = prox(mom - step * grad)
            cur = objective(new)
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        mom = new + ((t - 1) / t_next) * (new - theta)
        theta, t = new, t_next
        if abs(prev - cur) <= tol * max(1.0, abs(prev)):
            prev = cur
            break
        prev = cur
    return theta[:d].T, theta[d], classes


def select_features_l1(x, labels, C: float = 1.0, eps: float = 1e-3, **kw) -> np.ndarray:
    """Dims whose largest absolute class weight exceeds ``eps``."""
    if np.isinf(eps):
        return np.zeros(0, dtype=np.int64)
    w, _, _ = fit_l1_logistic(x, labels, C, **kw)
    return np.flatnonzero(np.abs(w).max(0) > eps).astype(np.int64)
