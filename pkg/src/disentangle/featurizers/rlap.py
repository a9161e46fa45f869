from __future__ import annotations

import numpy as np
import torch

from ..tensor import complete_basis, qr_orthonormalize, seeded_uniform
from .base import BasisFeaturizer


class RlapFeaturizer(BasisFeaturizer):
    """Adversarially erased rowspace W followed by an orthonormal completion.

    The feature set is the first k coordinates, i.e. the rowspace of W.
    """

    method = "rlap"

    def __init__(self, w: torch.Tensor, probe: torch.Tensor | None = None):
        super().__init__(complete_basis(w))
        self.w = w.detach().to(torch.float32)
        self.k = w.shape[0]
        self.probe = probe

    def tensors(self):
        out = {"w": self.w, "basis": self.basis}
        if self.probe is not None:
            out["probe"] = self.probe
        return out


def fantope_project(p: torch.Tensor, k: int) -> torch.Tensor:
    """Nearest (Frobenius) matrix with eigenvalues in [0, 1] summing to k."""
    sym = (p + p.T) / 2
    vals, vecs = torch.linalg.eigh(sym.to(torch.float64))
    lo, hi = float(vals.min()) - 1.0, float(vals.max())
    for _ in range(60):
        mid = (lo + hi) / 2
        if float((vals - mid).clamp(0, 1).sum()) > k:
            lo = mid
        else:
            hi = mid
    clipped = (vals - (lo + hi) / 2).clamp(0, 1)
    return ((vecs * clipped) @ vecs.T).to(p.dtype)


def top_rows(p: torch.Tensor, k: int) -> torch.Tensor:
    """Orthonormal k x n rows spanning the top-k eigenvectors of symmetric ``p``."""
    _, vecs = torch.linalg.eigh(((p + p.T) / 2).to(torch.float64))
    w = vecs[:, -k:].flip(1).T
    # sign convention: largest-magnitude entry of each row is positive
    pivot = w.abs().argmax(1)
    w = w * torch.sign(w[torch.arange(k), pivot])[:, None]
    return qr_orthonormalize(w.to(p.dtype))


def fit_rlap(
    activations,
    labels,
    k: int,
    iterations: int = 100,
    lr_probe: float = 1e-2,
    lr_w: float = 5e-2,
    batch_size: int = 256,
    seed: int = 0,
) -> RlapFeaturizer:
    """min over probe, max over P of CE(probe((I - P) x), label).

    P is the relaxed projection of the reference R-LACE solver: after each
    ascent step it is projected back onto {0 <= P <= I, tr P = k}. An
    iteration is one shuffled pass over the data with one probe step then one
    P step per minibatch. W is read off as the top-k eigenvectors of P
    averaged over the second half of the iterations.
    """
    x = torch.as_tensor(activations, dtype=torch.float32).detach()
    n_samples, n = x.shape
    if k >= n:
        raise ValueError(f"rank {k} must be below dimension {n}")
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("RLAP needs at least two classes")
    y = torch.from_numpy(y.astype(np.int64))
    gen = torch.Generator().manual_seed(seed)
    # isotropic start: directions the adversary never needs keep equal weight
    p = torch.full((n,), k / n).diag().requires_grad_()
    theta = seeded_uniform((len(classes), n), n, gen).requires_grad_()
    bias = torch.zeros(len(classes), requires_grad=True)
    opt_probe = torch.optim.Adam([theta, bias], lr=lr_probe)
    opt_p = torch.optim.SGD([p], lr=lr_w, maximize=True)
    rng = np.random.default_rng(seed)
    size = min(batch_size, n_samples)
    avg, n_avg = torch.zeros(n, n), 0
    for it in range(iterations):
        order = rng.permutation(n_samples)
        for start in range(0, n_samples - size + 1, size):
            idx = torch.from_numpy(order[start : start + size])
            xb, yb = x[idx], y[idx]

            erased = xb - xb @ p.detach()
            loss = torch.nn.functional.cross_entropy(erased @ theta.T + bias, yb)
            opt_probe.zero_grad()
            loss.backward()
            opt_probe.step()

            erased = xb - xb @ p
            loss = torch.nn.functional.cross_entropy(erased @ theta.detach().T + bias.detach(), yb)
            opt_p.zero_grad()
            loss.backward()
            opt_p.step()
            with torch.no_grad():
                p.copy_(fantope_project(p, k))
        # iterate averaging over the second half damps the min-max oscillation
        if it >= iterations // 2:
            avg += p.detach()
            n_avg += 1
    return RlapFeaturizer(top_rows(avg / n_avg, k), theta.detach())


def erase(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return x - (x @ w.T) @ w
