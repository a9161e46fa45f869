from __future__ import annotations

import numpy as np
import torch

from ..lm import DivergenceError
from ..tensor import seeded_uniform
from .base import Featurizer


class SaeFeaturizer(Featurizer):
    """Single-layer sparse autoencoder; f = ReLU(W1 (x - b2) + b1), x' = W2 f + b2.

    Not exactly invertible. By default the interchange edit keeps the base
    reconstruction residual; ``restore_residual=False`` decodes the edited
    code directly.
    """

    method = "sae"
    exact = False

    def __init__(self, w1, b1, w2, b2, recon_error: float = float("nan"), active_fraction: float = float("nan")):
        self.w1, self.b1, self.w2, self.b2 = (t.detach().to(torch.float32) for t in (w1, b1, w2, b2))
        self.dim, self.n = self.w1.shape
        self.recon_error = recon_error
        self.active_fraction = active_fraction
        self.restore_residual = True

    def encode(self, x):
        return torch.relu((x - self.b2) @ self.w1.T + self.b1)

    @property
    def decoder(self):
        return self.w2

    @property
    def offset(self):
        return self.b2

    def intervene(self, base, source, features):
        if features.numel() == 0:
            return base
        if self.restore_residual:
            return super().intervene(base, source, features)
        f = self.encode(base)
        f[:, features] = self.encode(source)[:, features]
        return self.decode(f)

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def params(self):
        return {"recon_error": self.recon_error, "active_fraction": self.active_fraction}


def relative_recon_error(sae: SaeFeaturizer, x: torch.Tensor) -> float:
    with torch.no_grad():
        r = sae.decode(sae.encode(x))
        return float(torch.linalg.vector_norm(r - x) / torch.linalg.vector_norm(x))


def fit_sae(
    activations,
    m: int | None = None,
    l1: float = 1e-3,
    steps: int = 3000,
    lr: float = 3e-3,
    batch_size: int = 128,
    seed: int = 0,
) -> SaeFeaturizer:
    """Minimize mean ||x - x'||_2 + l1 * mean ||f||_1; default m = 4n."""
    x = torch.as_tensor(activations, dtype=torch.float32).detach()
    n_samples, n = x.shape
    m = 4 * n if m is None else m
    if m < n:
        raise ValueError(f"latent dim {m} must be >= input dim {n}")
    gen = torch.Generator().manual_seed(seed)
    w1 = seeded_uniform((m, n), n, gen).requires_grad_()
    w2 = seeded_uniform((n, m), m, gen).requires_grad_()
    b1 = torch.zeros(m, requires_grad=True)
    b2 = x.mean(0).clone().requires_grad_()
    opt = torch.optim.Adam([w1, b1, w2, b2], lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(1, steps + 1):
        idx = torch.from_numpy(rng.integers(0, n_samples, size=min(batch_size, n_samples)))
        xb = x[idx]
        f = torch.relu((xb - b2) @ w1.T + b1)
        rec = f @ w2.T + b2
        loss = torch.linalg.vector_norm(xb - rec, dim=1).mean() + l1 * f.abs().sum(1).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(step, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    sae = SaeFeaturizer(w1, b1, w2, b2)
    with torch.no_grad():
        sae.recon_error = relative_recon_error(sae, x)
        sae.active_fraction = float((sae.encode(x) > 0).float().mean())
    return sae
