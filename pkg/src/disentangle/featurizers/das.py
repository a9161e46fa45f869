"""Distributed alignment search with the reduced k x n parameterization."""

from __future__ import annotations

import torch

from ..tensor import complete_basis, qr_orthonormalize, seeded_uniform
from .base import BasisFeaturizer
from .train import InterchangeConfig, cache_tuples, train_interchange


class DasFeaturizer(BasisFeaturizer):
    """Rows of ``w`` are the k learned directions; the rest of the rotation
    is an orthonormal completion, so the feature set is the first k dims."""

    method = "das"

    def __init__(self, w: torch.Tensor, multi_task: bool = False):
        super().__init__(complete_basis(w))
        self.w = w.detach().to(torch.float32)
        self.k = w.shape[0]
        self.method = "mdas" if multi_task else "das"

    def intervene(self, base, source, features):
        if features.numel() == self.k and torch.equal(features, torch.arange(self.k)):
            if self.k == self.n:
                return source
            return base + (source @ self.w.T - base @ self.w.T) @ self.w
        return super().intervene(base, source, features)

    def tensors(self):
        return {"w": self.w}


def fit_das(
    model,
    tb,
    layer: int,
    k: int,
    multi_task: bool = False,
    cfg: InterchangeConfig | None = None,
) -> DasFeaturizer:
    """Learn k orthonormal rows W; splice is base + W^T W (source - base)."""
    cfg = cfg or InterchangeConfig()
    cached = cache_tuples(model, tb, layer)
    n = cached.source.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    gen = torch.Generator().manual_seed(cfg.seed)
    w = qr_orthonormalize(seeded_uniform((k, n), n, gen)).requires_grad_()

    def edit(base, source, step):
        return base + (source @ w.T - base @ w.T) @ w

    def renorm(step):
        with torch.no_grad():
            w.copy_(qr_orthonormalize(w))

    train_interchange(model, cached, edit, [w], cfg, multi_task, after_step=renorm)
    return DasFeaturizer(w.detach(), multi_task)
