"""Differentiable binary masking over neurons (DBM / multi-task MDBM)."""

from __future__ import annotations

import math

import torch

from .base import IdentityFeaturizer
from .train import InterchangeConfig, cache_tuples, train_interchange


class MaskFeaturizer(IdentityFeaturizer):
    method = "dbm"

    def __init__(self, logits: torch.Tensor, temperature: float, eps: float = 0.1, multi_task: bool = False):
        super().__init__(logits.shape[0])
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.logits = logits.detach().to(torch.float32)
        self.temperature = float(temperature)
        self.eps = eps
        self.method = "mdbm" if multi_task else "dbm"

    def probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.logits / self.temperature)

    def selected(self, eps: float | None = None) -> torch.Tensor:
        eps = self.eps if eps is None else eps
        return torch.nonzero(1 - self.probabilities() < eps).flatten()

    def tensors(self):
        return {"mask_logits": self.logits}

    def params(self):
        return {"temperature": self.temperature, "eps": self.eps}


def temperature_at(step: int, steps: int, start: float = 1e-2, end: float = 1e-7) -> float:
    if steps <= 1:
        return end
    return start * (end / start) ** (step / (steps - 1))


def fit_dbm(
    model,
    tb,
    layer: int,
    multi_task: bool = False,
    lam: float | None = None,
    eps: float = 0.1,
    t_start: float = 1e-2,
    t_end: float = 1e-7,
    l1_on_logits: bool = False,
    cfg: InterchangeConfig | None = None,
) -> MaskFeaturizer:
    """Learn mask logits m; splice is (1 - s) * base + s * source, s = sigmoid(m / T).

    The sparsity penalty acts on s unless ``l1_on_logits``. Defaults: lambda
    1e-3 single-task, 0 multi-task.
    """
    cfg = cfg or InterchangeConfig(lr=1e-3)
    if lam is None:
        lam = 0.0 if multi_task else 1e-3
    cached = cache_tuples(model, tb, layer)
    n = cached.source.shape[1]
    # zero init keeps sigmoid(m / T) off its flat tails at the first temperatures
    m = torch.zeros(n, requires_grad=True)

    def edit(base, source, step):
        s = torch.sigmoid(m / temperature_at(step, cfg.steps, t_start, t_end))
        return (1 - s) * base + s * source

    def penalty(step):
        if lam == 0:
            return torch.zeros(())
        if l1_on_logits:
            return lam * m.abs().sum()
        return lam * torch.sigmoid(m / temperature_at(step, cfg.steps, t_start, t_end)).sum()

    train_interchange(model, cached, edit, [m], cfg, multi_task, penalty=penalty)
    if not all(math.isfinite(v) for v in m.detach().tolist()):
        raise FloatingPointError("mask logits diverged")
    return MaskFeaturizer(m.detach(), t_end, eps, multi_task)
