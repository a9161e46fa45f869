"""Shared loop for featurizers trained through interchange interventions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..lm import DivergenceError

log = logging.getLogger(__name__)


def multitask_loss(cause: torch.Tensor, iso: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
    """Cause loss plus the uniform average of per-distractor iso losses."""
    if not iso:
        return cause
    return cause + sum(iso.values()) / len(iso)


@dataclass
class InterchangeConfig:
    steps: int = 600
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0


@dataclass
class CachedTuples:
    """Site states and source vectors precomputed under the frozen model."""

    state: object
    source: torch.Tensor
    labels: torch.Tensor
    kinds: list[str]
    targets: list[str]


@torch.no_grad()
def cache_tuples(model, tb, layer: int) -> CachedTuples:
    return CachedTuples(
        state=model.site_state(tb.base, layer),
        source=model.site_state(tb.source, layer).vectors,
        labels=tb.labels,
        kinds=[t.kind for t in tb.tuples],
        targets=[t.target for t in tb.tuples],
    )


def train_interchange(
    model,
    cached: CachedTuples,
    edit: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    params: list[torch.Tensor],
    cfg: InterchangeConfig,
    multi_task: bool,
    penalty: Callable[[int], torch.Tensor] | None = None,
    after_step: Callable[[int], None] | None = None,
) -> list[float]:
    """Minimize CE of intervened predictions; LM weights stay frozen.

    ``edit(base, source, step)`` builds the spliced site vector. Each step
    draws a cause minibatch and, for multi-task runs, an iso minibatch whose
    losses are averaged per distractor attribute.
    """
    cause_idx = np.array([i for i, k in enumerate(cached.kinds) if k == "cause"])
    iso_idx = np.array([i for i, k in enumerate(cached.kinds) if k == "iso"])
    if len(cause_idx) == 0:
        raise ValueError("no cause tuples to train on")
    if multi_task and len(iso_idx) == 0:
        raise ValueError("multi-task training needs iso tuples")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []

    def batch_loss(idx: np.ndarray, step: int) -> torch.Tensor:
        sub = cached.state.select(idx)
        vec = edit(sub.vectors, cached.source[idx], step)
        logits = model.logits_from_state(sub, vec)
        return torch.nn.functional.cross_entropy(logits, cached.labels[idx], reduction="none")

    for step in range(cfg.steps):
        ci = rng.choice(cause_idx, size=min(cfg.batch_size, len(cause_idx)), replace=False)
        if multi_task:
            ii = rng.choice(iso_idx, size=min(cfg.batch_size, len(iso_idx)), replace=False)
            both = np.concatenate([ci, ii])
            per = batch_loss(both, step)
            cause = per[: len(ci)].mean()
            groups: dict[str, list[int]] = {}
            for j, i in enumerate(ii):
                groups.setdefault(cached.targets[i], []).append(len(ci) + j)
            iso = {a: per[torch.tensor(js)].mean() for a, js in sorted(groups.items())}
            loss = multitask_loss(cause, iso)
        else:
            loss = batch_loss(ci, step).mean()
        if penalty is not None:
            loss = loss + penalty(step)
        if not torch.isfinite(loss):
            raise DivergenceError(step, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if after_step is not None:
            after_step(step)
        history.append(loss.item())
    return history
