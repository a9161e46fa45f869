"""GetVals, GetFeature and interchange interventions at a residual-stream site.

A model here is anything exposing ``n_layers``, ``d_model``,
``site_state(batch, layer)``, ``logits_from_state(state, vectors)`` and
``clean_logits(batch)``; both the micro-LM and the planted oracle qualify.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .batch import PromptBatch, PromptFactory
from .featurizers.base import Featurizer, IdentityFeaturizer
from .tokenizer import Tokenizer
from .world import InterventionTuple, World


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationSite:
    """Residual stream entering block ``layer``, at the last entity token."""

    layer: int

    def check(self, model) -> None:
        if not 0 <= self.layer < model.n_layers:
            raise InterventionError(f"layer {self.layer} outside [0, {model.n_layers})")


class FeatureHandle:
    def __init__(self, featurizer: Featurizer, features, site: ActivationSite):
        idx = torch.as_tensor(list(features) if not torch.is_tensor(features) else features, dtype=torch.long)
        idx = idx.reshape(-1)
        if len(set(idx.tolist())) != idx.numel():
            raise InterventionError("feature indices must be unique")
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= featurizer.dim):
            raise InterventionError(f"feature index outside [0, {featurizer.dim})")
        self.featurizer = featurizer
        self.features = torch.sort(idx).values
        self.site = site

    @property
    def k(self) -> int:
        return int(self.features.numel())

    def with_features(self, features) -> "FeatureHandle":
        return FeatureHandle(self.featurizer, features, self.site)

    def edit(self, base: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        return self.featurizer.intervene(base, source, self.features)

    def check(self, model) -> None:
        self.site.check(model)
        if self.featurizer.n != model.d_model:
            raise InterventionError(f"featurizer expects {self.featurizer.n} dims, site has {model.d_model}")


def full_rep_handle(d_model: int, site: ActivationSite) -> FeatureHandle:
    return FeatureHandle(IdentityFeaturizer(d_model), range(d_model), site)


def empty_handle(d_model: int, site: ActivationSite) -> FeatureHandle:
    return FeatureHandle(IdentityFeaturizer(d_model), [], site)


@torch.no_grad()
def get_vals(model, batch: PromptBatch, site: ActivationSite) -> torch.Tensor:
    site.check(model)
    return model.site_state(batch, site.layer).vectors


@torch.no_grad()
def get_feature(model, batch: PromptBatch, handle: FeatureHandle) -> torch.Tensor:
    handle.check(model)
    feats = handle.featurizer.encode(get_vals(model, batch, handle.site))
    return feats[:, handle.features]


def intervened_logits(model, handle: FeatureHandle, base: PromptBatch, source: PromptBatch) -> torch.Tensor:
    """Next-token logits for ``base`` with F_A taken from a clean pass on ``source``."""
    handle.check(model)
    if len(base) != len(source):
        raise InterventionError("base and source batches differ in size")
    src = model.site_state(source, handle.site.layer).vectors
    state = model.site_state(base, handle.site.layer)
    return model.logits_from_state(state, handle.edit(state.vectors, src))


@torch.no_grad()
def interchange_intervene(model, handle: FeatureHandle, base: PromptBatch, source: PromptBatch) -> torch.Tensor:
    """Greedy next token after the interchange; lowest id wins ties."""
    return intervened_logits(model, handle, base, source).argmax(-1)


@torch.no_grad()
def full_rep_intervene(model, site: ActivationSite, base: PromptBatch, source: PromptBatch) -> torch.Tensor:
    return interchange_intervene(model, full_rep_handle(model.d_model, site), base, source)


@torch.no_grad()
def clean_predictions(model, batch: PromptBatch) -> torch.Tensor:
    return model.clean_logits(batch).argmax(-1)


@torch.no_grad()
def interchange_generate(model, handle: FeatureHandle, base_prompt, source_prompt, max_new: int) -> list[int]:
    """Multi-token greedy continuation under an interchange (micro-LM only)."""
    from .lm import Hook, decode_greedy

    handle.check(model)
    src_ids = torch.tensor(source_prompt.ids)[None]
    src_vec = {}

    def grab(v):
        src_vec["v"] = v

    model(src_ids, [Hook(handle.site.layer, source_prompt.entity_last, grab)])

    def write(v):
        return handle.edit(v, src_vec["v"])

    return decode_greedy(model, base_prompt.ids, max_new, [Hook(handle.site.layer, base_prompt.entity_last, write)])


# tuple batches ------------------------------------------------------------------


@dataclass
class TupleBatch:
    tuples: list[InterventionTuple]
    base: PromptBatch
    source: PromptBatch
    labels: torch.Tensor  # first token of y

    def __len__(self) -> int:
        return len(self.tuples)

    def select(self, idx) -> "TupleBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TupleBatch(
            [self.tuples[i] for i in idx.tolist()], self.base.select(idx), self.source.select(idx), self.labels[idx]
        )


def tuple_batch(world: World, tokenizer: Tokenizer, tuples: list[InterventionTuple], factory=None) -> TupleBatch:
    factory = factory or PromptFactory(world, tokenizer)
    base = factory.batch([(t.base_template, t.base_entity) for t in tuples])
    source = factory.batch([(t.source_template, t.source_entity) for t in tuples])
    labels = torch.tensor([tokenizer.value_token(t.label) for t in tuples], dtype=torch.long)
    return TupleBatch(list(tuples), base, source, labels)


@torch.no_grad()
def predict_tuples(model, handle: FeatureHandle | None, tb: TupleBatch, chunk: int = 256) -> torch.Tensor:
    """Greedy first token for every tuple; ``handle=None`` means no intervention."""
    out = []
    for s in range(0, len(tb), chunk):
        sub = tb.select(range(s, min(s + chunk, len(tb))))
        if handle is None:
            out.append(clean_predictions(model, sub.base))
        else:
            out.append(interchange_intervene(model, handle, sub.base, sub.source))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def dump_traces(path: str | Path, tb: TupleBatch, predictions: torch.Tensor, tokenizer: Tokenizer) -> None:
    from .checkpoint import atomic_write_text

    lines = []
    for t, p in zip(tb.tuples, predictions.tolist()):
        rec = {
            "x": t.base_text,
            "x_source": t.source_text,
            "A*": t.target,
            "y": t.label,
            "prediction": tokenizer.vocab[p],
            "kind": t.kind,
        }
        lines.append(json.dumps(rec, sort_keys=True) + "\n")
    atomic_write_text(path, "".join(lines))
