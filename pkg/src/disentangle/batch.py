"""Padded prompt batches shared by the micro-LM and the planted oracle."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .tokenizer import Prompt, Tokenizer
from .world import Template, World


@dataclass
class PromptBatch:
    ids: torch.Tensor  # [B, T], right padded
    lengths: torch.Tensor  # [B]
    ent_pos: torch.Tensor  # [B], last entity token
    entity: torch.Tensor  # [B], index into world.entities
    query: torch.Tensor  # [B], index into world.attributes, -1 for entity prompts
    template: torch.Tensor  # [B], index into world.templates

    def __len__(self) -> int:
        return self.ids.shape[0]

    def select(self, idx) -> "PromptBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        lengths = self.lengths[idx]
        width = int(lengths.max()) if len(idx) else 0
        return PromptBatch(
            self.ids[idx, :width], lengths, self.ent_pos[idx], self.entity[idx], self.query[idx], self.template[idx]
        )

    @property
    def last(self) -> torch.Tensor:
        return self.lengths - 1


def collate(prompts: list[Prompt], pad: int, entity=None, query=None, template=None) -> PromptBatch:
    n = len(prompts)
    width = max((len(p.ids) for p in prompts), default=0)
    ids = torch.full((n, width), pad, dtype=torch.long)
    for i, p in enumerate(prompts):
        ids[i, : len(p.ids)] = torch.tensor(p.ids, dtype=torch.long)

    def col(x):
        return torch.full((n,), -1, dtype=torch.long) if x is None else torch.as_tensor(x, dtype=torch.long)

    return PromptBatch(
        ids=ids,
        lengths=torch.tensor([len(p.ids) for p in prompts], dtype=torch.long),
        ent_pos=torch.tensor([p.entity_last for p in prompts], dtype=torch.long),
        entity=col(entity),
        query=col(query),
        template=col(template),
    )


class PromptFactory:
    """Renders (template, entity) pairs of one world into batches."""

    def __init__(self, world: World, tokenizer: Tokenizer):
        self.world = world
        self.tok = tokenizer
        self.ent_index = {e: i for i, e in enumerate(world.entities)}
        self.attr_index = {a: i for i, a in enumerate(world.attributes)}
        self.tmpl_index = {t.id: i for i, t in enumerate(world.templates)}
        self._cache: dict[tuple[str, str], Prompt] = {}

    def prompt(self, template: Template | str, entity: str) -> Prompt:
        tid = template if isinstance(template, str) else template.id
        key = (tid, entity)
        if key not in self._cache:
            self._cache[key] = self.tok.render(self.world.template(tid).text, entity)
        return self._cache[key]

    def batch(self, pairs: list[tuple[str, str]]) -> PromptBatch:
        prompts = [self.prompt(t, e) for t, e in pairs]
        query = [
            -1 if self.world.template(t).attribute is None else self.attr_index[self.world.template(t).attribute]
            for t, _ in pairs
        ]
        return collate(
            prompts,
            self.tok.pad,
            entity=[self.ent_index.get(e, -1) for _, e in pairs],
            query=query,
            template=[self.tmpl_index[t] for t, _ in pairs],
        )
