"""Tiny pre-norm decoder-only transformer with residual-stream hooks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .batch import PromptBatch, PromptFactory
from .checkpoint import atomic_write_text, dump_json, load_tensors, save_tensors
from .tokenizer import Tokenizer
from .world import Split, World

log = logging.getLogger(__name__)


class SiteError(IndexError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class LmConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 0
    max_seq_len: int = 64
    seed: int = 0
    lr: float = 3e-3
    batch_size: int = 64
    max_steps: int = 6000
    eval_every: int = 500
    target_accuracy: float = 0.98
    warmup: int = 200
    mention_repeats: int = 4  # copies of each bare "<entity> <value>" mention
    mention_steps: int = 0  # leading steps that see only mentions
    entity_mask: bool = True  # staged name masking, see attention_masks
    read_layer: int = -1  # first block in which later tokens may read t_E; -1 means n_layers // 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        if self.entity_mask and not 1 <= self.read_at < self.n_layers:
            raise ValueError("read_layer must lie in [1, n_layers)")

    @property
    def read_at(self) -> int:
        return self.n_layers // 2 if self.read_layer < 0 else self.read_layer


@dataclass
class Hook:
    """Observe or replace the residual vector entering block ``layer``.

    ``position`` is an int or a per-row LongTensor. ``fn`` receives the
    [B, d] slice and returns a replacement or None.
    """

    layer: int
    position: int | torch.Tensor
    fn: Callable[[torch.Tensor], torch.Tensor | None]


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.norm1 = RMSNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.norm2 = RMSNorm(cfg.d_model)
        self.up = nn.Linear(cfg.d_model, cfg.d_ff)
        self.down = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x, mask=None):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        if mask is None:
            y = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            y = torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        y = y.transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        return x + self.down(torch.nn.functional.gelu(self.up(self.norm2(x))))


@dataclass
class LmSiteState:
    resid: torch.Tensor  # [B, T, d] entering block `layer`
    batch: PromptBatch
    layer: int

    @property
    def vectors(self) -> torch.Tensor:
        return self.resid[torch.arange(len(self.batch)), self.batch.ent_pos]

    def select(self, idx) -> "LmSiteState":
        idx = torch.as_tensor(idx, dtype=torch.long)
        sub = self.batch.select(idx)
        return LmSiteState(self.resid[idx, : sub.ids.shape[1]], sub, self.layer)


def attention_masks(ids: torch.Tensor, is_piece: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Causal masks [B, 1, T, T] for the two block stages.

    A run of consecutive piece tokens is one name. In the early (private)
    stage a name is visible only to positions inside its run, and the run
    itself sees nothing but its own pieces and position 0, so the run's last
    piece t_E assembles the entity independently of the surrounding
    template. In the late (read) stage only t_E is
    visible, and t_E itself no longer sees the other pieces, so everything
    later tokens learn about the entity passes through t_E's residual.
    """
    b, t = ids.shape
    piece = is_piece[ids] > 0
    nxt = torch.zeros_like(piece)
    nxt[:, :-1] = piece[:, 1:]
    prev = torch.zeros_like(piece)
    prev[:, 1:] = piece[:, :-1]
    final = piece & ~nxt
    run = torch.cumsum(piece & ~prev, 1) * piece
    same = (run[:, :, None] == run[:, None, :]) & piece[:, :, None]
    causal = torch.ones(t, t, dtype=torch.bool).tril()
    eye = torch.eye(t, dtype=torch.bool)
    first = torch.zeros(t, t, dtype=torch.bool)
    first[:, 0] = True
    outside = ~piece[:, :, None] & ~piece[:, None, :]
    private = causal & (outside | same | first)
    read = causal & (~piece[:, None, :] | final[:, None, :] | eye)
    return private[:, None], read[:, None]


class LanguageModel(nn.Module):
    def __init__(self, cfg: LmConfig, piece_ids=()):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.tok_emb = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_model, generator=gen) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_seq_len, cfg.d_model, generator=gen) * 0.02)
        torch.manual_seed(cfg.seed)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model)
        is_piece = torch.zeros(cfg.vocab_size)
        is_piece[list(piece_ids)] = 1.0
        self.register_buffer("is_piece", is_piece)

    def masks(self, ids: torch.Tensor) -> list:
        """One attention mask per block (None means plain causal)."""
        if not self.cfg.entity_mask:
            return [None] * self.n_layers
        private, read = attention_masks(ids, self.is_piece)
        return [private if i < self.cfg.read_at else read for i in range(self.n_layers)]

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds {self.cfg.max_seq_len}")
        return self.tok_emb[ids] + self.pos_emb[: ids.shape[1]]

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x) @ self.tok_emb.T

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise SiteError(f"layer {layer} outside [0, {self.n_layers})")

    def forward(self, ids: torch.Tensor, hooks: list[Hook] | None = None) -> torch.Tensor:
        single = ids.dim() == 1
        if single:
            ids = ids[None]
        hooks = hooks or []
        by_layer: dict[int, list[Hook]] = {}
        for h in hooks:
            self._check_layer(h.layer)
            pos = torch.as_tensor(h.position)
            if int(pos.min()) < 0 or int(pos.max()) >= ids.shape[1]:
                raise SiteError(f"position {h.position} outside sequence of length {ids.shape[1]}")
            by_layer.setdefault(h.layer, []).append(h)
        x = self.embed(ids)
        masks = self.masks(ids)
        rows = torch.arange(ids.shape[0])
        for i, block in enumerate(self.blocks):
            for h in by_layer.get(i, ()):
                pos = torch.as_tensor(h.position).expand(ids.shape[0])
                out = h.fn(x[rows, pos])
                if out is not None:
                    x = x.index_put((rows, pos), out)
            x = block(x, masks[i])
        logits = self.head(x)
        return logits[0] if single else logits

    # site-level API used by interventions and featurizer training

    def site_state(self, batch: PromptBatch, layer: int) -> LmSiteState:
        self._check_layer(layer)
        x = self.embed(batch.ids)
        masks = self.masks(batch.ids)
        for i in range(layer):
            x = self.blocks[i](x, masks[i])
        return LmSiteState(x, batch, layer)

    def logits_from_state(self, state: LmSiteState, vectors: torch.Tensor) -> torch.Tensor:
        rows = torch.arange(len(state.batch))
        x = state.resid.index_put((rows, state.batch.ent_pos), vectors)
        masks = self.masks(state.batch.ids)
        for i in range(state.layer, self.n_layers):
            x = self.blocks[i](x, masks[i])
        return self.head(x[rows, state.batch.last])

    def clean_logits(self, batch: PromptBatch) -> torch.Tensor:
        x = self.embed(batch.ids)
        masks = self.masks(batch.ids)
        for block, mask in zip(self.blocks, masks):
            x = block(x, mask)
        return self.head(x[torch.arange(len(batch)), batch.last])

    # persistence

    def save(self, out: str | Path, tokenizer: Tokenizer, extra: dict | None = None) -> None:
        out = Path(out)
        save_tensors(out / "model.cdl1", {k: v for k, v in self.state_dict().items()})
        meta = {"config": asdict(self.cfg), "tokenizer": tokenizer.to_json()}
        if extra:
            meta.update(extra)
        atomic_write_text(out / "model.json", dump_json(meta))

    @classmethod
    def load(cls, src: str | Path) -> tuple["LanguageModel", Tokenizer]:
        src = Path(src)
        meta = json.loads((src / "model.json").read_text())
        model = cls(LmConfig(**meta["config"]))
        model.load_state_dict(load_tensors(src / "model.cdl1"))
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model, Tokenizer.from_json(meta["tokenizer"])


@torch.no_grad()
def decode_greedy(model: LanguageModel, prompt, max_new: int, hooks: list[Hook] | None = None) -> list[int]:
    """Argmax decoding; ties go to the lowest token id."""
    ids = torch.as_tensor(list(prompt), dtype=torch.long)
    if ids.numel() == 0:
        raise ValueError("empty prompt")
    out: list[int] = []
    for _ in range(max_new):
        logits = model(ids, hooks)
        nxt = int(torch.argmax(logits[-1]))
        out.append(nxt)
        ids = torch.cat([ids, torch.tensor([nxt])])
    return out


# training -----------------------------------------------------------------


@dataclass
class TrainingSet:
    ids: torch.Tensor  # [N, T]
    loss_mask: torch.Tensor  # [N, T] true where the next token is supervised
    targets: torch.Tensor  # [N, T] next-token targets


def build_training_set(world: World, tokenizer: Tokenizer, mention_repeats: int = 0) -> TrainingSet:
    """Every (entity, template) pair; loss on tokens after the entity.

    Bare mentions ``<bos> E value`` are added for every attribute, so the
    token after the entity is one of its values. The loss at the last entity
    token is then a mixture over attributes, which pushes the model to store
    all of them there rather than re-reading the name pieces later.
    """
    seqs, masks = [], []
    factory = PromptFactory(world, tokenizer)
    for _ in range(mention_repeats):
        for e in world.entities:
            p = tokenizer.render("{E}", e)
            for a in world.attributes:
                ids = list(p.ids) + tokenizer.value_tokens(world.getattr(a, e))
                seqs.append(ids)
                masks.append([i >= p.entity_last and i < len(ids) - 1 for i in range(len(ids))])
    for e in world.entities:
        for t in world.templates:
            p = factory.prompt(t, e)
            ids = list(p.ids)
            if t.attribute is not None:
                ids += tokenizer.value_tokens(world.getattr(t.attribute, e))
            start = p.entity_last
            mask = [False] * len(ids)
            for i in range(start, len(ids) - 1):
                mask[i] = True
            seqs.append(ids)
            masks.append(mask)
    width = max(len(s) for s in seqs)
    n = len(seqs)
    ids = torch.full((n, width), tokenizer.pad, dtype=torch.long)
    lm = torch.zeros((n, width), dtype=torch.bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        ids[i, : len(s)] = torch.tensor(s)
        lm[i, : len(m)] = torch.tensor(m)
    targets = torch.full_like(ids, tokenizer.pad)
    targets[:, :-1] = ids[:, 1:]
    return TrainingSet(ids, lm, targets)


@torch.no_grad()
def attribute_accuracy(model, world: World, tokenizer: Tokenizer, entities=None, templates=None, chunk: int = 512):
    """First-token accuracy over attribute prompts; returns (mean, per-pair dict)."""
    entities = world.entities if entities is None else entities
    templates = [t for t in (world.templates if templates is None else templates) if t.attribute is not None]
    factory = PromptFactory(world, tokenizer)
    pairs = [(t.id, e) for e in entities for t in templates]
    correct: dict[tuple[str, str], bool] = {}
    for s in range(0, len(pairs), chunk):
        part = pairs[s : s + chunk]
        batch = factory.batch(part)
        pred = model.clean_logits(batch).argmax(-1)
        for (tid, e), p in zip(part, pred.tolist()):
            gold = tokenizer.value_token(world.getattr(world.template(tid).attribute, e))
            correct[(tid, e)] = p == gold
    mean = sum(correct.values()) / max(len(correct), 1)
    return mean, correct


def train_lm(world: World, cfg: LmConfig, split: Split | None = None, tokenizer: Tokenizer | None = None):
    """Train on every (entity, template) pair of ``world``.

    Returns (model, tokenizer, history). Accuracy is reported on the dev part
    of ``split`` when given.
    """
    if not world.entities or not world.templates:
        raise ValueError("world has no training data")
    if split is not None and not split.train:
        raise ValueError("train split is empty")
    tokenizer = tokenizer or Tokenizer.from_world(world)
    cfg.vocab_size = len(tokenizer)
    data = build_training_set(world, tokenizer, cfg.mention_repeats)
    if data.ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"prompts of length {data.ids.shape[1]} exceed max_seq_len {cfg.max_seq_len}")
    model = LanguageModel(cfg, tokenizer.piece_ids())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = data.ids.shape[0]
    n_mentions = cfg.mention_repeats * len(world.entities) * len(world.attributes)
    if cfg.mention_steps and not n_mentions:
        raise ValueError("mention_steps needs mention_repeats > 0")
    dev_entities = world.entities
    if split is not None and split.mode == "entity":
        dev_entities = split.dev
    history = []
    model.train()
    for step in range(1, cfg.max_steps + 1):
        # linear warmup, then cosine decay to zero at max_steps
        if step <= cfg.warmup:
            lr = cfg.lr * step / cfg.warmup
        else:
            frac = (step - cfg.warmup) / max(cfg.max_steps - cfg.warmup, 1)
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * frac))
        for g in opt.param_groups:
            g["lr"] = lr
        hi = n_mentions if step <= cfg.mention_steps else n
        idx = torch.from_numpy(rng.integers(0, hi, size=cfg.batch_size))
        ids, mask, tgt = data.ids[idx], data.loss_mask[idx], data.targets[idx]
        width = int(mask.any(0).nonzero().max()) + 2
        logits = model(ids[:, :width])
        loss = torch.nn.functional.cross_entropy(logits[mask[:, :width]], tgt[:, :width][mask[:, :width]])
        if not torch.isfinite(loss):
            raise DivergenceError(step, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step > cfg.mention_steps and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            model.eval()
            dev_acc, _ = attribute_accuracy(model, world, tokenizer, entities=dev_entities)
            model.train()
            history.append({"step": step, "loss": loss.item(), "dev_accuracy": dev_acc})
            log.info("step %d loss %.4f dev %.4f", step, loss.item(), dev_acc)
            if dev_acc >= cfg.target_accuracy:
                break
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, tokenizer, history
