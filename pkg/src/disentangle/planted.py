"""Linear-readout oracle with attribute subspaces known by construction.

Each stored attribute writes a simplex code of its value into its own
subspace of the site vector; readouts are the dual basis, so every entity is
decoded exactly before any intervention. A dependent attribute can instead
be read through its parent's subspace (an overlap of 0 degrees), which
forces the two to move together under any intervention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .batch import PromptBatch
from .tokenizer import Tokenizer
from .world import World


class PlantedModelError(ValueError):
    pass


def simplex_codes(n_values: int) -> np.ndarray:
    """n equal-norm, equiangular vectors spanning R^(n-1)."""
    centered = np.eye(n_values) - 1.0 / n_values
    # orthonormal basis of the sum-zero hyperplane
    u, _, _ = np.linalg.svd(centered)
    basis = u[:, : n_values - 1]
    codes = centered @ basis
    return codes / np.linalg.norm(codes[0])


@dataclass
class PlantedState:
    vectors: torch.Tensor
    batch: PromptBatch
    layer: int = 0

    def select(self, idx) -> "PlantedState":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PlantedState(self.vectors[idx], self.batch.select(idx), self.layer)


class PlantedModel:
    n_layers = 1

    def __init__(
        self,
        world: World,
        tokenizer: Tokenizer,
        storage: dict[str, np.ndarray],
        shared: dict[str, tuple[str, dict[str, str]]],
        nuisance: np.ndarray,
        scale: float,
    ):
        self.world = world
        self.tok = tokenizer
        self.storage = storage  # attribute -> d x k orthonormal-ish columns
        self.shared = shared  # attribute -> (parent, value map)
        self.d_model = nuisance.shape[1]
        self.scale = scale
        self.codes = {a: simplex_codes(len(world.values[a])) for a in storage}
        stored = list(storage)
        stacked = np.concatenate([storage[a] for a in stored], axis=1)
        if np.linalg.matrix_rank(stacked) < stacked.shape[1]:
            raise PlantedModelError("stored subspaces are linearly dependent")
        dual = np.linalg.pinv(stacked)
        self.readout: dict[str, np.ndarray] = {}
        off = 0
        for a in stored:
            k = storage[a].shape[1]
            self.readout[a] = dual[off : off + k]
            off += k
        self.nuisance = torch.tensor(nuisance, dtype=torch.float32)
        table = np.zeros((len(world.entities), self.d_model))
        for i, e in enumerate(world.entities):
            for a, u in storage.items():
                j = world.values[a].index(world.getattr(a, e))
                table[i] += u @ self.codes[a][j]
        self.entity_vectors = torch.tensor(table, dtype=torch.float32)
        self._build_heads()

    def _build_heads(self) -> None:
        """Per attribute, a (vocab x d) matrix whose rows score each value token."""
        v = len(self.tok)
        self.heads = []
        for a in self.world.attributes:
            head = np.zeros((v, self.d_model))
            if a in self.storage:
                for j, val in enumerate(self.world.values[a]):
                    head[self.tok.value_token(val)] = self.codes[a][j] @ self.readout[a]
            else:
                parent, mapping = self.shared[a]
                for j, pval in enumerate(self.world.values[parent]):
                    head[self.tok.value_token(mapping[pval])] += self.codes[parent][j] @ self.readout[parent]
            self.heads.append(torch.tensor(head * self.scale, dtype=torch.float32))
        self.heads = torch.stack(self.heads)  # [A, V, d]
        # unused vocabulary sits far below any value token
        self.floor = torch.full((v,), -1e4)
        self.floor[[self.tok.value_token(x) for a in self.world.attributes for x in self.world.values[a]]] = 0.0

    def site_state(self, batch: PromptBatch, layer: int = 0) -> PlantedState:
        if layer != 0:
            raise PlantedModelError("planted model has a single site layer 0")
        if int(batch.entity.min()) < 0:
            raise PlantedModelError("batch references an entity outside the planted world")
        vec = self.entity_vectors[batch.entity] + self.nuisance[batch.template]
        return PlantedState(vec, batch, layer)

    def logits_from_state(self, state: PlantedState, vectors: torch.Tensor) -> torch.Tensor:
        q = state.batch.query.clamp(min=0)
        heads = self.heads[q]  # [B, V, d]
        logits = torch.einsum("bvd,bd->bv", heads, vectors) + self.floor
        return torch.where((state.batch.query >= 0)[:, None], logits, torch.zeros_like(logits))

    def clean_logits(self, batch: PromptBatch) -> torch.Tensor:
        s = self.site_state(batch)
        return self.logits_from_state(s, s.vectors)

    def subspace(self, attribute: str) -> np.ndarray:
        """Orthonormal rows spanning where ``attribute`` is stored (k x d)."""
        a = attribute if attribute in self.storage else self.shared[attribute][0]
        q, _ = np.linalg.qr(self.storage[a])
        return q.T

    def projector(self, attribute: str) -> np.ndarray:
        w = self.subspace(attribute)
        return w.T @ w

    def readout_values(self, batch: PromptBatch, vectors: torch.Tensor | None = None) -> list[str]:
        state = self.site_state(batch)
        logits = self.logits_from_state(state, state.vectors if vectors is None else vectors)
        return [self.tok.vocab[i].strip() for i in logits.argmax(-1).tolist()]


def build_planted_model(
    world: World,
    tokenizer: Tokenizer,
    angle: float = 90.0,
    pair: tuple[str, str] | None = None,
    share_functions: bool = False,
    nuisance_dims: int = 4,
    nuisance_scale: float = 0.5,
    d_model: int | None = None,
    rotate: bool = False,
    scale: float = 8.0,
    seed: int = 0,
) -> PlantedModel:
    """Build the oracle for ``world``.

    Stored attributes get ``n_values - 1`` dims each, axis aligned unless
    ``rotate``. ``pair`` (default: the first two stored attributes) is tilted
    to principal angle ``angle`` degrees. With ``share_functions`` every
    attribute declared a function of another is read from its parent's
    subspace instead of owning one.
    """
    rng = np.random.default_rng(seed)
    shared: dict[str, tuple[str, dict[str, str]]] = {}
    if share_functions:
        for a, dep in world.dependencies.items():
            if dep.get("kind") == "function" and a in world.attributes:
                shared[a] = (dep["parent"], dict(dep["map"]))
    stored = [a for a in world.attributes if a not in shared]
    dims = {a: len(world.values[a]) - 1 for a in stored}
    if pair is None and len(stored) >= 2:
        pair = (stored[0], stored[1])
    theta = math.radians(angle)
    if not 0.0 <= angle <= 90.0:
        raise PlantedModelError("angle must lie in [0, 90] degrees")
    if pair is not None and math.isclose(angle, 0.0):
        raise PlantedModelError("identical subspaces need a functional dependence; use share_functions")
    need = sum(dims.values()) + nuisance_dims
    d = need if d_model is None else d_model
    if need > d:
        raise PlantedModelError(f"subspaces need {need} dims, site has {d}")

    storage: dict[str, np.ndarray] = {}
    off = 0
    for a in stored:
        u = np.zeros((d, dims[a]))
        u[off : off + dims[a], :] = np.eye(dims[a])
        storage[a] = u
        off += dims[a]
    if pair is not None and angle < 90.0:
        a, b = pair
        kb = dims[b]
        if kb > dims[a]:
            raise PlantedModelError(f"{b} has more dims than {a}; swap the pair")
        storage[b] = math.cos(theta) * storage[a][:, :kb] + math.sin(theta) * storage[b]
    nuis = np.zeros((len(world.templates), d))
    if nuisance_dims:
        nuis[:, off : off + nuisance_dims] = rng.normal(0.0, nuisance_scale, size=(len(world.templates), nuisance_dims))
    if rotate:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        storage = {a: q @ u for a, u in storage.items()}
        nuis = nuis @ q.T
    return PlantedModel(world, tokenizer, storage, shared, nuis, scale)
