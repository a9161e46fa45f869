"""Featurizer interface and the generic interchange edit."""

from __future__ import annotations

import torch


class Featurizer:
    """Map from activations (n dims) to a feature space (``dim`` dims).

    Subclasses provide ``encode`` and a linear ``decoder`` (n x dim) with
    ``decode(f) = f @ decoder.T + offset``. The interchange edit is written
    as ``base + decoder[:, F] (F(source) - F(base))[F]``, which equals
    ``decode(encode(base) with F replaced)`` whenever decode inverts encode,
    and additionally restores the reconstruction residual when it does not.
    """

    method = "abstract"
    exact = True  # decode(encode(n)) == n up to float error

    n: int
    dim: int

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @property
    def decoder(self) -> torch.Tensor:
        raise NotImplementedError

    @property
    def offset(self) -> torch.Tensor:
        return torch.zeros(self.n)

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return f @ self.decoder.T + self.offset

    def intervene(self, base: torch.Tensor, source: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        if features.numel() == 0:
            return base
        if self.exact and features.numel() == self.dim == self.n:
            return source
        delta = self.encode(source)[:, features] - self.encode(base)[:, features]
        return base + delta @ self.decoder[:, features].T

    def roundtrip_error(self, x: torch.Tensor) -> float:
        with torch.no_grad():
            return float((self.decode(self.encode(x)) - x).abs().max())

    # persistence hooks
    def tensors(self) -> dict[str, torch.Tensor]:
        return {}

    def params(self) -> dict:
        return {}


class IdentityFeaturizer(Featurizer):
    """Neuron basis; used by the full-representation baseline and masks."""

    method = "identity"

    def __init__(self, n: int):
        self.n = self.dim = n

    def encode(self, x):
        return x

    @property
    def decoder(self):
        return torch.eye(self.n)

    def decode(self, f):
        return f

    def intervene(self, base, source, features):
        if features.numel() == 0:
            return base
        mask = torch.zeros(self.n, dtype=torch.bool)
        mask[features] = True
        return torch.where(mask, source, base)


class BasisFeaturizer(Featurizer):
    """Orthonormal change of basis: rows of ``basis`` are the new axes."""

    method = "basis"

    def __init__(self, basis: torch.Tensor):
        self.basis = basis.detach().to(torch.float32)
        self.n = self.dim = basis.shape[1]
        if basis.shape[0] != basis.shape[1]:
            raise ValueError("basis must be square")

    def encode(self, x):
        return x @ self.basis.T

    @property
    def decoder(self):
        return self.basis.T

    def tensors(self):
        return {"basis": self.basis}
