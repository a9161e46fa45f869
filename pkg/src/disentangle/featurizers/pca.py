from __future__ import annotations

import numpy as np
import torch

from .base import Featurizer


class PcaFeaturizer(Featurizer):
    """Principal components of standardized activations.

    ``components`` is n x n with one component per column, in descending
    eigenvalue order. Standardization is undone on decode.
    """

    method = "pca"

    def __init__(self, mean: torch.Tensor, std: torch.Tensor, components: torch.Tensor, eigenvalues: torch.Tensor):
        self.mean = mean.to(torch.float32)
        self.std = std.to(torch.float32)
        self.components = components.to(torch.float32)
        self.eigenvalues = eigenvalues.to(torch.float32)
        self.n = self.dim = components.shape[0]

    def encode(self, x):
        return ((x - self.mean) / self.std) @ self.components

    @property
    def decoder(self):
        return self.std[:, None] * self.components

    @property
    def offset(self):
        return self.mean

    def tensors(self):
        return {"mean": self.mean, "std": self.std, "components": self.components, "eigenvalues": self.eigenvalues}


def fit_pca(activations) -> PcaFeaturizer:
    x = np.asarray(torch.as_tensor(activations).detach(), dtype=np.float64)
    n_samples, n = x.shape
    if n_samples <= n:
        raise ValueError(f"PCA needs more than {n} samples, got {n_samples}")
    mean = x.mean(0)
    std = x.std(0)
    std[std < 1e-8] = 1.0
    z = (x - mean) / std
    cov = z.T @ z / (n_samples - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    # sign convention: largest-magnitude entry of each component is positive
    pivot = np.abs(vecs).argmax(0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(n)])
    return PcaFeaturizer(
        torch.from_numpy(mean), torch.from_numpy(std), torch.from_numpy(vecs), torch.from_numpy(vals)
    )
