"""Featurizers: PCA, SAE, RLAP, DBM/MDBM and DAS/MDAS, plus checkpoint I/O."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from ..checkpoint import atomic_write_text, dump_json, load_tensors, save_tensors
from .base import BasisFeaturizer, Featurizer, IdentityFeaturizer
from .das import DasFeaturizer, fit_das
from .mask import MaskFeaturizer, fit_dbm, temperature_at
from .pca import PcaFeaturizer, fit_pca
from .rlap import RlapFeaturizer, erase, fit_rlap
from .sae import SaeFeaturizer, fit_sae, relative_recon_error
from .select import fit_l1_logistic, select_features_l1
from .train import InterchangeConfig, multitask_loss

METHODS = ("pca", "sae", "rlap", "dbm", "mdbm", "das", "mdas")


def save_featurizer(
    out: str | Path,
    featurizer: Featurizer,
    features: torch.Tensor,
    attribute: str,
    layer: int,
    hyperparameters: dict | None = None,
) -> None:
    """Write featurizer.cdl1 and a featurizer.json sidecar into ``out``."""
    out = Path(out)
    save_tensors(out / "featurizer.cdl1", featurizer.tensors())
    meta = {
        "method": featurizer.method,
        "attribute": attribute,
        "site": {"layer": layer, "position": "last_entity_token"},
        "n": featurizer.n,
        "dim": featurizer.dim,
        "k": int(features.numel()),
        "features": [int(i) for i in features.tolist()],
        "params": featurizer.params(),
        "hyperparameters": hyperparameters or {},
        "recon_error": getattr(featurizer, "recon_error", None),
    }
    atomic_write_text(out / "featurizer.json", dump_json(meta))


def load_featurizer(src: str | Path) -> tuple[Featurizer, torch.Tensor, dict]:
    """Inverse of ``save_featurizer``; returns (featurizer, features, meta)."""
    src = Path(src)
    meta = json.loads((src / "featurizer.json").read_text())
    t = load_tensors(src / "featurizer.cdl1")
    method = meta["method"]
    p = meta.get("params", {})
    if method == "identity":
        fz: Featurizer = IdentityFeaturizer(meta["n"])
    elif method == "pca":
        fz = PcaFeaturizer(t["mean"], t["std"], t["components"], t["eigenvalues"])
    elif method == "sae":
        fz = SaeFeaturizer(t["w1"], t["b1"], t["w2"], t["b2"], p.get("recon_error", float("nan")), p.get("active_fraction", float("nan")))
    elif method == "rlap":
        fz = RlapFeaturizer(t["w"], t.get("probe"))
    elif method in ("dbm", "mdbm"):
        fz = MaskFeaturizer(t["mask_logits"], p["temperature"], p["eps"], method == "mdbm")
    elif method in ("das", "mdas"):
        fz = DasFeaturizer(t["w"], method == "mdas")
    elif method == "basis":
        fz = BasisFeaturizer(t["basis"])
    else:
        raise ValueError(f"unknown featurizer method {method!r}")
    return fz, torch.tensor(meta["features"], dtype=torch.long), meta


__all__ = [
    "METHODS",
    "BasisFeaturizer",
    "DasFeaturizer",
    "Featurizer",
    "IdentityFeaturizer",
    "InterchangeConfig",
    "MaskFeaturizer",
    "PcaFeaturizer",
    "RlapFeaturizer",
    "SaeFeaturizer",
    "erase",
    "fit_das",
    "fit_dbm",
    "fit_l1_logistic",
    "fit_pca",
    "fit_rlap",
    "fit_sae",
    "load_featurizer",
    "multitask_loss",
    "relative_recon_error",
    "save_featurizer",
    "select_features_l1",
    "temperature_at",
]
