"""Stage functions shared by the CLI and the experiment scripts."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import atomic_write_text, dump_json
from .config import RunConfig
from .evaluation import ScoreTable, cause_only, cross_attribute_matrix, evaluate_handle, sweep
from .featurizers import (
    InterchangeConfig,
    fit_das,
    fit_dbm,
    fit_pca,
    fit_rlap,
    fit_sae,
    select_features_l1,
)
from .filtering import filter_instance
from .interventions import ActivationSite, FeatureHandle, TupleBatch, full_rep_handle, tuple_batch
from .lm import LanguageModel, train_lm
from .batch import PromptFactory
from .tokenizer import Tokenizer
from .world import (
    Split,
    World,
    build_tuple_sets,
    generate_world,
    load_splits,
    load_tuples,
    make_splits,
    save_splits,
    save_tuples,
    split_view,
)

log = logging.getLogger(__name__)

METHOD_CHOICES = ("full-rep", "pca", "sae", "rlap", "dbm", "mdbm", "das", "mdas")
# what the sweep "k" axis means for each method
GRID_PARAM = {
    "full-rep": "k",
    "pca": "C",
    "sae": "C",
    "rlap": "k",
    "dbm": "eps",
    "mdbm": "eps",
    "das": "k",
    "mdas": "k",
}


def require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def echo_config(out: str | Path, cfg: RunConfig) -> None:
    out = Path(out)
    atomic_write_text(out / "config.ini", cfg.to_text())


# data stages ---------------------------------------------------------------------


def write_instance(world: World, cfg: RunConfig, out: str | Path) -> dict:
    """World files plus splits.json and tuples.jsonl for both split modes."""
    out = Path(out)
    world.save(out)
    seed = cfg.stage_seed("splits")
    splits = {mode: make_splits(world, mode, seed) for mode in ("entity", "context")}
    save_splits(out / "splits.json", splits)
    t = cfg.tuples
    sizes = {"train": t.n_train, "dev": t.n_dev, "test": t.n_test}
    tuples = build_tuple_sets(world, splits, sizes, cfg.stage_seed("tuples"), distinct=t.distinct)
    save_tuples(out / "tuples.jsonl", tuples)
    return {
        "entities": len(world.entities),
        "attributes": len(world.attributes),
        "templates": len(world.templates),
        "tuples": sum(len(v) for v in tuples.values()),
    }


def stage_gen_world(cfg: RunConfig, out: str | Path) -> dict:
    world = generate_world(cfg.world_spec())
    counts = write_instance(world, cfg, out)
    echo_config(out, cfg)
    return counts


def stage_train_lm(cfg: RunConfig, world_dir: str | Path, out: str | Path) -> dict:
    world = World.load(require(Path(world_dir) / "world.json").parent)
    splits = load_splits(require(Path(world_dir) / "splits.json"))
    t0 = time.time()
    model, tok, history = train_lm(world, cfg.lm_config(), splits["entity"])
    model.save(out, tok, {"history": history})
    echo_config(out, cfg)
    final = history[-1] if history else {}
    return {"steps": final.get("step", 0), "dev_accuracy": final.get("dev_accuracy"), "seconds": time.time() - t0}


def load_model(model_dir: str | Path) -> tuple[LanguageModel, Tokenizer]:
    require(Path(model_dir) / "model.json")
    require(Path(model_dir) / "model.cdl1")
    return LanguageModel.load(model_dir)


def stage_filter(cfg: RunConfig, world_dir: str | Path, model_dir: str | Path, out: str | Path) -> dict:
    world = World.load(require(Path(world_dir) / "world.json").parent)
    model, tok = load_model(model_dir)
    filtered, report = filter_instance(world, model, tok, cfg.filter.threshold)
    write_instance(filtered, cfg, out)
    atomic_write_text(Path(out) / "filter_report.json", dump_json(report.to_json()))
    echo_config(out, cfg)
    return {
        "entities_kept": len(report.kept_entities),
        "retained_fraction": report.retained_fraction,
        "accuracy_after": report.accuracy_after,
    }


@dataclass
class Instance:
    world: World
    splits: dict[str, Split]
    tuples: dict
    tokenizer: Tokenizer
    factory: PromptFactory

    def batch(self, mode: str, part: str, attribute: str) -> TupleBatch:
        key = (mode, part, attribute)
        if key not in self.tuples:
            raise KeyError(f"no tuples for {key}")
        return tuple_batch(self.world, self.tokenizer, self.tuples[key], self.factory)


def load_instance(world_dir: str | Path, tokenizer: Tokenizer) -> Instance:
    world_dir = Path(world_dir)
    world = World.load(require(world_dir / "world.json").parent)
    splits = load_splits(require(world_dir / "splits.json"))
    tuples = load_tuples(require(world_dir / "tuples.jsonl"))
    return Instance(world, splits, tuples, tokenizer, PromptFactory(world, tokenizer))


# featurizer fitting -------------------------------------------------------------------


@torch.no_grad()
def collect_activations(model, inst: Instance, mode: str, attribute: str, layer: int, n: int, seed: int):
    """Site vectors for train-part prompts, labelled with ``attribute``'s value."""
    entities, templates = split_view(inst.world, inst.splits[mode], "train")
    pairs = [(t.id, e) for e in entities for t in templates]
    rng = np.random.default_rng(seed)
    if len(pairs) > n:
        pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), size=n, replace=False))]
    vecs = []
    for s in range(0, len(pairs), 512):
        batch = inst.factory.batch(pairs[s : s + 512])
        vecs.append(model.site_state(batch, layer).vectors)
    labels = [inst.world.getattr(attribute, e) for _, e in pairs]
    return torch.cat(vecs), labels


def fit_handle(model, inst: Instance, cfg: RunConfig, method: str, attribute: str, layer: int, value) -> FeatureHandle:
    """Fit ``method`` for ``attribute`` at ``layer``; ``value`` is k, C or eps per GRID_PARAM."""
    fc = cfg.featurizer
    mode = cfg.run.split_mode
    site = ActivationSite(layer)
    seed = cfg.stage_seed(f"fit/{method}/{attribute}/{layer}")
    if method == "full-rep":
        return full_rep_handle(model.d_model, site)
    if method in ("pca", "sae", "rlap"):
        x, labels = collect_activations(model, inst, mode, attribute, layer, fc.n_activations, seed)
        if method == "rlap":
            fz = fit_rlap(x, labels, int(value), iterations=fc.rlap_iterations, seed=seed)
            return FeatureHandle(fz, range(fz.k), site)
        if method == "pca":
            fz = fit_pca(x)
        else:
            fz = fit_sae(x, m=fc.sae_ratio * x.shape[1], l1=fc.sae_l1, steps=fc.sae_steps, seed=seed)
        codes = fz.encode(x).detach()
        feats = select_features_l1(codes.numpy(), labels, C=float(value), eps=fc.select_eps)
        return FeatureHandle(fz, feats, site)
    tb = inst.batch(mode, "train", attribute)
    multi = method in ("mdbm", "mdas")
    if method in ("dbm", "mdbm"):
        icfg = InterchangeConfig(steps=fc.steps, lr=fc.dbm_lr, batch_size=fc.batch_size, seed=seed)
        lam = None if fc.lam < 0 else fc.lam
        fz = fit_dbm(model, tb, layer, multi, lam=lam, eps=float(value), t_start=fc.t_start, t_end=fc.t_end,
                     l1_on_logits=fc.l1_on_logits, cfg=icfg)
        return FeatureHandle(fz, fz.selected(), site)
    if method in ("das", "mdas"):
        icfg = InterchangeConfig(steps=fc.steps, lr=fc.lr, batch_size=fc.batch_size, seed=seed)
        fz = fit_das(model, tb, layer, int(value), multi, cfg=icfg)
        return FeatureHandle(fz, range(fz.k), site)
    raise ValueError(f"unknown method {method!r}")


def default_value(cfg: RunConfig, method: str):
    p = GRID_PARAM[method]
    return {"k": cfg.featurizer.k, "C": cfg.featurizer.C, "eps": cfg.featurizer.eps}[p]


def hyperparameters(cfg: RunConfig, method: str, value) -> dict:
    fc = cfg.featurizer
    base = {GRID_PARAM[method]: value, "seed": cfg.stage_seed(f"fit/{method}")}
    if method in ("das", "mdas"):
        base.update(steps=fc.steps, lr=fc.lr, batch_size=fc.batch_size, optimizer="adam")
    elif method in ("dbm", "mdbm"):
        base.update(steps=fc.steps, lr=fc.dbm_lr, lam=fc.lam, t_start=fc.t_start, t_end=fc.t_end,
                    l1_on_logits=fc.l1_on_logits, optimizer="adam")
    elif method == "sae":
        base.update(l1=fc.sae_l1, steps=fc.sae_steps, ratio=fc.sae_ratio, select_eps=fc.select_eps)
    elif method == "pca":
        base.update(select_eps=fc.select_eps)
    elif method == "rlap":
        base.update(iterations=fc.rlap_iterations)
    return base


def score(model, inst: Instance, cfg: RunConfig, handle: FeatureHandle, method: str, attribute: str, part: str,
          value=None) -> ScoreTable:
    tb = inst.batch(cfg.run.split_mode, part, attribute)
    return evaluate_handle(model, handle, tb, method, cfg.run.split_mode, attribute, value)


def matrix_for(model, inst: Instance, cfg: RunConfig, handles: dict[str, FeatureHandle], part: str):
    cause = {a: cause_only(inst.batch(cfg.run.split_mode, part, a)) for a in handles}
    return cross_attribute_matrix(model, handles, cause)


def run_sweep(model, inst: Instance, cfg: RunConfig, method: str, attribute: str, layers, values):
    mode = cfg.run.split_mode

    def fit(layer, v):
        return fit_handle(model, inst, cfg, method, attribute, layer, v)

    return sweep(
        model,
        fit,
        layers,
        values,
        inst.batch(mode, "dev", attribute),
        inst.batch(mode, "test", attribute),
        method,
        mode,
        attribute,
    )


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, dump_json(obj))


def read_json(path: str | Path):
    return json.loads(require(path).read_text())
