"""Planted-model study: how well each interchange method disentangles as subspaces overlap.

Builds the planted oracle at several overlap angles between country and
climate (90 means orthogonal) plus the shared-subspace case where continent
is read through country's block, then fits DAS, MDAS, DBM and MDBM for
country and prints test Cause/Iso and the country row of the cross matrix.

usage: python scripts/planted_oracle.py [--angles 90,60,30] [--steps 600]
"""

from __future__ import annotations

import argparse
import time

import numpy as np
import torch

from disentangle.evaluation import cause_only, cross_attribute_matrix, evaluate_handle
from disentangle.featurizers import IdentityFeaturizer, InterchangeConfig, fit_das, fit_dbm
from disentangle.interventions import ActivationSite, FeatureHandle, tuple_batch
from disentangle.planted import build_planted_model
from disentangle.tokenizer import Tokenizer
from disentangle.world import WorldSpec, generate_world, make_splits, pair_interventions

SITE = ActivationSite(0)


def oracle(model, attr):
    dims = np.nonzero(np.diag(model.projector(attr)) > 0.5)[0]
    return FeatureHandle(IdentityFeaturizer(model.d_model), dims, SITE)


def study(name, model, world, tok, split, steps):
    attr = "country"
    tr = tuple_batch(world, tok, pair_interventions(world, split, "train", attr, 1024, seed=0))
    te = tuple_batch(world, tok, pair_interventions(world, split, "test", attr, 512, seed=1))
    causes = {}
    for a in world.attributes:
        causes[a] = cause_only(tuple_batch(world, tok, pair_interventions(world, split, "test", a, 256, seed=2)))
    k = int(round(np.trace(model.projector(attr))))
    cfg = InterchangeConfig(steps=steps)
    fits = {
        "das": fit_das(model, tr, 0, k, cfg=cfg),
        "mdas": fit_das(model, tr, 0, k, multi_task=True, cfg=cfg),
        "dbm": fit_dbm(model, tr, 0, cfg=cfg),
        "mdbm": fit_dbm(model, tr, 0, multi_task=True, cfg=cfg),
    }
    for method, fz in fits.items():
        feats = torch.arange(k) if method.endswith("das") else fz.selected()
        h = FeatureHandle(fz, feats, SITE)
        t = evaluate_handle(model, h, te, method, "entity", attr)
        handles = {a: oracle(model, a) for a in world.attributes}
        handles[attr] = h
        row = cross_attribute_matrix(model, handles, causes)[attr]
        flips = " ".join(f"{b}={row[b]:.2f}" for b in world.attributes if b != attr)
        print(f"{name:>10} {method:>5} |F|={len(feats):2d} cause={t.cause:.3f} iso={t.iso:.3f} "
              f"disentangle={t.disentangle:.3f}  flips: {flips}")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--angles", default="90,60,30")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--entities", type=int, default=200)
    args = p.parse_args()
    torch.set_num_threads(1)
    world = generate_world(WorldSpec(n_entities=args.entities))
    tok = Tokenizer.from_world(world)
    split = make_splits(world, "entity")
    t0 = time.time()
    for angle in (float(a) for a in args.angles.split(",")):
        model = build_planted_model(world, tok, angle=angle, pair=("country", "climate"))
        study(f"{angle:g}deg", model, world, tok, split, args.steps)
    study("shared", build_planted_model(world, tok, share_functions=True), world, tok, split, args.steps)
    print(f"{time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
