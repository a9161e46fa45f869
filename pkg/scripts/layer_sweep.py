"""Per-layer scores on a finished run: full-rep, then DAS and MDAS at each layer.

Reads an LM and a filtered instance written by the CLI (see run_pipeline.py)
and writes layer_scores.csv next to them.

usage: python scripts/layer_sweep.py RUN_DIR [--config run.ini] [--k 8] [--methods full-rep,das,mdas]
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

import torch

from disentangle.config import load_config
from disentangle.evaluation import write_scores
from disentangle.pipeline import fit_handle, load_instance, load_model, score


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("run", type=Path)
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--methods", default="full-rep,das,mdas")
    p.add_argument("--attributes")
    args = p.parse_args()
    cfg = load_config(args.config)
    torch.set_num_threads(cfg.run.threads)
    model, tok = load_model(args.run / "lm")
    inst = load_instance(args.run / "instance", tok)
    k = args.k or cfg.featurizer.k
    attrs = args.attributes.split(",") if args.attributes else inst.world.attributes
    tables = []
    t0 = time.time()
    for layer in range(model.n_layers):
        for method in args.methods.split(","):
            for a in attrs:
                h = fit_handle(model, inst, cfg, method, a, layer, k)
                t = score(model, inst, cfg, h, method, a, "test", k)
                tables.append(t)
                print(f"L{layer} {method:>8} {a:>10} cause={t.cause:.3f} iso={t.iso:.3f} "
                      f"disentangle={t.disentangle:.3f} [{time.time() - t0:.0f}s]", flush=True)
    write_scores(args.run / "layer_scores.csv", tables)


if __name__ == "__main__":
    main()
