"""Run every CLI stage for one config: world, LM, filter, featurizers, evaluation, report.

usage: python scripts/run_pipeline.py OUT [--config run.ini] [--layer L] [--methods das,mdas]
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from disentangle.cli import main
from disentangle.featurizers import METHODS
from disentangle.world import World


def run(argv: list[str]) -> None:
    t0 = time.time()
    code = main(argv)
    print(f"[{time.time() - t0:6.1f}s] {' '.join(argv[:1])} -> {code}", flush=True)
    if code:
        sys.exit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("out", type=Path)
    p.add_argument("--config")
    p.add_argument("--layer", type=int, help="site layer for the featurizers (default: config)")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--attributes", help="comma list (default: every attribute)")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    out = args.out
    c = ["--config", args.config] if args.config else []
    run(["gen-world", *c, "--out", str(out / "world")])
    run(["train-lm", *c, "--world", str(out / "world"), "--out", str(out / "lm")])
    run(["filter", *c, "--world", str(out / "world"), "--model", str(out / "lm"), "--out", str(out / "instance")])
    m = ["--world", str(out / "instance"), "--model", str(out / "lm")]
    layer = ["--layer", str(args.layer)] if args.layer is not None else []
    attrs = args.attributes.split(",") if args.attributes else World.load(out / "instance").attributes
    run(["evaluate", *c, *m, "--method", "full-rep", *layer, "--out", str(out / "eval" / "full-rep")])
    for method in args.methods.split(","):
        dirs = []
        for a in attrs:
            d = out / "featurizers" / method / a
            run(["fit-featurizer", *c, *m, "--method", method, "--attribute", a, *layer, "--out", str(d)])
            dirs += ["--featurizer", str(d)]
        run(["evaluate", *c, *m, *dirs, "--out", str(out / "eval" / method)])
    run(["report", *c, "--scores", str(out / "eval"), "--out", str(out / "report")])
    print((out / "report" / "summary.txt").read_text())
