"""Command-line pipeline: gen-world, train-lm, filter, fit-featurizer, evaluate, sweep, report.

Exit codes: 0 ok, 2 usage or bad config, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import torch

from . import pipeline as P
from .checkpoint import atomic_write_text
from .config import ConfigError, load_config
from .evaluation import select_best, write_matrix, write_scores
from .featurizers import load_featurizer, save_featurizer
from .interventions import ActivationSite, FeatureHandle, dump_traces, predict_tuples
from .lm import DivergenceError
from .report import build_report
from .tensor import DegeneracyError
from .world import EmptyInstanceError, SpecError, SplitError

log = logging.getLogger("disentangle")

EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


def _values(text: str | None, cast=float) -> list | None:
    if text is None:
        return None
    return [cast(x) for x in text.split(",") if x.strip()]


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "split_mode", None):
        cfg.run.split_mode = args.split_mode
    if getattr(args, "threshold", None) is not None:
        cfg.filter.threshold = args.threshold
    threads = args.threads if args.threads is not None else cfg.run.threads
    cfg.run.threads = threads
    torch.set_num_threads(max(1, threads))
    return cfg


def cmd_gen_world(args, cfg):
    counts = P.stage_gen_world(cfg, args.out)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train_lm(args, cfg):
    info = P.stage_train_lm(cfg, args.world, args.out)
    print(f"steps={info['steps']} dev_accuracy={info['dev_accuracy']:.3f} seconds={info['seconds']:.0f}")


def cmd_filter(args, cfg):
    info = P.stage_filter(cfg, args.world, args.model, args.out)
    print(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items()))


def _model_and_instance(args):
    model, tok = P.load_model(args.model)
    return model, P.load_instance(args.world, tok)


def cmd_fit(args, cfg):
    model, inst = _model_and_instance(args)
    method = args.method or cfg.featurizer.method
    attribute = args.attribute or cfg.featurizer.attribute
    layer = cfg.featurizer.layer if args.layer is None else args.layer
    value = P.default_value(cfg, method) if args.value is None else args.value
    if method == "full-rep":
        raise ValueError("full-rep has nothing to fit")
    handle = P.fit_handle(model, inst, cfg, method, attribute, layer, value)
    save_featurizer(args.out, handle.featurizer, handle.features, attribute, layer, P.hyperparameters(cfg, method, value))
    P.echo_config(args.out, cfg)
    print(f"method={method} attribute={attribute} layer={layer} |F|={handle.k}")


def cmd_evaluate(args, cfg):
    model, inst = _model_and_instance(args)
    out = Path(args.out)
    handles: dict[str, tuple[str, FeatureHandle, object]] = {}
    if args.featurizer:
        for d in args.featurizer:
            P.require(Path(d) / "featurizer.json")
            fz, feats, meta = load_featurizer(d)
            site = ActivationSite(meta["site"]["layer"])
            value = meta["hyperparameters"].get(P.GRID_PARAM.get(meta["method"], "k"), len(feats))
            handles[meta["attribute"]] = (meta["method"], FeatureHandle(fz, feats, site), value)
    elif args.method == "full-rep":
        layer = cfg.featurizer.layer if args.layer is None else args.layer
        attrs = [args.attribute] if args.attribute else inst.world.attributes
        for a in attrs:
            handles[a] = ("full-rep", P.full_rep_handle(model.d_model, ActivationSite(layer)), model.d_model)
    else:
        raise ValueError("evaluate needs --featurizer DIR (repeatable) or --method full-rep")
    tables = []
    for a, (method, h, value) in sorted(handles.items()):
        tables.append(P.score(model, inst, cfg, h, method, a, args.part, value))
        if args.traces:
            tb = inst.batch(cfg.run.split_mode, args.part, a)
            dump_traces(out / f"traces_{a}.jsonl", tb, predict_tuples(model, h, tb), inst.tokenizer)
    write_scores(out / "scores.csv", tables)
    if len(handles) > 1:
        write_matrix(out / "matrix.csv", P.matrix_for(model, inst, cfg, {a: h for a, (_, h, _) in handles.items()}, args.part))
    P.echo_config(out, cfg)
    for t in tables:
        print(f"{t.method} {t.attribute} L{t.layer} cause={t.cause:.3f} iso={t.iso:.3f} disentangle={t.disentangle:.3f}")


def cmd_sweep(args, cfg):
    model, inst = _model_and_instance(args)
    out = Path(args.out)
    method = args.method or cfg.featurizer.method
    attribute = args.attribute or cfg.featurizer.attribute
    layers = _values(args.layers, int) or cfg.featurizer.layer_grid
    if method == "full-rep":
        values = [model.d_model]
    else:
        values = _values(args.values) or (
            cfg.featurizer.k_grid if P.GRID_PARAM[method] == "k" else [P.default_value(cfg, method)]
        )
        if P.GRID_PARAM[method] == "k":
            values = [int(v) for v in values]
    cells, best = P.run_sweep(model, inst, cfg, method, attribute, layers, values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", P.GRID_PARAM[method], "dev_cause", "dev_iso", "dev_disentangle", "cause", "iso", "disentangle"])
    for c in cells:
        w.writerow([c.layer, c.k] + [f"{v:.3f}" for v in (c.dev.cause, c.dev.iso, c.dev.disentangle,
                                                           c.test.cause, c.test.iso, c.test.disentangle)])
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    # per layer: the dev-selected cell's test scores
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", P.GRID_PARAM[method], "cause", "iso", "disentangle"])
    for layer in sorted({c.layer for c in cells}):
        b = select_best([c for c in cells if c.layer == layer])
        w.writerow([layer, b.k, f"{b.test.cause:.3f}", f"{b.test.iso:.3f}", f"{b.test.disentangle:.3f}"])
    atomic_write_text(out / "layer_sweep.csv", buf.getvalue())
    write_scores(out / "scores.csv", [best.test])
    P.echo_config(out, cfg)
    print(f"best layer={best.layer} {P.GRID_PARAM[method]}={best.k} test disentangle={best.test.disentangle:.3f}")


def cmd_report(args, cfg):
    written = build_report(P.require(args.scores), args.out)
    for p in written:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="sectioned key=value config file")
    shared.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--threads", type=int, help="torch intra-op threads")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="disentangle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-world", parents=[shared], help="generate a world, splits and tuples")

    s = sub.add_parser("train-lm", parents=[shared], help="train the micro-LM")
    s.add_argument("--world", required=True)

    s = sub.add_parser("filter", parents=[shared], help="keep entities/templates the LM gets right")
    s.add_argument("--world", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--threshold", type=float)

    def model_args(s):
        s.add_argument("--world", required=True, help="(filtered) instance directory")
        s.add_argument("--model", required=True)
        s.add_argument("--attribute")
        s.add_argument("--layer", type=int)
        s.add_argument("--split-mode", choices=("entity", "context"))

    s = sub.add_parser("fit-featurizer", parents=[shared], help="fit one featurizer")
    model_args(s)
    s.add_argument("--method", choices=P.METHOD_CHOICES[1:])
    s.add_argument("--value", type=float, help="k, C or eps depending on the method")

    s = sub.add_parser("evaluate", parents=[shared], help="score featurizers or the full-rep baseline")
    model_args(s)
    s.add_argument("--featurizer", action="append", help="fitted featurizer directory (repeatable)")
    s.add_argument("--method", choices=("full-rep",))
    s.add_argument("--part", default="test", choices=("train", "dev", "test"))
    s.add_argument("--traces", action="store_true", help="dump per-tuple JSONL traces")

    s = sub.add_parser("sweep", parents=[shared], help="layer x k grid with dev-based selection")
    model_args(s)
    s.add_argument("--method", choices=P.METHOD_CHOICES)
    s.add_argument("--layers", help="comma-separated layers")
    s.add_argument("--values", help="comma-separated k / C / eps grid")

    s = sub.add_parser("report", parents=[shared], help="summary table and heatmaps")
    s.add_argument("--scores", required=True, help="directory searched for scores.csv and matrix*.csv")
    return p


COMMANDS = {
    "gen-world": cmd_gen_world,
    "train-lm": cmd_train_lm,
    "filter": cmd_filter,
    "fit-featurizer": cmd_fit,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config is not None and not Path(args.config).exists():
            print(f"error: config file not found: {args.config}", file=sys.stderr)
            return EXIT_USAGE
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, SpecError, SplitError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DivergenceError, DegeneracyError, FloatingPointError, EmptyInstanceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
