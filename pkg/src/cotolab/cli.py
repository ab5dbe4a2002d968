"""``cotolab`` command line.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 training
diverged, 4 architecture mismatch, 5 file errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_run_config, reference_run_config, run_config_from_dict
from .errors import CheckpointError, ConfigurationError, ContractError, ParseError, TrainingDiverged
from .experiment import FIGURES, ReferenceRuns, build_task, reproduce, run_training
from .game import ModelGame, concentration_summary, shapley_exact, shapley_multilinear
from .merge import AlignSettings, MergeSpec, align, interpolate_sweep, merge
from .prune import PATTERNS, PrunePattern, prune_sweep
from .theory import random_model, verify_bound
from .trainer import CheckpointBundle, evaluate, load_checkpoint, save_checkpoint, weight_distance_report

EXIT_CONFIG, EXIT_DIVERGED, EXIT_ARCH, EXIT_FILE = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def threads():
    """Worker cap from ``COTO_LAB_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("COTO_LAB_THREADS", "1")))
    except ValueError:
        return 1


# -- output helpers --------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return path


def write_csv(path, header, rows, provenance):
    buf = io.StringIO()
    for key, value in provenance.items():
        buf.write(f"# {key}: {value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write(path, buf.getvalue())


def write_json(path, obj):
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"{path}: no such checkpoint", EXIT_FILE) from None
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_FILE) from None


def _run_config_of(bundle, path):
    extra = bundle.extra.get("run_config")
    if extra is None:
        raise CliError(f"{path}: checkpoint carries no run config, cannot rebuild its dataset",
                       EXIT_FILE)
    return run_config_from_dict(extra)


def _provenance(**digests):
    out = {"cotolab": __version__}
    out.update({k: v for k, v in digests.items() if v is not None})
    return out


def _same_architecture(a, b):
    return (a.depth == b.depth
            and all(x.shape == y.shape for x, y in zip(a.layers, b.layers))
            and all(x.shape == y.shape and x.rank == y.rank
                    for x, y in zip(a.adapters, b.adapters)))


# -- commands --------------------------------------------------------------

def cmd_train(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.output)
    try:
        run = run_training(cfg)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.extra["run_config"] = cfg.to_dict()
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(exc.checkpoint, out / "diverged.ckpt")
        raise CliError(str(exc), EXIT_DIVERGED) from None
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(run_config=cfg.digest(), training_config=run.final.config_digest)
    for name, bundle in (("init", run.init), ("early", run.early), ("final", run.final)):
        bundle.extra["run_config"] = cfg.to_dict()
        save_checkpoint(bundle, out / f"{name}.ckpt")
    log = run.metrics
    write_csv(out / "metrics_steps.csv", ["step", "p", "train_loss", "active_count"],
              log.steps, prov)
    write_csv(out / "metrics_eval.csv", ["step", "eval_loss", "eval_accuracy"], log.evals, prov)
    write_json(out / "config.json", cfg.to_dict())
    loss, acc = evaluate(run.model, run.data[1])
    write_json(out / "summary.json", {
        "provenance": prov, "eval_loss": loss, "eval_accuracy": acc,
        "invocation_counts": log.invocations,
        "invocation_fraction": log.invocation_fraction(), "steps": run.final.step})
    print(f"trained {run.final.step} steps: eval accuracy {acc:.4f}, "
          f"adapter invocation fraction {log.invocation_fraction():.4f} -> {out}")
    return 0


def _pair(args):
    a, b = _load(args.a), _load(args.b)
    if not _same_architecture(a.model, b.model):
        raise CliError("checkpoints do not share an architecture", EXIT_ARCH)
    return a, b


def cmd_interpolate(args):
    a, b = _pair(args)
    cfg = _run_config_of(a, args.a)
    _, ev = build_task(cfg)
    rows = interpolate_sweep(a.model, b.model, args.grid, ev, args.mode)
    prov = _provenance(a=a.config_digest, b=b.config_digest)
    path = write_csv(Path(args.out) / f"interpolate_{args.mode}.csv",
                     ["lambda", "loss", "accuracy"], rows, prov)
    if args.mode == "aligned-fusion" or args.align_report:
        report = [(layer, r.objective_initial, r.objective_final, r.p_norm2, r.gap_spectral)
                  for layer, r in enumerate(align(a.model, b.model), start=1)]
        write_csv(Path(args.out) / "alignment.csv",
                  ["layer", "obj_initial", "obj_final", "p_norm2", "fusion_ensemble_gap"],
                  report, prov)
    print(f"wrote {path}")
    return 0


def cmd_merge(args):
    a, b = _pair(args)
    try:
        merged = merge(a.model, b.model, MergeSpec(args.mode, args.lam, AlignSettings()))
    except ContractError as exc:
        raise CliError(str(exc), EXIT_ARCH) from None
    bundle = CheckpointBundle(merged, 0, extra={
        "run_config": a.extra.get("run_config"),
        "merge": {"mode": args.mode, "lambda": args.lam,
                  "sources": [a.config_digest, b.config_digest]}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, out / "merged.ckpt")
    summary = {"mode": args.mode, "lambda": args.lam,
               "provenance": _provenance(a=a.config_digest, b=b.config_digest)}
    if a.extra.get("run_config") is not None:
        _, ev = build_task(run_config_from_dict(a.extra["run_config"]))
        summary["eval_loss"], summary["eval_accuracy"] = evaluate(merged, ev)
    write_json(out / "merge_summary.json", summary)
    print(f"wrote {out / 'merged.ckpt'}")
    return 0


def _patterns(spec, depth):
    out = []
    for name in spec.split(","):
        name = name.strip()
        if name not in PATTERNS or name == "custom":
            raise CliError(f"unknown pattern {name!r}", EXIT_CONFIG)
        out.append(PrunePattern(name, max(1, depth // 3)))
    return out


def cmd_prune(args):
    bundle = _load(args.ckpt)
    cfg = _run_config_of(bundle, args.ckpt)
    _, ev = build_task(cfg)
    model = bundle.model
    patterns = _patterns(args.pattern, model.depth) if args.pattern else None
    grid = [float(s) for s in args.sparsity_grid.split(",")] if args.sparsity_grid else None
    if patterns is None and grid is None:
        raise CliError("give --pattern or --sparsity-grid", EXIT_CONFIG)
    rows = prune_sweep(model, ev, patterns, grid, per_layer=args.per_layer)
    path = write_csv(Path(args.out) / "prune.csv", ["setting", "loss", "accuracy"], rows,
                     _provenance(ckpt=bundle.config_digest))
    print(f"wrote {path}")
    return 0


def cmd_shapley(args):
    bundle = _load(args.ckpt)
    cfg = _run_config_of(bundle, args.ckpt)
    _, ev = build_task(cfg)
    game = ModelGame(bundle.model, ev)
    game.prefetch(range(1 << min(game.n_players, 14)) if args.method == "exact" else [],
                  threads())
    if args.method == "exact":
        report = shapley_exact(game)
    else:
        report = shapley_multilinear(game, args.p_grid, args.samples,
                                     np.random.default_rng([args.seed]))
    out = Path(args.out)
    prov = _provenance(ckpt=bundle.config_digest, method=args.method)
    write_csv(out / "shapley.csv", report.header(), report.rows(), prov)
    bucket = args.bucket or max(1, game.n_players // 3)
    summary = concentration_summary(report, bucket)
    write_csv(out / "shapley_summary.csv", ["bucket", "share"], summary.rows(), prov)
    residual = report.efficiency_residual
    write_json(out / "shapley_summary.json", {
        "method": args.method, "efficiency_residual": residual,
        "value_full": report.value_full, "value_empty": report.value_empty,
        "shares": summary.shares, "shares_undefined": summary.undefined, "provenance": prov})
    print(f"efficiency residual: {residual:.3e}")
    return 0


def cmd_verify_bound(args):
    p_grid = np.linspace(0.0, 1.0, args.p_grid)
    if args.random_model:
        rng = np.random.default_rng([args.seed])
        model = random_model(rng, args.depth)
        x = rng.normal(size=(args.points, model.input_dim))
        if args.loss == "mse":
            y = rng.normal(size=(args.points, model.output_dim))
        else:
            y = rng.integers(0, model.output_dim, size=args.points)
        digest = f"random-model seed={args.seed} depth={args.depth}"
    elif args.ckpt:
        bundle = _load(args.ckpt)
        cfg = _run_config_of(bundle, args.ckpt)
        _, ev = build_task(cfg)
        model = bundle.model
        take = min(args.points, len(ev))
        x, y = ev.inputs[:take], ev.labels[:take]
        if args.loss == "mse":
            y = np.eye(model.output_dim)[y]
        digest = bundle.config_digest
    else:
        raise CliError("give --ckpt or --random-model", EXIT_CONFIG)
    try:
        report = verify_bound(model, x, y, p_grid, args.loss)
    except ContractError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    path = write_csv(Path(args.out) / "bound.csv", ["p", "lhs", "rhs_full", "rhs_j_ge_1", "gap"],
                     report.rows(), _provenance(model=digest, loss=args.loss))
    print(f"min gap {report.gap.min():.3e} over {report.n_masks} masks -> {path}")
    return 0


def cmd_distances(args):
    bundles = {}
    for path in args.ckpts:
        bundles[str(path)] = _load(path)
    models = list(bundles.values())
    if any(not _same_architecture(models[0].model, m.model) for m in models[1:]):
        raise CliError("checkpoints do not share an architecture", EXIT_ARCH)
    rows = weight_distance_report(bundles)
    path = write_csv(Path(args.out) / "distances.csv", ["a", "b", "distance"], rows,
                     _provenance())
    print(f"wrote {path}")
    return 0


def cmd_reproduce(args):
    cfg = load_run_config(args.config) if args.config else reference_run_config()
    out = Path(args.out)
    figures = FIGURES if args.figure == "all" else (args.figure,)
    runs = ReferenceRuns(cfg)
    verdict = {}
    for fig in figures:
        tables, v = reproduce(fig, cfg, runs)
        for stem, (header, rows) in tables.items():
            write_csv(out / f"{stem}.csv", header, rows, _provenance(run_config=cfg.digest()))
        verdict.update(v)
    write_json(out / "verdict.json", {"figures": list(figures), "criteria": verdict,
                                      "provenance": _provenance(run_config=cfg.digest())})
    for name, v in verdict.items():
        print(f"{'PASS' if v['passed'] else 'FAIL'} {name}")
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cotolab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train adapters from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("interpolate", help="sweep lambda between two checkpoints")
    i.add_argument("--a", required=True)
    i.add_argument("--b", required=True)
    i.add_argument("--grid", type=int, default=11)
    i.add_argument("--mode", choices=("fusion", "ensemble", "aligned-fusion"), default="fusion")
    i.add_argument("--align-report", action="store_true")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interpolate)

    m = sub.add_parser("merge", help="merge two checkpoints at one lambda")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--mode", choices=("fusion", "ensemble", "aligned-fusion"), default="fusion")
    m.add_argument("--lambda", dest="lam", type=float, default=0.5)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    r = sub.add_parser("prune", help="structured or unstructured pruning sweep")
    r.add_argument("--ckpt", required=True)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--pattern", help="comma list of every-other,low,middle,high,all")
    g.add_argument("--sparsity-grid", help="comma list of fractions in [0, 1]")
    r.add_argument("--per-layer", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_prune)

    s = sub.add_parser("shapley", help="adapter Shapley values")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--method", choices=("exact", "multilinear"), default="multilinear")
    s.add_argument("--p-grid", type=int, default=11)
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bucket", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_shapley)

    v = sub.add_parser("verify-bound", help="exhaustive check of the subnetwork bound")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--random-model", action="store_true")
    v.add_argument("--depth", type=int, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--points", type=int, default=32)
    v.add_argument("--p-grid", type=int, default=11)
    v.add_argument("--loss", choices=("mse", "softmax-cross-entropy"), default="mse")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify_bound)

    d = sub.add_parser("distances", help="mean adapter weight distances")
    d.add_argument("--ckpts", nargs="+", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distances)

    x = sub.add_parser("reproduce", help="desk-scale reproduction bundles")
    x.add_argument("--figure", choices=FIGURES + ("all",), required=True)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
