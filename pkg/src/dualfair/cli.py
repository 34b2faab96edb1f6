"""Command-line entry point: ``dualfair <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation
from . import fairmetrics as fm
from .anchors import leakage_table, ridge_debias
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ExperimentConfig, _parse
from .datagen import Dataset, load_csv, save_csv
from .errors import DualFairError, ParseError, SchemaError, SpecError
from . import numerics as nx
from .objective import TrainState, evaluate, format_log, train

log = logging.getLogger("dualfair")


class UsageError(Exception):
    """Bad invocation; mapped to exit status 2."""


# -- helpers ---------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = ExperimentConfig.load(path)
        except ParseError as exc:
            raise UsageError(str(exc)) from None
    else:
        cfg = ExperimentConfig()
        if os.environ.get("FAIRPROMPT_SEED") is not None:
            cfg.train.seed = int(os.environ["FAIRPROMPT_SEED"])
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        try:
            cfg.set(key, _typed(value), source="--set")
        except ParseError as exc:
            raise UsageError(str(exc)) from None
    if args.preset:
        cfg.train.preset = args.preset
    try:
        cfg.train.validate()
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _typed(value: str):
    return _parse(value)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle(cfg: ExperimentConfig) -> ablation.DataBundle:
    """Datasets named in the config, falling back to generating them from the data section."""
    n_patches = cfg.train.dims().n_patches
    gen = ablation.build_data(cfg.data, cfg.train.seed, cfg.train.dims())
    pick = lambda path, fallback: load_csv(path, n_patches) if path else fallback
    return ablation.DataBundle(pick(cfg.train_csv, gen.train), pick(cfg.test_csv, gen.test),
                               pick(cfg.ood_csv, gen.ood))


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    out = _out_dir(args, cfg)
    b = ablation.build_data(cfg.data, cfg.train.seed, cfg.train.dims())
    for name, ds in (("train", b.train), ("test", b.test), ("ood", b.ood)):
        save_csv(ds, out / f"{name}.csv")
        print(f"wrote {out / (name + '.csv')} ({len(ds)} rows)")
    cfg.save(out / "config.txt")
    return 0


def cmd_train(args, cfg) -> int:
    out = _out_dir(args, cfg)
    if args.stop_grad_anchors:
        cfg.train.stop_grad_anchors = True
    if args.resume:
        state = load_checkpoint(args.resume)
        if args.epochs is not None:
            state.cfg.epochs = args.epochs
    else:
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        state = TrainState(cfg.train)
    cfg.train = state.cfg
    cfg.save(out / "config.txt")
    data = _bundle(cfg).train
    log_path = out / "train.log"
    with open(log_path, "a" if args.resume else "w") as fh:
        def emit(rec):
            fh.write(format_log(rec) + "\n")
            if args.checkpoint_every and rec["step"] % args.checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint_step{rec['step']}.bin")
        train(state, data, log=emit, stop_at_step=args.stop_at_step)
    save_checkpoint(state, out / "checkpoint.bin")
    print(f"trained to step {state.step}; log {log_path}; checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args, cfg) -> int:
    out = _out_dir(args, cfg)
    state = load_checkpoint(args.checkpoint)
    n_patches = state.cfg.dims().n_patches
    if args.data:
        splits = {args.split or Path(args.data).stem: load_csv(args.data, n_patches)}
    else:
        cfg.train = state.cfg
        b = _bundle(cfg)
        splits = {"ID": b.test, "OOD": b.ood}
    for name, ds in splits.items():
        _, recs = evaluate(state.model, ds)
        fm.write_predictions(recs, out / f"predictions_{name}.csv")
        rep = fm.report(recs, name)
        (out / f"report_{name}.csv").write_text(rep.to_csv(percent=True))
        (out / f"report_{name}.txt").write_text(rep.to_text())
        print(rep.to_text(), end="")
        if args.export_embeddings:
            _export_embeddings(state, ds, out / f"embeddings_{name}.csv")
    if args.export_embeddings:
        _export_prototypes(state, out / "prototypes.csv")
    return 0


def _export_embeddings(state, ds: Dataset, path):
    """Normalised projection-head embeddings r for both branches (needs L_dis enabled)."""
    model = state.model
    if model.proj_head is None:
        raise DualFairError("embedding export needs use_dis = true")
    from .disentangle import project_normalize
    with nx.no_grad(), open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "branch", "y", "a"] + [f"r{i}" for i in range(model.dims.d_p)])
        for i in range(0, len(ds), 256):
            z_v, _ = model.forward(ds.patches[i:i + 256])
            for b, z in z_v.items():
                r = project_normalize(z, model.proj_head).data
                for j, row in enumerate(r):
                    k = i + j
                    w.writerow([int(ds.ids[k]), b, int(ds.y[k]), int(ds.a[k])] + [repr(float(v)) for v in row])


def _export_prototypes(state, path):
    mu = state.model.bank.mu
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "a", "branch"] + [f"mu{i}" for i in range(mu.shape[-1])])
        for y in range(mu.shape[0]):
            for a in range(mu.shape[1]):
                for bi, b in enumerate(("SA", "TA")):
                    w.writerow([y, a, b] + [repr(float(v)) for v in mu[y, a, bi]])


def _read_embedding_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "branch"] or len(rows[0]) < 3:
        raise SchemaError(f"{path}: header must be id,branch,v0,...")
    width = len(rows[0]) - 2
    ids, branches, vals = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 2:
            raise ParseError(f"{path}: expected {width + 2} fields, got {len(row)}", lineno)
        if row[1] not in ("SA", "TA"):
            raise ParseError(f"{path}: branch must be SA or TA, got {row[1]!r}", lineno)
        try:
            ids.append(row[0])
            branches.append(row[1])
            vals.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", lineno) from None
    return rows[0], ids, branches, np.array(vals, dtype=np.float64).reshape(len(ids), width)


def cmd_debias_anchors(args, cfg) -> int:
    out = _out_dir(args, cfg)
    header, ids, branches, V = _read_embedding_csv(args.input)
    sa = np.array([b == "SA" for b in branches])
    if not sa.any() or sa.all():
        raise DualFairError(f"{args.input}: need at least one SA row and one TA row")
    alpha = cfg.train.alpha if args.alpha is None else args.alpha
    deb = V.copy()
    deb[~sa] = ridge_debias(V[sa], V[~sa], alpha).data
    with open(out / "debiased.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ids)):
            w.writerow([ids[i], branches[i]] + [repr(float(v)) for v in deb[i]])
    alphas = sorted({1000.0, 100.0, 60.0, 10.0, 1.0, 0.1, 1e-9, float(alpha)}, reverse=True)
    table = leakage_table(V[sa], V[~sa], alphas)
    with open(out / "leakage.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "sa_leakage"])
        for a, lk in table:
            w.writerow([repr(a), repr(lk)])
    print(f"{'alpha':>12}  {'SA leakage':>10}")
    for a, lk in table:
        print(f"{a:12.4g}  {lk:10.6f}")
    return 0


def cmd_metrics(args, cfg) -> int:
    recs = fm.read_predictions(args.predictions)
    rep = fm.report(recs, args.split)
    text = rep.to_text()
    if args.out:
        out = _out_dir(args, cfg)
        (out / "report.csv").write_text(rep.to_csv(percent=True))
        (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    seeds = list(range(args.seeds if args.seeds is not None else cfg.grid_seeds))
    if args.sweep:
        param, _, values = args.sweep.partition("=")
        field = {f.name: f for f in dataclasses.fields(cfg.train)}.get(param)
        if field is None or not values:
            raise UsageError(f"--sweep expects <train field>=v1,v2,..., got {args.sweep!r}")
        vals = [_typed(v) for v in values.split(",")]
        rows = ablation.sweep(cfg.train, cfg.data, param, vals, seeds, jobs=args.jobs)
    elif args.ratios:
        ratios = [float(r) for r in args.ratios.split(",")]
        rows = ablation.data_ratio_sweep(cfg.train, cfg.data, ratios, seeds=seeds)
    else:
        cells = [c.strip() for c in (args.cells or cfg.grid_cells).split(",") if c.strip()]
        unknown = [c for c in cells if c not in ablation.CELLS]
        if unknown:
            raise UsageError(f"unknown cells {unknown}; choose from {list(ablation.CELLS)}")
        grid = ablation.AblationGrid(cells=cells, seeds=seeds)
        rows = ablation.run_grid(grid, cfg.train, cfg.data, jobs=args.jobs)
    (out / "ablation.csv").write_text(ablation.to_csv(rows))
    table = ablation.to_table(rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help="output directory (default: out_dir from the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="model dimension preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry, e.g. train.epochs=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualfair", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write synthetic train/test/ood CSVs")

    t = sub.add_parser("train", parents=[common], help="train and write checkpoints + log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="STEPS")
    t.add_argument("--stop-at-step", type=int, help="stop early after this many total steps")
    t.add_argument("--stop-grad-anchors", action="store_true",
                   help="block gradients through the debiasing projection")

    e = sub.add_parser("eval", parents=[common], help="predictions CSV + fairness report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset CSV (default: ID and OOD test sets from the config)")
    e.add_argument("--split", help="split name used in output file names")
    e.add_argument("--export-embeddings", action="store_true",
                   help="also write r embeddings and the prototype bank as CSV")

    d = sub.add_parser("debias-anchors", parents=[common], help="ridge-debias TA rows of an embedding CSV")
    d.add_argument("--input", required=True, help="CSV with header id,branch,v0,...")
    d.add_argument("--alpha", type=float)

    m = sub.add_parser("metrics", parents=[common], help="fairness report from a predictions CSV")
    m.add_argument("--predictions", required=True)
    m.add_argument("--split", default="test")

    a = sub.add_parser("ablate", parents=[common], help="component grid or hyperparameter sweep")
    a.add_argument("--cells", help="comma-separated grid cells (a..h, Ours)")
    a.add_argument("--seeds", type=int, help="number of seeds per cell")
    a.add_argument("--jobs", type=int, default=1, help="worker processes")
    g = a.add_mutually_exclusive_group()
    g.add_argument("--sweep", metavar="PARAM=V1,V2", help="sweep one train field instead of the grid")
    g.add_argument("--ratios", help="comma-separated training-data ratios")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "debias-anchors": cmd_debias_anchors, "metrics": cmd_metrics, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dualfair {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (DualFairError, OSError, ValueError) as exc:
        print(f"dualfair {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
