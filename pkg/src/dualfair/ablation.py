"""Component grid, hyperparameter sweeps and data-ratio robustness at toy scale."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fairmetrics as fm
from .config import DataConfig, TrainConfig
from .datagen import DataSpec, Dataset, generate, shift_domain, split, subsample
from .objective import TrainState, evaluate, train

log = logging.getLogger(__name__)

# (L_dis, H, Attn, Proj) per row of the component table
CELLS = {
    "a": (False, False, False, True),
    "b": (True, False, False, False),
    "c": (True, False, False, True),
    "d": (False, False, True, False),
    "e": (True, False, True, False),
    "f": (True, False, True, True),
    "g": (False, True, True, False),
    "h": (True, True, True, False),
    "Ours": (True, True, True, True),
}


def cell_config(base: TrainConfig, cell: str) -> TrainConfig:
    dis, hyper, attn, proj = CELLS[cell]
    return dataclasses.replace(base, use_dis=dis, use_hyper=hyper, use_attn=attn, use_proj=proj,
                               delta=base.delta if dis else 0.0)


@dataclass
class AblationGrid:
    cells: list[str] = field(default_factory=lambda: list(CELLS))
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    aggregate: str = "median"


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset
    ood: Dataset


def build_data(dcfg: DataConfig, seed: int, dims=None) -> DataBundle:
    """ID train/test from one seeded draw (70/10/20) plus a shifted OOD draw."""
    n_patches = dims.n_patches if dims else 16
    d_patch = dims.d_patch if dims else 8
    spec = DataSpec(n=dcfg.n, n_patches=n_patches, d_patch=d_patch, rho=dcfg.rho, noise=dcfg.noise,
                    target_scale=dcfg.target_scale, sensitive_scale=dcfg.sensitive_scale,
                    p_y=dcfg.p_y, rotation_deg=dcfg.rotation_deg, offset=dcfg.offset,
                    seed=seed, world_seed=dcfg.world_seed)
    tr, _, te = split(generate(spec), seed=seed)
    ood_rho = dcfg.rho if dcfg.ood_rho < 0 else dcfg.ood_rho
    ood_spec = dataclasses.replace(spec, n=dcfg.n_ood, rho=ood_rho, seed=seed + 10_000)
    ood = shift_domain(generate(ood_spec), spec)
    return DataBundle(tr, te, ood)


def run_once(cfg: TrainConfig, bundle: DataBundle, keep_state: bool = False):
    """Train one config and report (auc, dpd, deodds) for the ID and OOD splits."""
    state = TrainState(cfg)
    train(state, bundle.train)
    row = {"n_params": state.model.n_params()}
    for name, data in (("ID", bundle.test), ("OOD", bundle.ood)):
        _, recs = evaluate(state.model, data)
        rep = fm.report(recs, name)
        row[name] = {"auc": rep.auc, "dpd": rep.dpd, "deodds": rep.deodds}
    if keep_state:
        row["state"] = state
    return row


def _job(args):
    cfg, dcfg, seed = args
    try:
        return run_once(cfg, build_data(dcfg, seed, cfg.dims()))
    except Exception as exc:  # recorded, the grid continues
        log.warning("cell failed (seed %s): %s", seed, exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


def run_configs(named: dict[str, TrainConfig], dcfg: DataConfig, seeds, jobs: int = 1):
    """Every (name, seed) pair trained independently; returns name -> per-seed rows."""
    tasks = [(name, dataclasses.replace(cfg, seed=s), s) for name, cfg in named.items() for s in seeds]
    args = [(cfg, dcfg, s) for _, cfg, s in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_job, args))
    else:
        results = [_job(a) for a in args]
    out: dict[str, list] = {name: [] for name in named}
    for (name, _, _), res in zip(tasks, results):
        out[name].append(res)
    return out


def summarize(per_seed: dict[str, list], how: str = "median") -> list[dict]:
    agg = np.median if how == "median" else np.mean
    rows = []
    for name, runs in per_seed.items():
        ok = [r for r in runs if "error" not in r]
        for split_name in ("ID", "OOD"):
            row = {"cell": name, "split": split_name, "n_seeds": len(ok),
                   "n_failed": len(runs) - len(ok)}
            for m in ("auc", "dpd", "deodds"):
                vals = [r[split_name][m] for r in ok]
                row[m] = float(agg(vals)) if vals else float("nan")
            row["n_params"] = ok[0]["n_params"] if ok else 0
            rows.append(row)
    return rows


def run_grid(grid: AblationGrid, base: TrainConfig, dcfg: DataConfig, jobs: int = 1) -> list[dict]:
    named = {c: cell_config(base, c) for c in grid.cells}
    return summarize(run_configs(named, dcfg, grid.seeds, jobs), grid.aggregate)


def sweep(base: TrainConfig, dcfg: DataConfig, param: str, values, seeds, jobs: int = 1):
    named = {f"{param}={v}": dataclasses.replace(base, **{param: v}) for v in values}
    return summarize(run_configs(named, dcfg, seeds, jobs))


def data_ratio_sweep(base: TrainConfig, dcfg: DataConfig, ratios=(0.01, 0.05, 0.1, 0.2, 0.5, 1.0),
                     seeds=(0,), sample_seed: int = 0):
    """Subsample the training split at each ratio with a fixed seed; test splits stay fixed."""
    per: dict[str, list] = {}
    for s in seeds:
        cfg = dataclasses.replace(base, seed=s)
        bundle = build_data(dcfg, s, cfg.dims())
        for r in ratios:
            sub = subsample(bundle.train, r, seed=sample_seed)
            if len(sub) < cfg.batch_size:
                log.warning("ratio %s leaves %d samples (< one batch); skipped", r, len(sub))
                continue
            per.setdefault(f"ratio={r}", []).append(run_once(cfg, DataBundle(sub, bundle.test, bundle.ood)))
    return summarize(per)


def param_counts(base: TrainConfig, cells=None) -> dict[str, int]:
    from .objective import DualFairModel
    return {c: DualFairModel(cell_config(base, c)).n_params() for c in (cells or CELLS)}


# -- reporting ----------------------------------------------------------------------

COLUMNS = ["cell", "split", "auc", "dpd", "deodds", "n_params", "n_seeds", "n_failed"]


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def to_table(rows, percent: bool = True) -> str:
    k = 100.0 if percent else 1.0
    head = f"{'cell':<16}{'split':<6}{'AUC':>8}{'DPD':>8}{'DEOdds':>8}{'params':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['cell']:<16}{r['split']:<6}{r['auc'] * k:8.2f}{r['dpd'] * k:8.2f}"
                     f"{r['deodds'] * k:8.2f}{r['n_params']:9d}")
    return "\n".join(lines) + "\n"
