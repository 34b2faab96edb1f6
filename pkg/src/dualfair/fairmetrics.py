"""AUC, demographic parity difference and difference in equalized odds."""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import MetricUndefinedError, SchemaError, ParseError

PRED_HEADER = ["id", "score", "hard_label", "true_label", "group", "domain"]


@dataclass(frozen=True)
class PredictionRecord:
    id: int
    score: float
    hard_label: int
    true_label: int
    group: int
    domain: int = 0


def _arrays(records):
    score = np.array([r.score for r in records], dtype=np.float64)
    hard = np.array([r.hard_label for r in records], dtype=np.int64)
    y = np.array([r.true_label for r in records], dtype=np.int64)
    g = np.array([r.group for r in records], dtype=np.int64)
    return score, hard, y, g


def auc(records) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    score, _, y, _ = _arrays(records)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative label")
    ranks = rankdata(score)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def selection_rates(records) -> dict[int, float]:
    _, hard, _, g = _arrays(records)
    return {int(k): float(hard[g == k].mean()) for k in np.unique(g)}


def _rate(hard, sel) -> Fraction:
    # exact rationals so gaps are rounded once, not twice
    return Fraction(int(hard[sel].sum()), int(sel.sum()))


def dpd(records, groups=None) -> float:
    _, hard, _, g = _arrays(records)
    groups = sorted(np.unique(g)) if groups is None else groups
    rates = []
    for k in groups:
        sel = g == k
        if not sel.any():
            raise MetricUndefinedError(f"group {k} has no records")
        rates.append(_rate(hard, sel))
    if not rates:
        raise MetricUndefinedError("no records")
    return float(max(rates) - min(rates))


def _group_rates_exact(records, groups=None):
    _, hard, y, g = _arrays(records)
    groups = sorted(np.unique(g)) if groups is None else groups
    out = {}
    for k in groups:
        rates = []
        for label in (1, 0):
            sel = (g == k) & (y == label)
            if not sel.any():
                raise MetricUndefinedError(f"empty cell: group={k}, true_label={label}")
            rates.append(_rate(hard, sel))
        out[int(k)] = (rates[0], rates[1])
    return out


def group_rates(records, groups=None) -> dict[int, tuple[float, float]]:
    """Per-group (TPR, FPR); every (group, label) cell must be non-empty."""
    return {k: (float(t), float(f)) for k, (t, f) in _group_rates_exact(records, groups).items()}


def deodds(records, groups=None) -> float:
    """max(max-min TPR gap, max-min FPR gap) across groups."""
    rates = _group_rates_exact(records, groups)
    tpr = [v[0] for v in rates.values()]
    fpr = [v[1] for v in rates.values()]
    return float(max(max(tpr) - min(tpr), max(fpr) - min(fpr)))


@dataclass
class FairnessReport:
    split: str
    n: int
    auc: float
    dpd: float
    deodds: float
    selection_rate: dict = field(default_factory=dict)
    tpr: dict = field(default_factory=dict)
    fpr: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)   # (y, a) -> n

    def rows(self, percent: bool = False):
        k = 100.0 if percent else 1.0
        rows = [("split", self.split), ("n", self.n), ("auc", self.auc * k),
                ("dpd", self.dpd * k), ("deodds", self.deodds * k)]
        for grp in sorted(self.selection_rate):
            rows.append((f"selection_rate[a={grp}]", self.selection_rate[grp] * k))
            rows.append((f"tpr[a={grp}]", self.tpr[grp] * k))
            rows.append((f"fpr[a={grp}]", self.fpr[grp] * k))
        for (yy, aa) in sorted(self.counts):
            rows.append((f"count[y={yy},a={aa}]", self.counts[(yy, aa)]))
        return rows

    def to_csv(self, percent: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, val in self.rows(percent):
            w.writerow([key, repr(val) if isinstance(val, float) else val])
        return buf.getvalue()

    def to_text(self, percent: bool = True) -> str:
        unit = " %" if percent else ""
        k = 100.0 if percent else 1.0
        lines = [f"[{self.split}] n={self.n}",
                 f"  AUC    {self.auc * k:8.2f}{unit}",
                 f"  DPD    {self.dpd * k:8.2f}{unit}",
                 f"  DEOdds {self.deodds * k:8.2f}{unit}"]
        for grp in sorted(self.selection_rate):
            lines.append(f"  a={grp}: sel={self.selection_rate[grp] * k:.2f} "
                         f"tpr={self.tpr[grp] * k:.2f} fpr={self.fpr[grp] * k:.2f}")
        return "\n".join(lines) + "\n"


def report(records, split: str = "test") -> FairnessReport:
    records = list(records)
    _, _, y, g = _arrays(records)
    rates = group_rates(records)
    counts = {(int(yy), int(aa)): int(((y == yy) & (g == aa)).sum())
              for yy in np.unique(y) for aa in np.unique(g)}
    return FairnessReport(
        split=split, n=len(records), auc=auc(records), dpd=dpd(records), deodds=deodds(records),
        selection_rate=selection_rates(records),
        tpr={k: v[0] for k, v in rates.items()}, fpr={k: v[1] for k, v in rates.items()},
        counts=counts,
    )


def write_predictions(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_HEADER)
        for r in records:
            w.writerow([r.id, repr(float(r.score)), r.hard_label, r.true_label, r.group, r.domain])


def read_predictions(path) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != PRED_HEADER:
            raise SchemaError(f"{path}: header must be {','.join(PRED_HEADER)}")
        out = []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(PRED_HEADER):
                raise ParseError(f"{path}: expected {len(PRED_HEADER)} fields, got {len(row)}", lineno)
            try:
                rec = PredictionRecord(int(row[0]), float(row[1]), int(row[2]), int(row[3]),
                                       int(row[4]), int(row[5]))
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
            if not (0.0 <= rec.score <= 1.0) or not np.isfinite(rec.score):
                raise ParseError(f"{path}: score {rec.score} outside [0, 1]", lineno)
            out.append(rec)
    return out
