"""Average precision, bootstrap intervals and report aggregation."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError

N_RESAMPLES = 1000
LEVEL = 0.99


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DataError(f"{len(s)} scores but {len(y)} labels")
    if np.isnan(s).any():
        raise DataError("scores contain NaN")
    y = y.astype(bool)
    return s, y


def average_precision(scores, labels):
    """Step-wise AP; equal scores form a single threshold step."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise DataError("average precision needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    # extended precision so the final double is correctly rounded in
    # practice (e.g. exactly 5/6 for the textbook four-row example)
    tp = tp[ends].astype(np.longdouble)
    gained = np.diff(np.r_[np.longdouble(0), tp])
    step = gained > 0
    total = np.sum(gained[step] * tp[step] / (ends[step] + 1).astype(np.longdouble))
    return float(total / n_pos)


def bootstrap_ci(scores, labels, n_resamples=N_RESAMPLES, level=LEVEL, seed=0):
    """Percentile bootstrap of AP: (mean, std_err, lo, hi).

    Resamples that contain a single class are redrawn.
    """
    if n_resamples < 100:
        raise ConfigError("n_resamples", "must be >= 100")
    if not 0.0 < level < 1.0:
        raise ConfigError("level", "must lie in (0, 1)")
    s, y = _check(scores, labels)
    average_precision(s, y)  # validates both classes
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    n = len(s)
    aps = np.empty(n_resamples)
    for k in range(n_resamples):
        while True:
            idx = rng.integers(0, n, size=n)
            pos = int(y[idx].sum())
            if 0 < pos < n:
                break
        aps[k] = average_precision(s[idx], y[idx])
    lo, hi = np.quantile(aps, [0.5 - level / 2, 0.5 + level / 2])
    return float(aps.mean()), float(aps.std(ddof=1)), float(lo), float(hi)


@dataclass
class MetricReport:
    task: str
    representation: str
    ap: float
    mean: float
    std_err: float
    ci_low: float
    ci_high: float
    n_test: int
    base_rate: float
    split_id: str = ""
    cohort: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_report(task, representation, scores, labels, n_resamples=N_RESAMPLES, level=LEVEL, seed=0,
                split_id="", cohort=""):
    _, y = _check(scores, labels)
    ap = average_precision(scores, labels)
    mean, se, lo, hi = bootstrap_ci(scores, labels, n_resamples, level, seed)
    return MetricReport(task, representation, ap, mean, se, lo, hi, len(y), float(y.mean()), split_id, cohort)


def pct_improvement(report, raw_report):
    if report.task != raw_report.task:
        raise DataError(f"task mismatch: {report.task} vs {raw_report.task}")
    if (report.split_id != raw_report.split_id or report.n_test != raw_report.n_test
            or report.cohort != raw_report.cohort):
        raise DataError("reports were computed on different test splits")
    if raw_report.ap <= 0:
        raise DataError("baseline AP must be positive")
    return 100.0 * (report.ap - raw_report.ap) / raw_report.ap


@dataclass
class AggregateReport:
    task: str
    representation: str
    mean: float
    std_err: float
    cohorts: tuple


def aggregate_cohorts(a, b):
    """Average means and standard errors of two cohort reports.

    Works on MetricReport (AP scale) or on (task, representation, mean, std_err)
    tuples, e.g. percent improvements.
    """
    ra, rb = (_as_tuple(r) for r in (a, b))
    if ra[1] != rb[1]:
        raise DataError(f"representation mismatch: {ra[1]} vs {rb[1]}")
    if ra[0] != rb[0]:
        raise DataError(f"task mismatch: {ra[0]} vs {rb[0]}")
    return AggregateReport(ra[0], ra[1], (ra[2] + rb[2]) / 2, (ra[3] + rb[3]) / 2, (ra[4], rb[4]))


def _as_tuple(r):
    if isinstance(r, MetricReport):
        return r.task, r.representation, r.mean, r.std_err, r.cohort
    if isinstance(r, AggregateReport):
        return r.task, r.representation, r.mean, r.std_err, r.cohorts
    task, rep, mean, se = r[:4]
    return task, rep, float(mean), float(se), r[4] if len(r) > 4 else ""


def write_report(path, report):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)


def read_report(path):
    with open(path) as f:
        return MetricReport.from_dict(json.load(f))


FIGURE_COLUMNS = ["cohort", "task", "representation", "ap", "mean", "std_err", "ci_low", "ci_high",
                  "n_test", "base_rate", "pct_improvement"]


def write_figure_csv(path, reports):
    """One row per (cohort, task, representation); improvement vs the raw row when present."""
    raw = {(r.cohort, r.task): r for r in reports if r.representation == "raw"}
    rows = sorted(reports, key=lambda r: (r.cohort, r.task, r.representation))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FIGURE_COLUMNS)
        for r in rows:
            base = raw.get((r.cohort, r.task))
            imp = ""
            if base is not None:
                try:
                    imp = repr(pct_improvement(r, base))
                except DataError:
                    imp = ""
            w.writerow([r.cohort, r.task, r.representation, repr(r.ap), repr(r.mean), repr(r.std_err),
                        repr(r.ci_low), repr(r.ci_high), r.n_test, repr(r.base_rate), imp])
    return len(rows)


def ap_standard_error(base_rate, n):
    """Rough std-err of AP under random scores (binomial on the base rate)."""
    return math.sqrt(base_rate * (1 - base_rate) / n)
