"""Imputation, standardization, windowing, labeling and EMA features."""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .synthgen import PHENYL
from .tasks import EXCLUDED, N_TIME, LabelSpec, get_spec, label_series

DEFAULT_DECAYS = (0.5, 0.1, 0.02)
_DEGENERATE_STD = 1e-12


@dataclass
class PrepStats:
    """Training-split means and (population) standard deviations."""

    signal_names: list
    signal_mean: np.ndarray
    signal_std: np.ndarray
    static_names: list
    static_mean: np.ndarray
    static_std: np.ndarray

    def for_signal(self, name):
        try:
            j = self.signal_names.index(name)
        except ValueError:
            raise DataError(f"no prep stats for signal {name!r}") from None
        return float(self.signal_mean[j]), float(self.signal_std[j])

    def to_dict(self):
        return {
            "signal_names": list(self.signal_names),
            "signal_mean": [float(x) for x in self.signal_mean],
            "signal_std": [float(x) for x in self.signal_std],
            "static_names": list(self.static_names),
            "static_mean": [float(x) for x in self.static_mean],
            "static_std": [float(x) for x in self.static_std],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["signal_names"]), np.array(d["signal_mean"], dtype=float),
                   np.array(d["signal_std"], dtype=float), list(d["static_names"]),
                   np.array(d["static_mean"], dtype=float), np.array(d["static_std"], dtype=float))


def _mean_std(chunks):
    n = sum(int(np.count_nonzero(~np.isnan(c))) for c in chunks)
    if n == 0:
        return None, None
    total = sum(float(np.nansum(c)) for c in chunks)
    mean = total / n
    ss = sum(float(np.nansum((c - mean) ** 2)) for c in chunks)
    std = np.sqrt(ss / n)
    if std < _DEGENERATE_STD:
        std = 1.0
    return mean, std


def fit_prep_stats(train):
    """Means and population stds over observed (non-missing) training values."""
    if len(train) == 0:
        raise DataError("cannot fit prep stats on an empty cohort")
    s_mean, s_std = [], []
    for j, name in enumerate(train.signal_names):
        m, s = _mean_std([p.values[:, j] for p in train.procedures])
        if m is None:
            raise DataError(f"signal {name!r} has no observed values in the training split")
        s_mean.append(m)
        s_std.append(s)
    st_mean, st_std = [], []
    statics = np.array([p.static for p in train.procedures], dtype=float)
    for k in range(statics.shape[1]):
        m, s = _mean_std([statics[:, k]])
        st_mean.append(0.0 if m is None else m)
        st_std.append(1.0 if s is None else s)
    return PrepStats(list(train.signal_names), np.array(s_mean), np.array(s_std),
                     list(train.static_names), np.array(st_mean), np.array(st_std))


@dataclass
class PreparedProcedure:
    procedure_id: str
    static: np.ndarray   # standardized, imputed
    values: np.ndarray   # (length, n_signals) standardized, imputed


def standardize_values(values, mean, std):
    """(x - mean) / std with missing entries imputed by the mean (i.e. 0)."""
    z = (np.asarray(values, dtype=float) - mean) / std
    return np.where(np.isnan(z), 0.0, z)


def impute_and_standardize(cohort, stats):
    unknown = [n for n in cohort.signal_names if n not in stats.signal_names]
    if unknown:
        raise DataError(f"signals {unknown} have no prep stats")
    idx = [stats.signal_names.index(n) for n in cohort.signal_names]
    mean, std = stats.signal_mean[idx], stats.signal_std[idx]
    out = []
    for p in cohort.procedures:
        out.append(PreparedProcedure(p.procedure_id,
                                     standardize_values(p.static, stats.static_mean, stats.static_std),
                                     standardize_values(p.values, mean, std)))
    return out


@dataclass
class SignalWindow:
    values: np.ndarray
    signal_name: str
    procedure_id: str
    t: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (N_TIME,):
            raise DataError(f"window must have {N_TIME} values, got shape {self.values.shape}")
        if np.isnan(self.values).any():
            raise DataError("window contains missing values; impute first")


@dataclass
class LabeledDataset:
    """Labeled time points of one cohort for one task.

    Only included (non-excluded) points are kept.  ``proc`` indexes into
    ``cohort.procedures``.
    """

    cohort: object
    spec: LabelSpec
    proc: np.ndarray
    t: np.ndarray
    label: np.ndarray
    n_excluded: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.label)

    @property
    def base_rate(self):
        return float(self.label.mean()) if len(self.label) else float("nan")

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledDataset(self.cohort, self.spec, self.proc[idx], self.t[idx], self.label[idx],
                              self.n_excluded, dict(self.meta))

    def procedure_ids(self):
        return [self.cohort.procedures[i].procedure_id for i in self.proc]

    def raw_windows(self, signal):
        """(n, 60) raw windows of one signal, NaN where missing."""
        j = self.cohort.signal_index(signal)
        out = np.empty((len(self), N_TIME))
        for i in np.unique(self.proc):
            rows = np.nonzero(self.proc == i)[0]
            series = self.cohort.procedures[i].values[:, j]
            view = sliding_window_view(series, N_TIME)
            out[rows] = view[self.t[rows] - (N_TIME - 1)]
        return out

    def raw_future(self, signal, horizon):
        """(n, horizon) raw values at t+1..t+horizon."""
        j = self.cohort.signal_index(signal)
        out = np.empty((len(self), horizon))
        for i in np.unique(self.proc):
            rows = np.nonzero(self.proc == i)[0]
            series = self.cohort.procedures[i].values[:, j]
            view = sliding_window_view(series, horizon)
            out[rows] = view[self.t[rows] + 1]
        return out

    def static_matrix(self):
        return np.array([self.cohort.procedures[i].static for i in self.proc], dtype=float).reshape(len(self), -1)

    def windows(self, signal, stats):
        """Standardized, imputed windows using ``stats`` for this signal."""
        mean, std = stats.for_signal(signal)
        return standardize_values(self.raw_windows(signal), mean, std)


def label_points(cohort, spec):
    """Label every eligible minute of every procedure for one task."""
    if isinstance(spec, str):
        spec = get_spec(spec)
    phenyl = spec.task == "phenylephrine"
    if not phenyl:
        j = cohort.signal_index(spec.signal)
    procs, ts, labels = [], [], []
    n_excl = 0
    dropped = 0
    for i, p in enumerate(cohort.procedures):
        if phenyl:
            if not np.any(p.phenylephrine):
                dropped += 1
                continue
            t, lab = label_series(None, spec, p.phenylephrine)
        else:
            t, lab = label_series(p.values[:, j], spec)
        keep = lab != EXCLUDED
        n_excl += int(np.count_nonzero(~keep))
        procs.append(np.full(int(keep.sum()), i, dtype=np.int64))
        ts.append(t[keep])
        labels.append(lab[keep].astype(np.int8))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    ds = LabeledDataset(cohort, spec, cat(procs, np.int64), cat(ts, np.int64), cat(labels, np.int8), n_excl)
    ds.meta["dropped_procedures"] = dropped
    return ds


def subsample(ds, max_rows, seed):
    """Uniformly keep at most ``max_rows`` points (order preserved)."""
    if max_rows is None or len(ds) <= max_rows:
        return ds
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    idx = np.sort(rng.choice(len(ds), size=max_rows, replace=False))
    return ds.subset(idx)


def ema_features(window, decays=DEFAULT_DECAYS):
    """Final EMA and EMV per decay, then the current raw value.

    ``window`` is a 1-d window or an (n, T) batch of windows.
    """
    x = np.asarray(window.values if isinstance(window, SignalWindow) else window, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] == 0:
        raise DataError("cannot compute EMA features of an empty window")
    decays = list(decays)
    for a in decays:
        if not 0.0 < a <= 1.0:
            raise ConfigError("decays", f"decay {a} not in (0, 1]")
    out = np.empty((x.shape[0], 2 * len(decays) + 1))
    for k, a in enumerate(decays):
        m = x[:, 0].copy()
        v = np.zeros(x.shape[0])
        for i in range(1, x.shape[1]):
            d = x[:, i] - m
            v = (1 - a) * (v + a * d * d)
            m = m + a * d
        out[:, 2 * k] = m
        out[:, 2 * k + 1] = v
    out[:, -1] = x[:, -1]
    return out[0] if single else out


def write_dataset(path, ds, features=None, feature_names=None):
    """``dataset.csv``: procedure_id, t, label, then feature columns."""
    ids = ds.procedure_ids()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["procedure_id", "t", "label"]
        if features is not None:
            header += list(feature_names or [f"f{k}" for k in range(features.shape[1])])
        w.writerow(header)
        for r in range(len(ds)):
            row = [ids[r], int(ds.t[r]), int(ds.label[r])]
            if features is not None:
                row += ["" if np.isnan(v) else repr(float(v)) for v in features[r]]
            w.writerow(row)


def read_dataset(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    body = rows[1:]
    ids = [r[0] for r in body]
    t = np.array([int(r[1]) for r in body], dtype=np.int64)
    y = np.array([int(r[2]) for r in body], dtype=np.int8)
    X = np.array([[float(v) if v != "" else np.nan for v in r[3:]] for r in body]).reshape(len(body), len(header) - 3)
    return ids, t, y, X, header[3:]


__all__ = ["PHENYL", "DEFAULT_DECAYS", "PrepStats", "SignalWindow", "LabeledDataset", "fit_prep_stats",
           "impute_and_standardize", "label_points", "ema_features", "standardize_values", "subsample"]
