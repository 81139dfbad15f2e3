"""Downstream forecasting tasks and the per-series labeling rules.

Labels are computed on raw (unstandardized) values where ``NaN`` marks a
missing minute.  A time point ``t`` is eligible only when a full hour of
history exists (``t >= 59``) and the whole forecast horizon lies inside the
procedure (``t + horizon <= len - 1``).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

N_TIME = 60
HORIZON = 5
HISTORY_GUARD = 10

EXCLUDED = -1


@dataclass(frozen=True)
class LabelSpec:
    task: str
    signal: str
    threshold: float
    direction: str  # "below" or "above"
    horizon: int = HORIZON
    history_guard: int = HISTORY_GUARD

    def __post_init__(self):
        if self.direction not in ("below", "above"):
            raise ConfigError("direction", f"expected 'below' or 'above', got {self.direction!r}")
        if self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.history_guard < 1:
            raise ConfigError("history_guard", "must be >= 1")
        if not np.isfinite(self.threshold):
            raise ConfigError("threshold", "must be finite")


TASKS = {
    "hypoxemia": LabelSpec("hypoxemia", "SAO2", 93.0, "below"),
    "hypocapnia": LabelSpec("hypocapnia", "ETCO2", 34.0, "below"),
    "hypotension": LabelSpec("hypotension", "NIBPM", 59.0, "below"),
    "hypertension": LabelSpec("hypertension", "NIBPM", 110.0, "above"),
    "phenylephrine": LabelSpec("phenylephrine", "PHENYL", 0.5, "above"),
}


def get_spec(task):
    try:
        return TASKS[task]
    except KeyError:
        raise ConfigError("task", f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None


def eligible_times(length, horizon=HORIZON):
    """Minute indices that have 60 minutes of history and a full horizon."""
    return np.arange(N_TIME - 1, length - horizon)


def _windows(values, offsets_lo, offsets_hi, t):
    # rows of values[t + lo : t + hi + 1], NaN-padded past the end of the series
    width = offsets_hi - offsets_lo + 1
    pad = np.concatenate([values, np.full(width, np.nan)])
    view = sliding_window_view(pad, width)
    return view[t + offsets_lo]


def _reduce(win, fn):
    # fmin/fmax ignore NaN; an all-NaN row stays NaN
    return fn.reduce(win, axis=1)


def label_series(values, spec, phenylephrine=None):
    """Label every eligible minute of one procedure.

    Returns ``(t, labels)`` where labels are 0, 1 or ``EXCLUDED``.  For the
    phenylephrine task ``values`` is ignored and ``phenylephrine`` must hold
    the per-minute administration indicator.
    """
    h = spec.horizon
    g = spec.history_guard
    if spec.task == "phenylephrine":
        admin = np.asarray(phenylephrine, dtype=float)
        t = eligible_times(len(admin), h)
        if len(t) == 0:
            return t, np.zeros(0, dtype=np.int8)
        fut = _windows(admin, 1, h, t)
        return t, (fut.max(axis=1) > 0).astype(np.int8)

    values = np.asarray(values, dtype=float)
    t = eligible_times(len(values), h)
    if len(t) == 0:
        return t, np.zeros(0, dtype=np.int8)
    past = _windows(values, -(g - 1), 0, t)
    fut = _windows(values, 1, h, t)
    fut_long = _windows(values, 1, 2 * h, t)
    past_seen = ~np.all(np.isnan(past), axis=1)
    fut_seen = ~np.all(np.isnan(fut), axis=1)
    labels = np.full(len(t), EXCLUDED, dtype=np.int8)
    T = spec.threshold

    if spec.task == "hypoxemia":
        cur = values[t]
        fut_min = _reduce(fut, np.fmin)
        ok = past_seen & fut_seen & ~(cur < T)
        labels[ok] = (fut_min[ok] < T).astype(np.int8)
        return t, labels

    if spec.direction == "below":
        guard_ok = _reduce(past, np.fmin) > T
        pos = _reduce(fut, np.fmin) <= T
        neg = _reduce(fut_long, np.fmin) > T
    else:
        guard_ok = _reduce(past, np.fmax) < T
        pos = _reduce(fut, np.fmax) >= T
        neg = _reduce(fut_long, np.fmax) < T
    ok = past_seen & fut_seen & guard_ok
    labels[ok & neg] = 0
    labels[ok & pos] = 1
    return t, labels
