"""Exact interventional SHAP values for boosted tree ensembles.

For a foreground row ``x`` and a background row ``r`` the game is
``v(S) = f(x_S, r_rest)``.  Walking a tree, a node where ``x`` and ``r``
take the same branch adds nothing; where they disagree the path forks into
an "x side" (feature in S) and an "r side" (feature not in S), unless the
feature was already fixed higher up the path.  Each reached leaf therefore
defines a set A of features that must be in S and a set B that must not
be, and contributes

    +value * (|A|-1)! |B|! / (|A|+|B|)!   to each feature of A
    -value * |A|! (|B|-1)! / (|A|+|B|)!   to each feature of B.

All background rows are carried through one traversal as a batch of path
copies; results are averaged over the background and summed over trees.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .gbm import predict_margin

log = logging.getLogger(__name__)

BACKGROUND_SIZE = 128


@dataclass
class BackgroundSet:
    rows: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.rows.shape[0] == 0:
            raise DataError("background set is empty")


def sample_background(X, size=BACKGROUND_SIZE, seed=0):
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise DataError("cannot sample a background from an empty matrix")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(13,)))
    idx = np.sort(rng.choice(len(X), size=min(size, len(X)), replace=False))
    return BackgroundSet(X[idx], seed)


@dataclass
class AttributionRow:
    phi: np.ndarray
    expected_value: float
    output: float

    @property
    def residual(self):
        return self.expected_value + float(np.sum(self.phi)) - self.output


def _weights(max_depth):
    # W[a, b] = a! b! / (a + b + 1)!
    n = max_depth + 1
    W = np.zeros((n + 1, n + 1))
    for a in range(n + 1):
        for b in range(n + 1 - a):
            W[a, b] = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 1)
    return W


def _go_left(tree, node, v):
    return np.where(np.isnan(v), tree.missing_left[node], v < tree.threshold[node])


def _tree_shap(tree, x, R, W, phi):
    """Add this tree's background-summed attributions into ``phi``."""
    n_bg = R.shape[0]
    # path copies: background row index, |A|, |B|, and per-feature state (1 = A, 2 = B)
    stack = [(0, np.arange(n_bg), np.zeros(n_bg, dtype=np.int64), np.zeros(n_bg, dtype=np.int64), {})]
    while stack:
        node, rows, a, b, state = stack.pop()
        if len(rows) == 0:
            continue
        f = tree.feature[node]
        if f < 0:
            v = tree.value[node]
            for feat, st in state.items():
                in_a = st == 1
                in_b = st == 2
                if in_a.any():
                    phi[feat] += v * W[a[in_a] - 1, b[in_a]].sum()
                if in_b.any():
                    phi[feat] -= v * W[a[in_b], b[in_b] - 1].sum()
            continue
        x_left = bool(_go_left(tree, node, x[f]))
        r_left = _go_left(tree, node, R[rows, f])
        st = state.get(f)
        if st is None:
            st = np.zeros(len(rows), dtype=np.int8)
        agree = r_left == x_left
        undecided = st == 0
        # copies following x's branch: agreement, already on the x side, or newly forked to x
        to_x = agree | (st == 1) | undecided
        fork_x = ~agree & undecided
        # copies following the other branch: disagreement and on the r side (or newly forked)
        to_r = ~agree & ((st == 2) | undecided)
        fork_r = ~agree & undecided
        x_child = tree.left[node] if x_left else tree.right[node]
        r_child = tree.right[node] if x_left else tree.left[node]
        for child, sel, fork, mark, da, db in ((x_child, to_x, fork_x, 1, 1, 0), (r_child, to_r, fork_r, 2, 0, 1)):
            if not sel.any():
                continue
            new_state = {k: s[sel] for k, s in state.items()}
            s_f = st.copy()
            s_f[fork] = mark
            new_state[f] = s_f[sel]
            if not fork[sel].any() and f not in state and np.all(new_state[f] == 0):
                del new_state[f]
            stack.append((child, rows[sel], a[sel] + da * fork[sel], b[sel] + db * fork[sel], new_state))


def shap_interventional(forest, x, background):
    """Exact interventional SHAP values of one row in margin space."""
    if not isinstance(background, BackgroundSet):
        background = BackgroundSet(background)
    x = np.asarray(x, dtype=float)
    R = background.rows
    if x.shape != (forest.n_features,) or R.shape[1] != forest.n_features:
        raise DataError(f"width mismatch: row {x.shape}, background {R.shape}, forest {forest.n_features}")
    trees = forest.used_trees
    depth = max((t.depth() for t in trees), default=0)
    W = _weights(depth)
    phi = np.zeros(forest.n_features)
    for tree in trees:
        _tree_shap(tree, x, R, W, phi)
    phi /= R.shape[0]
    expected = float(np.mean(predict_margin(forest, R)))
    return AttributionRow(phi, expected, float(predict_margin(forest, x)))


def explain_rows(forest, X, background):
    if not isinstance(background, BackgroundSet):
        background = BackgroundSet(background)
    return [shap_interventional(forest, x, background) for x in np.atleast_2d(X)]


def shapley_brute_force(forest, x, background):
    """Reference values by enumerating every feature subset (small widths only)."""
    R = np.atleast_2d(np.asarray(background.rows if isinstance(background, BackgroundSet) else background,
                                 dtype=float))
    x = np.asarray(x, dtype=float)
    M = len(x)
    phi = np.zeros(M)
    fact = [math.factorial(k) for k in range(M + 1)]
    masks = np.array([[(s >> j) & 1 for j in range(M)] for s in range(2 ** M)], dtype=bool)
    for r in R:
        Z = np.where(masks, x, r)
        v = predict_margin(forest, Z)
        for j in range(M):
            without = ~masks[:, j]
            s_idx = np.nonzero(without)[0]
            size = masks[s_idx].sum(axis=1)
            w = np.array([fact[k] * fact[M - k - 1] / fact[M] for k in size])
            phi[j] += np.sum(w * (v[s_idx + (1 << j)] - v[s_idx]))
    return phi / len(R)


@dataclass
class SignalAttribution:
    signals: dict
    statics: dict

    @property
    def total(self):
        return sum(self.signals.values()) + sum(self.statics.values())


def aggregate_by_signal(attr, provenance):
    """Sum attributions per signal; static columns pass through.

    ``provenance`` maps each column index to ``("signal", name)`` or
    ``("static", name)``, either as a list or a dict.
    """
    phi = attr.phi if isinstance(attr, AttributionRow) else np.asarray(attr, dtype=float)
    prov = provenance if isinstance(provenance, dict) else dict(enumerate(provenance))
    missing = [j for j in range(len(phi)) if j not in prov]
    if missing:
        raise DataError(f"provenance map does not cover columns {missing[:10]}")
    signals, statics = {}, {}
    for j in range(len(phi)):
        kind, name = prov[j]
        target = signals if kind == "signal" else statics
        target[name] = target.get(name, 0.0) + float(phi[j])
    return SignalAttribution(signals, statics)


def summary_data(rows, features, names, k=20):
    """Top-``k`` features by mean |phi| (ties by column index) with per-sample data."""
    Phi = np.array([r.phi if isinstance(r, AttributionRow) else r for r in rows], dtype=float)
    features = np.asarray(features, dtype=float)
    if k < 1:
        raise DataError("k must be >= 1")
    if k > Phi.shape[1]:
        log.warning("k=%d exceeds feature count %d; clamping", k, Phi.shape[1])
        k = Phi.shape[1]
    importance = np.abs(Phi).mean(axis=0)
    order = np.lexsort((np.arange(len(importance)), -importance))[:k]
    return [{"rank": rank + 1, "column": int(j), "name": names[j], "mean_abs_phi": float(importance[j]),
             "phi": Phi[:, j].tolist(), "value": features[:, j].tolist()}
            for rank, j in enumerate(order)]


def write_explain_csv(path, row_ids, rows, features, names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row_id", "feature", "phi", "value"])
        for rid, r, xv in zip(row_ids, rows, features):
            for j, name in enumerate(names):
                w.writerow([rid, name, repr(float(r.phi[j])), "" if np.isnan(xv[j]) else repr(float(xv[j]))])


def write_summary_csv(path, summary):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "feature", "mean_abs_phi", "sample", "phi", "value"])
        for entry in summary:
            for i, (p, v) in enumerate(zip(entry["phi"], entry["value"])):
                w.writerow([entry["rank"], entry["name"], repr(entry["mean_abs_phi"]), i, repr(p),
                            "" if np.isnan(v) else repr(v)])
