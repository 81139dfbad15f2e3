"""Second-order gradient-boosted trees with a logistic objective.

Splits are exact greedy: every midpoint between consecutive distinct values
is scored with the regularized second-order gain, and missing values are
sent to whichever side scores higher.  Columns are presorted once per fit;
each tree is then grown level by level, with one compiled pass per feature
scoring every node of the level at once.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class GBMConfig:
    learning_rate: float = 0.1
    max_depth: int = 6
    subsample_rate: float = 0.5
    max_rounds: int = 500
    early_stopping_rounds: int = 5
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.max_depth < 1:
            raise ConfigError("max_depth", "must be >= 1")
        if not 0 < self.subsample_rate <= 1:
            raise ConfigError("subsample_rate", "must be in (0, 1]")
        if self.max_rounds < 0:
            raise ConfigError("max_rounds", "must be >= 0")
        if self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds", "must be >= 1")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ConfigError("reg_lambda", "lambda, gamma and min_child_weight must be >= 0")

    def to_dict(self):
        return dict(self.__dict__)


# learning rates per downstream task; the others default to 0.1
TASK_LEARNING_RATES = {"hypoxemia": 0.02, "hypotension": 0.1, "hypocapnia": 0.1}


def config_for_task(task, **overrides):
    cfg = dict(learning_rate=TASK_LEARNING_RATES.get(task, 0.1), max_depth=6, subsample_rate=0.5)
    cfg.update(overrides)
    return GBMConfig(**cfg)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logistic_grad_hess(margin, label):
    p = sigmoid(margin)
    return p - label, p * (1.0 - p)


def logloss(margin, y):
    margin = np.asarray(margin, dtype=float)
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    missing_left: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self):
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node[rows]]
            internal = f >= 0
            if not internal.any():
                break
            rows = rows[internal]
            nd = node[rows]
            x = X[rows, self.feature[nd]]
            go_left = np.where(np.isnan(x), self.missing_left[nd], x < self.threshold[nd])
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": [float(t) for t in self.threshold],
                "left": self.left.tolist(), "right": self.right.tolist(),
                "missing_left": [bool(b) for b in self.missing_left],
                "value": [float(v) for v in self.value], "cover": [float(c) for c in self.cover]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["missing_left"], dtype=bool), np.array(d["value"], dtype=float),
                   np.array(d["cover"], dtype=float))

    @classmethod
    def leaf(cls, value, cover=0.0):
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([True]), np.array([float(value)]), np.array([float(cover)]))


@dataclass
class Forest:
    base_margin: float
    trees: list
    n_features: int
    best_round: int = -1  # index of the last tree used; -1 means no trees
    valid_loss: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)

    @property
    def used_trees(self):
        return self.trees[:self.best_round + 1]

    def to_dict(self):
        return {"base_margin": self.base_margin, "n_features": self.n_features, "best_round": self.best_round,
                "valid_loss": list(self.valid_loss), "train_loss": list(self.train_loss),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["base_margin"]), [Tree.from_dict(t) for t in d["trees"]], int(d["n_features"]),
                   int(d["best_round"]), list(d.get("valid_loss", [])), list(d.get("train_loss", [])))


def save_forest(forest, path):
    with open(path, "w") as f:
        json.dump(forest.to_dict(), f)


def load_forest(path):
    with open(path) as f:
        return Forest.from_dict(json.load(f))


def _check_width(forest, X):
    if X.shape[1] != forest.n_features:
        raise DataError(f"row width {X.shape[1]} != forest feature count {forest.n_features}")


def predict_margin(forest, X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    _check_width(forest, X)
    m = np.full(X.shape[0], forest.base_margin)
    for tree in forest.used_trees:
        m += tree.predict(X)
    return float(m[0]) if single else m


def predict_proba(forest, X):
    return sigmoid(predict_margin(forest, X))


# ---------------------------------------------------------------------------
# split finding

# a candidate must beat the incumbent by this relative margin; gains that
# differ only by summation-order rounding count as ties
TIE_RTOL = 1e-12


def _gain(GL, HL, GR, HR, lam, gamma):
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)) - gamma


def _midpoint(a, b):
    thr = 0.5 * (a + b)
    return b if thr <= a else thr


def find_best_split(x, g, h, reg_lambda=1.0, gamma=0.0, min_child_weight=0.0):
    """Best split of one feature over one node's rows.

    Returns ``(threshold, gain, missing_left)`` or ``None`` if no split has
    positive gain.  Rows with ``x < threshold`` go left; missing values go
    left iff ``missing_left``.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    miss = np.isnan(x)
    order = np.argsort(x[~miss], kind="stable")
    xs = x[~miss][order]
    gs, hs = g[~miss][order], h[~miss][order]
    if len(xs) < 2:
        return None
    Gm, Hm = g[miss].sum(), h[miss].sum()
    Gt, Ht = gs.sum() + Gm, hs.sum() + Hm
    cg, ch = np.cumsum(gs)[:-1], np.cumsum(hs)[:-1]
    valid = xs[:-1] < xs[1:]
    best = None
    for p in np.nonzero(valid)[0]:
        for missing_left in (True, False):
            GL = cg[p] + (Gm if missing_left else 0.0)
            HL = ch[p] + (Hm if missing_left else 0.0)
            GR, HR = Gt - GL, Ht - HL
            if HL < min_child_weight or HR < min_child_weight:
                continue
            gain = _gain(GL, HL, GR, HR, reg_lambda, gamma)
            if gain > 0 and (best is None or gain > best[1] * (1.0 + TIE_RTOL)):
                best = (_midpoint(xs[p], xs[p + 1]), float(gain), missing_left)
    return best


@njit(cache=True)
def _scan_level(V, S, nid, g, h, n_nodes, Gn, Hn, lam, gamma, mcw, best_gain, best_f, best_thr, best_ml):
    """Best split per node over all features, streaming presorted columns.

    ``V[f, i]`` is the value of row ``S[f, i]``; NaNs sort last.

    Candidates are visited feature by feature in ascending threshold order,
    missing-left before missing-right, and replaced only on strictly larger
    gain: ties resolve to the lowest feature, smallest threshold, missing-left.
    """
    d, n = S.shape
    Gnm = np.empty(n_nodes)
    Hnm = np.empty(n_nodes)
    GL = np.empty(n_nodes)
    HL = np.empty(n_nodes)
    last = np.empty(n_nodes)
    seen = np.empty(n_nodes, dtype=np.bool_)
    parent = np.empty(n_nodes)
    for k in range(n_nodes):
        parent[k] = Gn[k] * Gn[k] / (Hn[k] + lam)
    for f in range(d):
        if n > 0 and np.isnan(V[f, n - 1]):
            Gnm[:] = 0.0
            Hnm[:] = 0.0
            n_obs = 0
            for i in range(n):
                if np.isnan(V[f, i]):
                    break
                n_obs += 1
                r = S[f, i]
                k = nid[r]
                if k >= 0:
                    Gnm[k] += g[r]
                    Hnm[k] += h[r]
        else:
            # no missing values in this column
            Gnm[:] = Gn
            Hnm[:] = Hn
            n_obs = n
        GL[:] = 0.0
        HL[:] = 0.0
        seen[:] = False
        for i in range(n_obs):
            r = S[f, i]
            k = nid[r]
            if k < 0:
                continue
            x = V[f, i]
            if seen[k] and x > last[k]:
                Gm = Gn[k] - Gnm[k]
                Hm = Hn[k] - Hnm[k]
                G = Gn[k]
                H = Hn[k]
                # without missing rows in the node both directions coincide
                n_opt = 2 if Hm != 0.0 or Gm != 0.0 else 1
                for opt in range(n_opt):
                    gl = GL[k]
                    hl = HL[k]
                    if opt == 0:
                        gl += Gm
                        hl += Hm
                    gr = G - gl
                    hr = H - hl
                    if hl < mcw or hr < mcw:
                        continue
                    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent[k]) - gamma
                    if gain > 0 and (best_f[k] < 0 or gain > best_gain[k] * (1.0 + TIE_RTOL)):
                        thr = 0.5 * (last[k] + x)
                        if thr <= last[k]:
                            thr = x
                        best_gain[k] = gain
                        best_f[k] = f
                        best_thr[k] = thr
                        best_ml[k] = opt == 0
            GL[k] += g[r]
            HL[k] += h[r]
            last[k] = x
            seen[k] = True


class _TreeBuilder:
    """Grows one tree level by level on presorted columns."""

    def __init__(self, XT, cfg):
        self.XT = XT  # (d, N) feature-major copy of X
        self.cfg = cfg

    def grow(self, S, g, h):
        """``S`` is (d, n) row indices of the sampled rows, sorted per feature."""
        cfg = self.cfg
        N = self.XT.shape[1]
        feature, threshold, left, right, miss_left, value, cover = [], [], [], [], [], [], []

        def new_node():
            for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (miss_left, True),
                           (value, 0.0), (cover, 0.0)):
                lst.append(v)
            return len(feature) - 1

        root = new_node()
        V = np.take_along_axis(self.XT, S, axis=1)
        nid = np.full(N, -1, dtype=np.int64)
        rows_all = S[0]
        nid[rows_all] = 0
        level = [root]
        for depth in range(cfg.max_depth + 1):
            active = rows_all[nid[rows_all] >= 0]
            Gn = np.bincount(nid[active], weights=g[active], minlength=len(level))
            Hn = np.bincount(nid[active], weights=h[active], minlength=len(level))
            for k, node in enumerate(level):
                value[node] = -Gn[k] / (Hn[k] + cfg.reg_lambda) * cfg.learning_rate
                cover[node] = Hn[k]
            if depth == cfg.max_depth:
                break
            m = len(level)
            best_gain = np.full(m, -np.inf)
            best_f = np.full(m, -1, dtype=np.int64)
            best_thr = np.zeros(m)
            best_ml = np.zeros(m, dtype=np.bool_)
            _scan_level(V, S, nid, g, h, m, Gn, Hn, cfg.reg_lambda, cfg.gamma, cfg.min_child_weight,
                        best_gain, best_f, best_thr, best_ml)
            next_level = []
            new_nid = np.full(N, -1, dtype=np.int64)
            x_node = nid[active]
            for k, node in enumerate(level):
                if best_f[k] < 0:
                    continue
                f, thr, ml = int(best_f[k]), float(best_thr[k]), bool(best_ml[k])
                lc, rc = new_node(), new_node()
                feature[node], threshold[node], left[node], right[node], miss_left[node] = f, thr, lc, rc, ml
                rows = active[x_node == k]
                x = self.XT[f, rows]
                go_left = np.where(np.isnan(x), ml, x < thr)
                new_nid[rows[go_left]] = len(next_level)
                new_nid[rows[~go_left]] = len(next_level) + 1
                next_level += [lc, rc]
            nid = new_nid
            level = next_level
            if not level:
                break
        return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                    np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                    np.array(miss_left, dtype=bool), np.array(value, dtype=float), np.array(cover, dtype=float))


def fit(X, y, X_valid, y_valid, cfg=None):
    """Boost trees until validation logloss stops improving."""
    cfg = cfg or GBMConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    X_valid = np.asarray(X_valid, dtype=float)
    y_valid = np.asarray(y_valid, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"X shape {X.shape} does not match labels {y.shape}")
    if X_valid.shape[1] != X.shape[1]:
        raise DataError("validation width differs from training width")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise DataError("labels must be 0/1")
    if y.min() == y.max():
        raise DataError("training labels contain a single class")
    N, d = X.shape
    pbar = y.mean()
    base = float(np.log(pbar / (1.0 - pbar)))
    XT = np.ascontiguousarray(X.T)
    order = np.argsort(XT, axis=1, kind="stable")  # NaN sorts last
    builder = _TreeBuilder(XT, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
    margin = np.full(N, base)
    vmargin = np.full(len(X_valid), base)
    forest = Forest(base, [], d, -1)
    best_loss, best_round, since = logloss(vmargin, y_valid), -1, 0
    for r in range(cfg.max_rounds):
        g, h = logistic_grad_hess(margin, y)
        if cfg.subsample_rate < 1.0:
            n_s = max(1, int(round(cfg.subsample_rate * N)))
            sampled = np.zeros(N, dtype=bool)
            sampled[rng.choice(N, size=n_s, replace=False)] = True
            S = order[sampled[order]].reshape(d, n_s)
        else:
            S = order
        tree = builder.grow(S, g, h)
        forest.trees.append(tree)
        margin += tree.predict(X)
        vmargin += tree.predict(X_valid)
        forest.train_loss.append(logloss(margin, y))
        vl = logloss(vmargin, y_valid)
        forest.valid_loss.append(vl)
        if vl < best_loss:
            best_loss, best_round, since = vl, r, 0
        else:
            since += 1
            if since >= cfg.early_stopping_rounds:
                break
    forest.best_round = best_round
    log.info("gbm: %d rounds, best %d, valid logloss %.5f", len(forest.trees), best_round, best_loss)
    return forest
