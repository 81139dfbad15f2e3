"""Slow, literal reference implementations used as test oracles."""

import math

import numpy as np

from phase.tasks import EXCLUDED, N_TIME


def _vals(series, lo, hi):
    # observed values in series[lo..hi], clipped to the series
    out = []
    for k in range(max(lo, 0), min(hi, len(series) - 1) + 1):
        if not math.isnan(series[k]):
            out.append(series[k])
    return out


def naive_labels(series, spec, admin=None):
    """Label every eligible minute by rescanning its windows from scratch."""
    h, g, T = spec.horizon, spec.history_guard, spec.threshold
    length = len(admin) if spec.task == "phenylephrine" else len(series)
    ts, labels = [], []
    for t in range(N_TIME - 1, length - h):
        ts.append(t)
        if spec.task == "phenylephrine":
            labels.append(int(any(admin[t + k] > 0 for k in range(1, h + 1))))
            continue
        past = _vals(series, t - g + 1, t)
        fut = _vals(series, t + 1, t + h)
        if not past or not fut:
            labels.append(EXCLUDED)
            continue
        if spec.task == "hypoxemia":
            cur = series[t]
            if not math.isnan(cur) and cur < T:
                labels.append(EXCLUDED)
            else:
                labels.append(int(min(fut) < T))
            continue
        longer = _vals(series, t + 1, t + 2 * h)
        if spec.direction == "below":
            guard, pos, neg = min(past) > T, min(fut) <= T, min(longer) > T
        else:
            guard, pos, neg = max(past) < T, max(fut) >= T, max(longer) < T
        if not guard:
            labels.append(EXCLUDED)
        elif pos:
            labels.append(1)
        elif neg:
            labels.append(0)
        else:
            labels.append(EXCLUDED)
    return np.array(ts, dtype=np.int64), np.array(labels, dtype=np.int8)


def naive_best_split(x, g, h, lam, gamma, mcw):
    """Try every threshold between distinct observed values and both missing directions."""
    x = np.asarray(x, float)
    obs = np.sort(np.unique(x[~np.isnan(x)]))
    best = None
    for a, b in zip(obs[:-1], obs[1:]):
        thr = 0.5 * (a + b)
        if thr <= a:
            thr = b
        for ml in (True, False):
            left = np.where(np.isnan(x), ml, x < thr)
            GL, HL = g[left].sum(), h[left].sum()
            GR, HR = g[~left].sum(), h[~left].sum()
            if HL < mcw or HR < mcw:
                continue
            G, H = GL + GR, HL + HR
            gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam)) - gamma
            if gain > 0 and (best is None or gain > best[1] * (1 + 1e-12)):
                best = (thr, gain, ml)
    return best


def naive_ap(scores, labels):
    """Precision at each distinct threshold times the recall gained there."""
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / len(sel)
        prev_recall = recall
    return ap


def ema_reference(x, alpha):
    m, v = float(x[0]), 0.0
    for xi in x[1:]:
        d = float(xi) - m
        m = m + alpha * d
        v = (1 - alpha) * (v + alpha * d * d)
    return m, v


def random_forest(rng, n_features, max_depth, n_trees):
    """A forest of random trees (random features, thresholds, default directions)."""
    from phase.gbm import Forest, Tree

    trees = []
    for _ in range(n_trees):
        feat, thr, left, right, ml, val = [], [], [], [], [], []

        def node(depth):
            k = len(feat)
            for lst in (feat, thr, left, right, ml, val):
                lst.append(None)
            if depth < max_depth and rng.random() < 0.8:
                feat[k] = int(rng.integers(n_features))
                thr[k] = float(rng.normal())
                ml[k] = bool(rng.random() < 0.5)
                val[k] = 0.0
                left[k] = node(depth + 1)
                right[k] = node(depth + 1)
            else:
                feat[k], thr[k], left[k], right[k], ml[k] = -1, 0.0, -1, -1, True
                val[k] = float(rng.normal())
            return k

        node(0)
        trees.append(Tree(np.array(feat), np.array(thr), np.array(left), np.array(right),
                          np.array(ml), np.array(val), np.zeros(len(feat))))
    return Forest(float(rng.normal()), trees, n_features, n_trees - 1)


def random_rows(rng, n, d, missing=0.1):
    X = rng.normal(size=(n, d))
    X[rng.random((n, d)) < missing] = np.nan
    return X


def random_tiny_net(rng, loss):
    """A random LSTM net within the gradient-check envelope (<=2 LSTM layers, <=8 cells, <=6 steps)."""
    from phase.neuralnet import NetworkSpec, init_params

    n_lstm = int(rng.integers(1, 3))
    hidden = [("lstm", int(rng.integers(1, 9))) for _ in range(n_lstm)]
    if rng.random() < 0.5:
        hidden.append(("dense", int(rng.integers(1, 6)), str(rng.choice(["tanh", "sigmoid", "linear"]))))
    out_units = 1 if loss == "bce" else int(rng.integers(1, 4))
    spec = NetworkSpec(int(rng.integers(1, 4)), hidden, out_units, "sigmoid" if loss == "bce" else "linear",
                       int(rng.integers(1, 7)), float(rng.choice([0.0, 0.3])), float(rng.choice([0.0, 0.4])))
    params = init_params(spec, int(rng.integers(1 << 30)))
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    n = int(rng.integers(2, 6))
    X = rng.normal(size=(n, spec.seq_len, spec.input_dim))
    if loss == "bce":
        Y = rng.integers(0, 2, (n, 1)).astype(float)
    else:
        Y = rng.normal(size=(n, out_units))
    return spec, params, X, Y


def finite_difference_error(spec, params, X, Y, loss, dropout_seed=11, h=1e-5):
    """Max relative error between backward() and central differences, over all parameters."""
    from phase.neuralnet import backward, bce_loss, forward, mse_loss

    lossfn = mse_loss if loss == "mse" else bce_loss

    def value(p):
        out, _ = forward(spec, p, X, "train", dropout_seed)
        return lossfn(out, Y)[0]

    out, cache = forward(spec, params, X, "train", dropout_seed)
    grads = backward(spec, params, cache, lossfn(out, Y)[1])
    worst = 0.0
    for k, arr in params.items():
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            up = value(params)
            arr[i] = orig - h
            down = value(params)
            arr[i] = orig
            fd = (up - down) / (2 * h)
            an = grads[k][i]
            # absolute floor keeps exactly-zero gradients (dropped units) from dividing by noise
            worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), 1e-6))
    return worst
