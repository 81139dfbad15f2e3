"""A small numpy neural network stack: LSTM and dense layers with exact BPTT.

Sequence inputs have shape ``(batch, time, features)``; vector inputs
``(batch, features)``.  LSTM layers (gate order i, f, g, o; no peepholes)
come first, then dense layers, then the output layer.  In train mode an
inverted-dropout mask is applied to the output of every hidden layer and,
for LSTMs, a per-sequence recurrent mask to the state entering the
recurrent weights.  Masks are drawn from ``dropout_seed`` so a train-mode
forward pass is reproducible.
"""

import copy
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "sigmoid", "relu", "tanh")


def sigmoid(x):
    return expit(x)


def _act(name, z):
    if name == "linear":
        return z
    if name == "sigmoid":
        return sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError("activation", f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "linear":
        return np.ones_like(a)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (z > 0).astype(a.dtype)
    return 1.0 - a * a


@dataclass
class NetworkSpec:
    """Layer layout.  ``hidden`` entries are ``("lstm", units)`` or
    ``("dense", units, activation)``; ``seq_len`` is None for vector input."""

    input_dim: int
    hidden: list
    output_units: int
    output_activation: str = "linear"
    seq_len: int = None
    dropout_rate: float = 0.0
    recurrent_dropout_rate: float = 0.0

    def __post_init__(self):
        self.hidden = [tuple(h) for h in self.hidden]
        seen_dense = False
        for h in self.hidden:
            if h[0] == "lstm":
                if seen_dense:
                    raise ConfigError("hidden", "LSTM layers must precede dense layers")
                if self.seq_len is None:
                    raise ConfigError("seq_len", "LSTM layers need sequence input")
            elif h[0] == "dense":
                seen_dense = True
                if len(h) != 3 or h[2] not in ACTIVATIONS:
                    raise ConfigError("hidden", f"dense layer needs (\"dense\", units, activation), got {h}")
            else:
                raise ConfigError("hidden", f"unknown layer kind {h[0]!r}")
            if h[1] < 1:
                raise ConfigError("hidden", "layer sizes must be >= 1")
        if self.seq_len is not None and (not self.hidden or self.hidden[0][0] != "lstm"):
            raise ConfigError("hidden", "sequence input must be consumed by an LSTM layer")
        if self.output_activation not in ("linear", "sigmoid"):
            raise ConfigError("output_activation", "must be 'linear' or 'sigmoid'")
        for name in ("dropout_rate", "recurrent_dropout_rate"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ConfigError(name, f"{r} not in [0, 1)")

    @property
    def embedding_width(self):
        return self.hidden[-1][1] if self.hidden else self.input_dim

    def input_shape(self, batch):
        return (batch, self.seq_len, self.input_dim) if self.seq_len is not None else (batch, self.input_dim)

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden": [list(h) for h in self.hidden],
                "output_units": self.output_units, "output_activation": self.output_activation,
                "seq_len": self.seq_len, "dropout_rate": self.dropout_rate,
                "recurrent_dropout_rate": self.recurrent_dropout_rate}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lstm_spec(hidden=(200, 200), output_units=1, output_activation="linear", seq_len=60,
              dropout_rate=0.5, recurrent_dropout_rate=0.5):
    return NetworkSpec(1, [("lstm", h) for h in hidden], output_units, output_activation, seq_len,
                       dropout_rate, recurrent_dropout_rate)


def param_names(spec):
    names = []
    for k, h in enumerate(spec.hidden):
        if h[0] == "lstm":
            names += [f"L{k}.W", f"L{k}.R", f"L{k}.b"]
        else:
            names += [f"D{k}.W", f"D{k}.b"]
    return names + ["out.W", "out.b"]


def init_params(spec, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    fan = spec.input_dim
    for k, h in enumerate(spec.hidden):
        n = h[1]
        if h[0] == "lstm":
            lim = 1.0 / np.sqrt(fan)
            params[f"L{k}.W"] = rng.uniform(-lim, lim, (4 * n, fan))
            lim_r = 1.0 / np.sqrt(n)
            params[f"L{k}.R"] = rng.uniform(-lim_r, lim_r, (4 * n, n))
            b = np.zeros(4 * n)
            b[n:2 * n] = 1.0
            params[f"L{k}.b"] = b
        else:
            lim = 1.0 / np.sqrt(fan)
            params[f"D{k}.W"] = rng.uniform(-lim, lim, (n, fan))
            params[f"D{k}.b"] = np.zeros(n)
        fan = n
    lim = 1.0 / np.sqrt(fan)
    params["out.W"] = rng.uniform(-lim, lim, (spec.output_units, fan))
    params["out.b"] = np.zeros(spec.output_units)
    return params


def zero_params(spec):
    return {k: np.zeros_like(v) for k, v in init_params(spec, 0).items()}


def check_params(spec, params):
    expected = init_params(spec, 0)
    for name, ref in expected.items():
        if name not in params:
            raise DataError(f"missing parameter {name}")
        if params[name].shape != ref.shape:
            raise DataError(f"parameter {name}: expected shape {ref.shape}, got {params[name].shape}")


def params_fingerprint(params):
    crc = 0
    for k in sorted(params):
        crc = zlib.crc32(np.ascontiguousarray(params[k]).tobytes(), crc)
    return crc


def _masks(spec, batch, mode, dropout_seed):
    """Per-layer (output mask, recurrent mask); None where inactive."""
    if mode != "train" or (spec.dropout_rate == 0 and spec.recurrent_dropout_rate == 0):
        return [(None, None)] * len(spec.hidden)
    rng = np.random.default_rng(dropout_seed)
    out = []
    for h in spec.hidden:
        n = h[1]
        m = r = None
        if spec.dropout_rate > 0:
            keep = 1.0 - spec.dropout_rate
            m = (rng.random((batch, n)) < keep) / keep
        if h[0] == "lstm" and spec.recurrent_dropout_rate > 0:
            keep = 1.0 - spec.recurrent_dropout_rate
            r = (rng.random((batch, n)) < keep) / keep
        out.append((m, r))
    return out


def _lstm_forward(x, W, R, b, rmask, return_sequences):
    # caches are time-major: (T, B, .)
    B, T, _ = x.shape
    H = R.shape[1]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    zx = xt @ W.T + b
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    RT = R.T
    for t in range(T):
        h = hs[t] if rmask is None else hs[t] * rmask
        gt = gates[t]
        np.dot(h, RT, out=gt)
        gt += zx[t]
        # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5 on i, f, o; tanh on g
        gt[:, :2 * H] *= 0.5
        gt[:, 3 * H:] *= 0.5
        np.tanh(gt, out=gt)
        gt[:, :2 * H] *= 0.5
        gt[:, :2 * H] += 0.5
        gt[:, 3 * H:] *= 0.5
        gt[:, 3 * H:] += 0.5
        c = cs[t + 1]
        np.multiply(gt[:, H:2 * H], cs[t], out=c)
        c += gt[:, :H] * gt[:, 2 * H:3 * H]
        np.tanh(c, out=hs[t + 1])
        hs[t + 1] *= gt[:, 3 * H:]
    out = hs[1:].transpose(1, 0, 2) if return_sequences else hs[-1].copy()
    return out, {"x": xt, "hs": hs, "cs": cs, "gates": gates, "rmask": rmask, "seq": return_sequences}


def _lstm_backward(cache, W, R, dout):
    x, hs, cs, gates, rmask = cache["x"], cache["hs"], cache["cs"], cache["gates"], cache["rmask"]
    T, B, _ = x.shape
    H = R.shape[1]
    if cache["seq"]:
        dout = dout.transpose(1, 0, 2)
    tcs = np.tanh(cs[1:])
    dz_all = np.empty((T, B, 4 * H))
    dR = np.zeros_like(R)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        if cache["seq"]:
            dh += dout[t]
        elif t == T - 1:
            dh += dout
        g4 = gates[t]
        i, f, g, o = g4[:, :H], g4[:, H:2 * H], g4[:, 2 * H:3 * H], g4[:, 3 * H:]
        tc = tcs[t]
        dc += dh * o * (1.0 - tc * tc)
        dz = dz_all[t]
        np.multiply(dc * g, i * (1.0 - i), out=dz[:, :H])
        np.multiply(dc * cs[t], f * (1.0 - f), out=dz[:, H:2 * H])
        np.multiply(dc * i, 1.0 - g * g, out=dz[:, 2 * H:3 * H])
        np.multiply(dh * tc, o * (1.0 - o), out=dz[:, 3 * H:])
        hprev = hs[t] if rmask is None else hs[t] * rmask
        dR += dz.T @ hprev
        dh = dz @ R
        if rmask is not None:
            dh *= rmask
        dc *= f
    flat = dz_all.reshape(T * B, 4 * H)
    dW = flat.T @ x.reshape(T * B, -1)
    db = flat.sum(axis=0)
    dx = (dz_all @ W).transpose(1, 0, 2)
    return dx, dW, dR, db


def forward(spec, params, X, mode="eval", dropout_seed=0):
    """Returns ``(output, cache)``.  ``cache["embedding"]`` holds the
    penultimate activations (after dropout in train mode)."""
    X = np.asarray(X, dtype=float)
    expected = spec.input_shape(X.shape[0] if X.ndim else 0)
    if X.shape != expected:
        raise DataError(f"input shape mismatch: expected {expected}, got {X.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError("mode", "must be 'train' or 'eval'")
    masks = _masks(spec, X.shape[0], mode, dropout_seed)
    layers = []
    a = X
    n_lstm = sum(1 for h in spec.hidden if h[0] == "lstm")
    for k, h in enumerate(spec.hidden):
        m, rm = masks[k]
        if h[0] == "lstm":
            seq = k < n_lstm - 1
            a, lc = _lstm_forward(a, params[f"L{k}.W"], params[f"L{k}.R"], params[f"L{k}.b"], rm, seq)
            if m is not None:
                a = a * (m[:, None, :] if seq else m)
            layers.append(("lstm", lc, m))
        else:
            z = a @ params[f"D{k}.W"].T + params[f"D{k}.b"]
            act = _act(h[2], z)
            inp = a
            a = act if m is None else act * m
            layers.append(("dense", {"x": inp, "z": z, "a": act, "act": h[2]}, m))
    emb = a
    z = emb @ params["out.W"].T + params["out.b"]
    out = _act(spec.output_activation, z)
    cache = {"layers": layers, "embedding": emb, "z": z, "out": out,
             "fingerprint": params_fingerprint(params), "shape": X.shape}
    return out, cache


def embed(spec, params, X, batch_size=4096):
    """Eval-mode penultimate activations, batched."""
    X = np.asarray(X, dtype=float)
    out = np.empty((X.shape[0], spec.embedding_width))
    for s in range(0, X.shape[0], batch_size):
        _, cache = forward(spec, params, X[s:s + batch_size], "eval")
        out[s:s + batch_size] = cache["embedding"]
    return out


def predict(spec, params, X, batch_size=4096):
    X = np.asarray(X, dtype=float)
    out = np.empty((X.shape[0], spec.output_units))
    for s in range(0, X.shape[0], batch_size):
        out[s:s + batch_size], _ = forward(spec, params, X[s:s + batch_size], "eval")
    return out


def backward(spec, params, cache, loss_grad, wrt_logits=False):
    """Gradients of the loss for every parameter.

    ``loss_grad`` is dL/d(output), or dL/d(pre-activation output) when
    ``wrt_logits`` is set.
    """
    if cache.get("fingerprint") != params_fingerprint(params):
        raise DataError("stale cache: parameters changed since the forward pass")
    dz = np.asarray(loss_grad, dtype=float)
    if dz.shape != cache["out"].shape:
        raise DataError(f"loss gradient shape {dz.shape} != output shape {cache['out'].shape}")
    if not wrt_logits:
        dz = dz * _act_grad(spec.output_activation, cache["z"], cache["out"])
    grads = {"out.W": dz.T @ cache["embedding"], "out.b": dz.sum(axis=0)}
    da = dz @ params["out.W"]
    for k in range(len(spec.hidden) - 1, -1, -1):
        kind, lc, m = cache["layers"][k]
        if m is not None:
            da = da * (m[:, None, :] if da.ndim == 3 else m)
        if kind == "lstm":
            da, dW, dR, db = _lstm_backward(lc, params[f"L{k}.W"], params[f"L{k}.R"], da)
            grads[f"L{k}.W"], grads[f"L{k}.R"], grads[f"L{k}.b"] = dW, dR, db
        else:
            dzk = da * _act_grad(lc["act"], lc["z"], lc["a"])
            grads[f"D{k}.W"] = dzk.T @ lc["x"]
            grads[f"D{k}.b"] = dzk.sum(axis=0)
            da = dzk @ params[f"D{k}.W"]
    return grads


# ---------------------------------------------------------------------------
# losses

_EPS = 1e-12


def mse_loss(pred, y):
    d = pred - y
    return float(np.mean(d * d)), 2.0 * d / d.size


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return float(loss), (pc - y) / (pc * (1 - pc)) / y.shape[0]


def bce_from_logits(z, y):
    """Loss and gradient w.r.t. the pre-sigmoid output (numerically stable)."""
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(loss), (sigmoid(z) - y) / y.shape[0]


def loss_value(loss, spec, params, X, Y, batch_size=4096):
    total = 0.0
    for s in range(0, X.shape[0], batch_size):
        out, cache = forward(spec, params, X[s:s + batch_size], "eval")
        yb = Y[s:s + batch_size]
        if loss == "mse":
            total += mse_loss(out, yb)[0] * out.size
        else:
            total += bce_from_logits(cache["z"], yb)[0] * out.shape[0]
    return total / (Y.size if loss == "mse" else Y.shape[0])


# ---------------------------------------------------------------------------
# optimizers

def _check_finite(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")


def adam_state():
    return {"t": 0, "m": {}, "v": {}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    _check_finite(grads)
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = state["m"].get(k)
        if m is None:
            m = state["m"][k] = np.zeros_like(g)
            state["v"][k] = np.zeros_like(g)
        v = state["v"][k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def rmsprop_state():
    return {"v": {}}


def rmsprop_step(params, grads, state, lr, rho=0.9, eps=1e-8):
    _check_finite(grads)
    for k, g in grads.items():
        v = state["v"].get(k)
        if v is None:
            v = state["v"][k] = np.zeros_like(g)
        v *= rho
        v += (1 - rho) * g * g
        params[k] -= lr * g / (np.sqrt(v) + eps)
    return params, state


def sgd_state():
    return {}


def sgd_step(params, grads, state, lr):
    """Plain gradient descent; only the end-to-end LSTM grid uses it."""
    _check_finite(grads)
    for k, g in grads.items():
        params[k] -= lr * g
    return params, state


_OPTIMIZERS = {"adam": (adam_state, adam_step), "rmsprop": (rmsprop_state, rmsprop_step),
               "sgd": (sgd_state, sgd_step)}


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    loss: str = "mse"
    epochs: int = 200
    batch_size: int = 256
    balanced_upsampling: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError("optimizer", f"{self.optimizer!r} not in {tuple(_OPTIMIZERS)}")
        if self.loss not in ("mse", "bce"):
            raise ConfigError("loss", f"{self.loss!r} not in ('mse', 'bce')")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    initial_valid_loss: float = None
    selected_epoch: int = None

    def to_dict(self):
        return dict(self.__dict__)


def _batches(rng, y, cfg):
    n = len(y)
    if not cfg.balanced_upsampling:
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            yield perm[s:s + cfg.batch_size]
        return
    flat = y.reshape(n, -1)[:, 0]
    pos = np.nonzero(flat == 1)[0]
    neg = rng.permutation(np.nonzero(flat == 0)[0])
    half = cfg.batch_size // 2
    for s in range(0, len(neg), half):
        chunk = neg[s:s + half]
        yield np.concatenate([chunk, pos[rng.integers(0, len(pos), size=len(chunk))]])


def train(spec, cfg, X, Y, X_valid, Y_valid, init=None):
    """Mini-batch training with validation-loss model selection.

    Returns ``(best_params, history)``; ``init`` continues from given
    parameters (fine-tuning) instead of a fresh seeded initialization.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    X_valid = np.asarray(X_valid, dtype=float)
    Y_valid = np.asarray(Y_valid, dtype=float).reshape(len(X_valid), -1)
    if len(X) == 0 or len(X_valid) == 0:
        raise DataError("training and validation data must be nonempty")
    if Y.shape[1] != spec.output_units:
        raise DataError(f"targets have width {Y.shape[1]}, network outputs {spec.output_units}")
    if cfg.balanced_upsampling:
        classes = set(np.unique(Y[:, 0]).tolist())
        if classes != {0.0, 1.0}:
            raise DataError(f"balanced upsampling needs both classes in training data, got {sorted(classes)}")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    params = copy.deepcopy(init) if init is not None else init_params(spec, cfg.seed)
    check_params(spec, params)
    make_state, step = _OPTIMIZERS[cfg.optimizer]
    state = make_state()
    logits = cfg.loss == "bce" and spec.output_activation == "sigmoid"

    hist = TrainHistory(initial_valid_loss=loss_value(cfg.loss, spec, params, X_valid, Y_valid))
    best, best_loss = copy.deepcopy(params), np.inf
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(rng, Y, cfg):
            xb, yb = X[idx], Y[idx]
            out, cache = forward(spec, params, xb, "train", int(rng.integers(2**63)))
            if cfg.loss == "mse":
                loss, g = mse_loss(out, yb)
            elif logits:
                loss, g = bce_from_logits(cache["z"], yb)
            else:
                loss, g = bce_loss(out, yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads = backward(spec, params, cache, g, wrt_logits=logits)
            step(params, grads, state, cfg.learning_rate)
            total += loss * len(idx)
            count += len(idx)
        vloss = loss_value(cfg.loss, spec, params, X_valid, Y_valid)
        hist.train_loss.append(total / count)
        hist.valid_loss.append(vloss)
        if vloss < best_loss:
            best_loss = vloss
            best = copy.deepcopy(params)
            hist.selected_epoch = epoch
        log.debug("epoch %d train %.6g valid %.6g", epoch, total / count, vloss)
    if cfg.epochs == 0:
        hist.selected_epoch = -1
    elif hist.selected_epoch is None:
        raise NumericError("validation loss was never finite")
    return best, hist
