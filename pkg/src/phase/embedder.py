"""Per-signal sequence embedders: source-task targets, training, transfer, storage."""

import copy
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numba
import numpy as np

from . import neuralnet as nn
from .dataprep import LabeledDataset, SignalWindow, label_points, standardize_values
from .errors import ConfigError, DataError, ModelFormatError
from .tasks import HORIZON, N_TIME, LabelSpec, eligible_times, get_spec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"PHASEMDL"
N_HID = 200
KINDS = ("rand", "auto", "next", "min", "hypo")


@dataclass(frozen=True)
class SourceTask:
    """Embedder training objective.  ``hypo`` carries the downstream label spec."""

    kind: str
    label: LabelSpec = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("source_task", f"{self.kind!r} not in {KINDS}")
        if self.kind == "hypo" and self.label is None:
            raise ConfigError("source_task", "hypo needs the downstream label spec")
        if self.kind != "hypo" and self.label is not None:
            raise ConfigError("source_task", f"{self.kind} takes no label spec")

    @classmethod
    def hypo(cls, task):
        spec = get_spec(task) if isinstance(task, str) else task
        return cls("hypo", spec)

    @classmethod
    def parse(cls, name, downstream_task=None):
        if name == "hypo":
            if downstream_task is None:
                raise ConfigError("source_task", "hypo needs a downstream task")
            return cls.hypo(downstream_task)
        return cls(name)

    @property
    def output_units(self):
        return {"next": HORIZON, "min": 1, "auto": N_TIME, "hypo": 1, "rand": 1}[self.kind]

    @property
    def name(self):
        return self.kind

    def to_dict(self):
        d = {"kind": self.kind}
        if self.label is not None:
            d["label"] = {"task": self.label.task, "signal": self.label.signal,
                          "threshold": self.label.threshold, "direction": self.label.direction,
                          "horizon": self.label.horizon, "history_guard": self.label.history_guard}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], LabelSpec(**d["label"]) if d.get("label") else None)


def make_target(task, series, t, horizon=HORIZON):
    """Training target at minute ``t`` of one series.

    For next/min/auto ``series`` is the standardized embedder signal; for
    hypo it is the raw series of the downstream task's signal.  Returns
    None when the future horizon is not fully available.
    """
    if task.kind == "rand":
        raise ConfigError("source_task", "the rand embedder is never trained; it has no target")
    x = np.asarray(series, dtype=float)
    if task.kind == "auto":
        if t < N_TIME - 1:
            return None
        return x[t - N_TIME + 1:t + 1].copy()
    fut = x[t + 1:t + 1 + horizon]
    if len(fut) < horizon:
        return None
    if task.kind == "hypo":
        obs = fut[~np.isnan(fut)]
        if len(obs) == 0:
            return None
        spec = task.label
        if spec.direction == "above":
            return int(obs.max() >= spec.threshold)
        if spec.task == "hypoxemia":
            return int(obs.min() < spec.threshold)
        return int(obs.min() <= spec.threshold)
    if np.isnan(fut).any():
        return None
    return fut.copy() if task.kind == "next" else np.array([fut.min()])


@dataclass
class EmbedderModel:
    signal_name: str
    source_task: SourceTask
    source_cohort_id: str
    spec: nn.NetworkSpec
    params: dict
    prep_mean: float
    prep_std: float
    format_version: int = FORMAT_VERSION
    metadata: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.spec.embedding_width

    def standardize(self, raw):
        return standardize_values(raw, self.prep_mean, self.prep_std)

    def header(self):
        return {"format_version": self.format_version, "signal_name": self.signal_name,
                "source_task": self.source_task.to_dict(), "source_cohort_id": self.source_cohort_id,
                "spec": self.spec.to_dict(), "prep_mean": self.prep_mean, "prep_std": self.prep_std,
                "metadata": self.metadata,
                "params": [[k, list(self.params[k].shape)] for k in nn.param_names(self.spec)]}


def embedder_spec(task, hidden=(N_HID, N_HID), dropout_rate=0.5, recurrent_dropout_rate=0.5):
    act = "sigmoid" if task.kind == "hypo" else "linear"
    return nn.lstm_spec(hidden, task.output_units, act, N_TIME, dropout_rate, recurrent_dropout_rate)


def default_train_config(task, epochs=200, seed=0, **overrides):
    if task.kind == "hypo":
        base = dict(optimizer="rmsprop", loss="bce", balanced_upsampling=True)
    else:
        base = dict(optimizer="adam", loss="mse", balanced_upsampling=False)
    base.update(epochs=epochs, seed=seed)
    base.update(overrides)
    return nn.TrainConfig(**base)


@dataclass
class EmbedderData:
    X: np.ndarray   # (n, 60, 1) standardized windows
    Y: np.ndarray
    index: LabeledDataset


def _all_points(cohort):
    procs, ts = [], []
    for i, p in enumerate(cohort.procedures):
        t = eligible_times(p.length)
        procs.append(np.full(len(t), i, dtype=np.int64))
        ts.append(t)
    proc = np.concatenate(procs) if procs else np.zeros(0, np.int64)
    t = np.concatenate(ts) if ts else np.zeros(0, np.int64)
    return LabeledDataset(cohort, None, proc, t, np.zeros(len(t), dtype=np.int8))


def embedder_data(cohort, signal, task, mean, std, max_points=None, seed=0):
    """Windows and targets for one signal and source task.

    ``mean``/``std`` standardize the windows and regression targets.
    Next/min points whose future minutes are not all observed are skipped.
    """
    if task.kind == "rand":
        raise ConfigError("source_task", "the rand embedder is never trained")
    ds = label_points(cohort, task.label) if task.kind == "hypo" else _all_points(cohort)
    if max_points is not None and len(ds) > max_points:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
        ds = ds.subset(np.sort(rng.choice(len(ds), size=max_points, replace=False)))
    raw = ds.raw_windows(signal)
    X = standardize_values(raw, mean, std)
    if task.kind == "hypo":
        Y = ds.label.astype(float)[:, None]
    elif task.kind == "auto":
        Y = X.copy()
    else:
        fut = (ds.raw_future(signal, HORIZON) - mean) / std
        ok = ~np.isnan(fut).any(axis=1)
        ds, X, fut = ds.subset(np.nonzero(ok)[0]), X[ok], fut[ok]
        Y = fut if task.kind == "next" else fut.min(axis=1, keepdims=True)
    return EmbedderData(X[:, :, None], Y, ds)


def train_embedder(signal, task, train, valid, train_config, prep, source_cohort_id,
                   hidden=(N_HID, N_HID), dropout_rate=0.5, recurrent_dropout_rate=0.5):
    """Train U^i for one signal.  ``train``/``valid`` are EmbedderData; ``prep`` is (mean, std)."""
    if task.kind == "rand":
        return make_random_embedder(signal, embedder_spec(task, hidden, dropout_rate, recurrent_dropout_rate),
                                    train_config.seed, prep, source_cohort_id)
    spec = embedder_spec(task, hidden, dropout_rate, recurrent_dropout_rate)
    params, hist = nn.train(spec, train_config, train.X, train.Y, valid.X, valid.Y)
    meta = {"train_config": train_config.to_dict(), "history": hist.to_dict(),
            "n_train": int(len(train.X)), "n_valid": int(len(valid.X))}
    return EmbedderModel(signal, task, source_cohort_id, spec, params, float(prep[0]), float(prep[1]),
                         metadata=meta)


def make_random_embedder(signal, spec, seed, prep=(0.0, 1.0), source_cohort_id=""):
    if isinstance(spec, SourceTask):
        spec = embedder_spec(spec)
    params = nn.init_params(spec, seed)
    return EmbedderModel(signal, SourceTask("rand"), source_cohort_id, spec, params, float(prep[0]),
                         float(prep[1]), metadata={"seed": int(seed)})


def embed(model, windows, signal=None):
    """Penultimate activations for standardized windows.

    Accepts a SignalWindow, one 60-vector, or an (n, 60) batch.
    """
    if isinstance(windows, SignalWindow):
        signal = windows.signal_name
        windows = windows.values
    if signal is not None and signal != model.signal_name:
        raise DataError(f"embedder for {model.signal_name!r} applied to signal {signal!r}")
    W = np.asarray(windows, dtype=float)
    single = W.ndim == 1
    W = np.atleast_2d(W)
    if W.shape[1] != N_TIME:
        raise DataError(f"windows must have {N_TIME} minutes, got {W.shape[1]}")
    H = nn.embed(model.spec, model.params, W[:, :, None])
    return H[0] if single else H


def embed_raw(model, raw_windows, signal=None):
    """Standardize raw (NaN = missing) windows with the model's own stats, then embed."""
    return embed(model, model.standardize(raw_windows), signal)


@dataclass
class EmbeddingMatrix:
    X: np.ndarray
    provenance: list      # per column: ("signal", name) or ("static", name)
    column_names: list

    @property
    def shape(self):
        return self.X.shape


def static_block(ds, static_stats=None):
    S = ds.static_matrix()
    if static_stats is not None:
        S = standardize_values(S, static_stats[0], static_stats[1])
    return S


def assemble_features(models, ds, signals=None, static_stats=None):
    """Concatenate per-signal embeddings and static columns.

    ``models`` maps signal name to EmbedderModel.  Statics are raw unless
    ``static_stats`` (mean, std arrays) is given.
    """
    signals = list(signals if signals is not None else ds.cohort.signal_names)
    absent = [s for s in signals if s not in models]
    if absent:
        raise DataError(f"no embedder for signals {absent}")
    blocks, prov, names = [], [], []
    for s in signals:
        m = models[s]
        if m.signal_name != s:
            raise DataError(f"model under key {s!r} embeds signal {m.signal_name!r}")
        blocks.append(embed_raw(m, ds.raw_windows(s), s))
        prov += [("signal", s)] * m.width
        names += [f"{s}_h{k}" for k in range(m.width)]
    blocks.append(static_block(ds, static_stats))
    prov += [("static", n) for n in ds.cohort.static_names]
    names += list(ds.cohort.static_names)
    return EmbeddingMatrix(np.hstack(blocks) if blocks else np.zeros((len(ds), 0)), prov, names)


def assemble_width(n_signals, n_hid, n_static):
    return n_signals * n_hid + n_static


def fine_tune(model, train, valid, train_config, target_cohort_id):
    """Continue training all layers on target data with the same source task."""
    if model.source_task.kind == "rand":
        raise ConfigError("source_task", "cannot fine-tune an untrained embedder")
    signal = train.index.cohort.signal_names if hasattr(train.index.cohort, "signal_names") else None
    if signal is not None and model.signal_name not in signal:
        raise DataError(f"target data has no signal {model.signal_name!r}")
    params, hist = nn.train(model.spec, train_config, train.X, train.Y, valid.X, valid.Y, init=model.params)
    meta = dict(model.metadata)
    meta.update({"fine_tuned": True, "target_cohort_id": target_cohort_id,
                 "source_cohort_id": model.source_cohort_id, "finetune_config": train_config.to_dict(),
                 "finetune_history": hist.to_dict()})
    out = EmbedderModel(model.signal_name, model.source_task, model.source_cohort_id, model.spec, params,
                        model.prep_mean, model.prep_std, model.format_version, meta)
    return out, hist


# ---------------------------------------------------------------------------
# .phase container: magic, u32 version, u64 header length, JSON header,
# little-endian float64 parameters, u64 CRC-64/XZ over all preceding bytes

def _crc_table():
    poly = 0xC96C5795D7870F42
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table[i] = c
    return table


_CRC_TABLE = _crc_table()


@numba.njit(cache=True)
def _crc64_kernel(data, table):
    crc = np.uint64(0xFFFFFFFFFFFFFFFF)
    for b in data:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc ^ np.uint64(0xFFFFFFFFFFFFFFFF)


def crc64(data):
    return int(_crc64_kernel(np.frombuffer(bytes(data), dtype=np.uint8), _CRC_TABLE))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def dumps_model(model):
    header = json.dumps(_jsonable(model.header()), sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes()
                    for k in nn.param_names(model.spec))
    blob = MAGIC + struct.pack("<IQ", model.format_version, len(header)) + header + body
    return blob + struct.pack("<Q", crc64(blob))


def loads_model(blob):
    if len(blob) < len(MAGIC) + 20 or blob[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file")
    payload, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != crc64(payload):
        raise ModelFormatError("checksum mismatch (corrupt or truncated model file)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", payload, off)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    off += 12
    header = json.loads(payload[off:off + hlen].decode())
    off += hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(payload):
        raise ModelFormatError("parameter block size does not match header")
    spec = nn.NetworkSpec.from_dict(header["spec"])
    nn.check_params(spec, params)
    return EmbedderModel(header["signal_name"], SourceTask.from_dict(header["source_task"]),
                         header["source_cohort_id"], spec, params, header["prep_mean"], header["prep_std"],
                         version, header["metadata"])


def atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    atomic_write(path, dumps_model(model))


def load_model(path):
    with open(path, "rb") as f:
        return loads_model(f.read())


def model_path(root, cohort_id, signal, task_name):
    return os.path.join(root, cohort_id, signal, f"{task_name}.phase")


def copy_model(model):
    return copy.deepcopy(model)
