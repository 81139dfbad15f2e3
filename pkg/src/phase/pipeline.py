"""Experiment orchestration: representations, embedders, downstream models, reports."""

import csv
import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import embedder as emb
from . import eval as ev
from . import gbm
from . import neuralnet as nn
from .dataprep import DEFAULT_DECAYS, ema_features, fit_prep_stats, label_points, standardize_values, subsample
from .errors import ConfigError, DataError, PhaseError
from .synthgen import read_cohort, split_cohort
from .tasks import N_TIME, get_spec

log = logging.getLogger(__name__)

EMBEDDED_TASKS = ("rand", "auto", "next", "min", "hypo")
VARIANTS = ("", "'", "^P", "ft")
DOWNSTREAM = ("gbm", "mlp", "lstm")
ICU_SIGNAL = "SAO2"


class StageError(PhaseError):
    """Failure inside one pipeline stage; the message names the stage."""

    def __init__(self, stage, err):
        super().__init__(f"[{stage}] {err}")
        self.stage = stage
        self.cause = err


@dataclass(frozen=True)
class RepresentationSpec:
    kind: str                 # raw | ema | embedded
    task: str = ""            # source task for embedded
    variant: str = ""         # "", "'", "^P", "ft"
    decays: tuple = DEFAULT_DECAYS

    def __post_init__(self):
        if self.kind not in ("raw", "ema", "embedded"):
            raise ConfigError("representation", f"unknown kind {self.kind!r}")
        if self.kind == "embedded" and self.task not in EMBEDDED_TASKS:
            raise ConfigError("representation", f"unknown source task {self.task!r}")
        if self.kind != "embedded" and (self.task or self.variant):
            raise ConfigError("representation", f"{self.kind} takes no source task or variant")
        if self.variant not in VARIANTS:
            raise ConfigError("representation", f"unknown variant {self.variant!r}")
        if self.variant and self.task == "rand":
            raise ConfigError("representation", "the rand embedder has no transfer variants")

    @classmethod
    def parse(cls, name):
        """``raw``, ``ema``, ``next``, ``next'``, ``hypo^P``, ``min-ft`` ..."""
        if name in ("raw", "ema"):
            return cls(name)
        for suffix, variant in (("'", "'"), ("^P", "^P"), ("-ft", "ft")):
            if name.endswith(suffix):
                return cls("embedded", name[:-len(suffix)], variant)
        return cls("embedded", name)

    @property
    def name(self):
        if self.kind != "embedded":
            return self.kind
        return self.task + {"": "", "'": "'", "^P": "^P", "ft": "-ft"}[self.variant]

    def per_signal_width(self, n_hid):
        return {"raw": N_TIME, "ema": 2 * len(self.decays) + 1, "embedded": n_hid}[self.kind]

    def width(self, n_signals, n_static, n_hid=emb.N_HID):
        return n_signals * self.per_signal_width(n_hid) + n_static


@dataclass
class EmbedderSettings:
    hidden: tuple = (emb.N_HID, emb.N_HID)
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    recurrent_dropout_rate: float = 0.5
    max_points: int = None
    finetune_epochs: int = None

    def key(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:16]


@dataclass
class ExperimentPlan:
    target: str                      # cohort directory (or id when cohorts are passed in)
    representation: str = "raw"
    task: str = "hypoxemia"
    downstream: str = "gbm"
    source: str = None               # other OR cohort for ' / ft variants
    icu: str = None                  # ICU cohort for ^P
    signals: list = None             # default: all target signals
    seed: int = 0
    split_seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)
    max_train_rows: int = None
    n_resamples: int = ev.N_RESAMPLES
    embedder: dict = field(default_factory=dict)
    gbm: dict = field(default_factory=dict)
    lstm_grid: dict = None
    out: str = "runs"
    model_dir: str = None

    def __post_init__(self):
        if self.downstream not in DOWNSTREAM:
            raise ConfigError("downstream", f"{self.downstream!r} not in {DOWNSTREAM}")
        get_spec(self.task)
        rep = self.rep
        if rep.variant in ("'", "ft", "^P") and not self.source:
            raise ConfigError("source", f"variant {rep.variant} needs a source cohort")
        if rep.variant == "^P" and not self.icu:
            raise ConfigError("icu", "variant ^P needs the ICU cohort")
        self.split = tuple(self.split)
        if self.signals is not None:
            self.signals = list(self.signals)

    @property
    def rep(self):
        return RepresentationSpec.parse(self.representation)

    @property
    def embedder_settings(self):
        return EmbedderSettings(**{k: tuple(v) if k == "hidden" else v for k, v in self.embedder.items()})

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def plan_hash(self):
        d = self.to_dict()
        d.pop("out")
        d.pop("model_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def load_plan(path):
    with open(path) as f:
        return ExperimentPlan.from_dict(json.load(f))


def _cohort_id(ref):
    return os.path.basename(os.path.normpath(ref))


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_dir(path):
    """Digest over every file under a cohort directory (relative names and bytes)."""
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            h.update(_sha256_file(full).encode())
    return h.hexdigest()


def _input_checksums(plan):
    out = {}
    for ref in (plan.target, plan.source, plan.icu):
        if ref and os.path.isdir(ref):
            out[_cohort_id(ref)] = _sha256_dir(ref)
    return out


# ---------------------------------------------------------------------------
# cohort context

@dataclass
class CohortSplits:
    cohort_id: str
    train: object
    valid: object
    test: object
    stats: object


class Workspace:
    """Loaded cohorts, their splits and prep stats, shared across experiments."""

    def __init__(self, cohorts=None, split=(0.7, 0.15, 0.15), split_seed=0):
        self._cohorts = dict(cohorts or {})
        self._splits = {}
        self.split = tuple(split)
        self.split_seed = split_seed

    def cohort(self, ref):
        cid = _cohort_id(ref)
        if cid not in self._cohorts:
            if not os.path.isdir(ref):
                raise DataError(f"cohort {ref!r} is neither loaded nor a directory")
            self._cohorts[cid] = read_cohort(ref)
        return self._cohorts[cid]

    def splits(self, ref):
        c = self.cohort(ref)
        key = (c.cohort_id, self.split, self.split_seed)
        if key not in self._splits:
            tr, va, te = split_cohort(c, self.split, self.split_seed)
            self._splits[key] = CohortSplits(c.cohort_id, tr, va, te, fit_prep_stats(tr))
        return self._splits[key]


# ---------------------------------------------------------------------------
# embedders

def _model_root(plan):
    return plan.model_dir or os.environ.get("PHASE_CACHE_DIR") or os.path.join(plan.out, "models")


def _task_file(task, settings, seed, suffix=""):
    return f"{task}{suffix}-{settings.key()}-s{seed}"


def get_embedder(ws, plan, cohort_ref, signal, source_task, allow_train=True):
    """Load ``<cohort>/<signal>/<task>.phase`` from the model cache or train it on that cohort."""
    settings = plan.embedder_settings
    sp = ws.splits(cohort_ref)
    name = _task_file(source_task.kind, settings, plan.seed)
    path = emb.model_path(_model_root(plan), sp.cohort_id, signal, name)
    if os.path.exists(path):
        return emb.load_model(path), path
    if not allow_train:
        raise DataError(f"missing embedder file {sp.cohort_id}/{signal}/{source_task.kind}")
    mean, std = sp.stats.for_signal(signal)
    seed = _signal_seed(plan.seed, signal)
    if source_task.kind == "rand":
        model = emb.make_random_embedder(signal, emb.embedder_spec(source_task, settings.hidden,
                                                                     settings.dropout_rate,
                                                                     settings.recurrent_dropout_rate),
                                         seed, (mean, std), sp.cohort_id)
    else:
        tr = emb.embedder_data(sp.train, signal, source_task, mean, std, settings.max_points, seed)
        va = emb.embedder_data(sp.valid, signal, source_task, mean, std,
                               None if settings.max_points is None else max(1, settings.max_points // 4), seed)
        cfg = emb.default_train_config(source_task, settings.epochs, seed, batch_size=settings.batch_size,
                                       learning_rate=settings.learning_rate)
        t0 = time.time()
        model = emb.train_embedder(signal, source_task, tr, va, cfg, (mean, std), sp.cohort_id,
                                   settings.hidden, settings.dropout_rate, settings.recurrent_dropout_rate)
        log.info("embedder %s/%s/%s trained in %.1fs", sp.cohort_id, signal, source_task.kind, time.time() - t0)
    emb.save_model(model, path)
    return model, path


def fine_tuned_embedder(ws, plan, source_model, target_ref, signal, source_task):
    settings = plan.embedder_settings
    sp = ws.splits(target_ref)
    name = _task_file(source_task.kind, settings, plan.seed, f"-ft-from-{source_model.source_cohort_id}")
    path = emb.model_path(_model_root(plan), sp.cohort_id, signal, name)
    if os.path.exists(path):
        return emb.load_model(path), path
    seed = _signal_seed(plan.seed, signal)
    mean, std = source_model.prep_mean, source_model.prep_std
    tr = emb.embedder_data(sp.train, signal, source_task, mean, std, settings.max_points, seed)
    va = emb.embedder_data(sp.valid, signal, source_task, mean, std,
                           None if settings.max_points is None else max(1, settings.max_points // 4), seed)
    epochs = settings.finetune_epochs if settings.finetune_epochs is not None else settings.epochs
    cfg = emb.default_train_config(source_task, epochs, seed, batch_size=settings.batch_size,
                                   learning_rate=settings.learning_rate)
    model, _ = emb.fine_tune(source_model, tr, va, cfg, sp.cohort_id)
    emb.save_model(model, path)
    return model, path


def epochs_to_reach(initial, curve, threshold):
    """Epochs of training before the validation loss first drops to ``threshold``.

    0 means the initial parameters already qualify; ``len(curve) + 1``
    means the threshold was never reached.
    """
    if initial <= threshold:
        return 0
    for k, v in enumerate(curve):
        if v <= threshold:
            return k + 1
    return len(curve) + 1


@dataclass
class ConvergenceResult:
    signal: str
    scratch_curve: list        # validation loss per epoch, raw signal units
    finetune_curve: list
    scratch_initial: float
    finetune_initial: float
    threshold: float
    scratch_epochs: int
    finetune_epochs: int


def compare_convergence(ws, plan, signal, tolerance=0.05):
    """Scratch training on the target vs fine-tuning the source embedder.

    Both runs see the same target windows and epoch budget.  Losses are
    rescaled to raw units (MSE times std squared) because the two models
    standardize with different cohorts' statistics.  The threshold is
    ``(1 + tolerance)`` times the best scratch validation loss.
    """
    rep = plan.rep
    if rep.kind != "embedded" or rep.task == "rand":
        raise ConfigError("representation", "convergence needs a trained source task")
    task = emb.SourceTask.parse(rep.task, plan.task)
    settings = plan.embedder_settings
    seed = _signal_seed(plan.seed, signal)
    sp = ws.splits(plan.target)
    source, _ = get_embedder(ws, plan, plan.source, signal, task)
    scratch, _ = get_embedder(ws, plan, plan.target, signal, task)
    vmax = None if settings.max_points is None else max(1, settings.max_points // 4)

    def scale(std):
        return std * std if task.kind != "hypo" else 1.0

    s_hist = scratch.metadata["history"]
    k_s = scale(scratch.prep_std)
    scratch_curve = [v * k_s for v in s_hist["valid_loss"]]
    scratch_initial = s_hist["initial_valid_loss"] * k_s

    mean, std = source.prep_mean, source.prep_std
    tr = emb.embedder_data(sp.train, signal, task, mean, std, settings.max_points, seed)
    va = emb.embedder_data(sp.valid, signal, task, mean, std, vmax, seed)
    epochs = settings.finetune_epochs if settings.finetune_epochs is not None else settings.epochs
    cfg = emb.default_train_config(task, epochs, seed, batch_size=settings.batch_size,
                                   learning_rate=settings.learning_rate)
    _, hist = emb.fine_tune(source, tr, va, cfg, sp.cohort_id)
    k_f = scale(std)
    ft_curve = [v * k_f for v in hist.valid_loss]
    ft_initial = hist.initial_valid_loss * k_f

    threshold = (1.0 + tolerance) * min(scratch_curve)
    return ConvergenceResult(signal, scratch_curve, ft_curve, scratch_initial, ft_initial, threshold,
                             epochs_to_reach(scratch_initial, scratch_curve, threshold),
                             epochs_to_reach(ft_initial, ft_curve, threshold))


def _signal_seed(seed, signal):
    return int.from_bytes(hashlib.sha256(f"{seed}/{signal}".encode()).digest()[:4], "little")


def resolve_embedders(ws, plan, signals):
    """Embedder per signal according to the representation's variant.

    Returns (models, files) where files maps signal to the model path used.
    """
    rep = plan.rep
    source_task = emb.SourceTask.parse(rep.task, plan.task)
    models, files = {}, {}
    for s in signals:
        if rep.variant == "":
            ref = plan.target
        elif rep.variant == "^P" and s == ICU_SIGNAL:
            ref = plan.icu
        else:
            ref = plan.source
        m, path = get_embedder(ws, plan, ref, s, source_task)
        if rep.variant == "ft":
            m, path = fine_tuned_embedder(ws, plan, m, plan.target, s, source_task)
        models[s], files[s] = m, path
    return models, files


# ---------------------------------------------------------------------------
# features

@dataclass
class FeatureSet:
    X: np.ndarray
    provenance: list
    names: list


def build_features(plan, ds, signals, stats, models=None, for_trees=True):
    """Feature matrix for one labeled dataset.

    Tree consumers get NaN for missing raw minutes and raw statics; other
    consumers get imputed values and standardized statics.
    """
    rep = plan.rep if isinstance(plan, ExperimentPlan) else plan
    static_stats = None if for_trees else (stats.static_mean, stats.static_std)
    if rep.kind == "embedded":
        if models is None:
            raise DataError("embedded representation needs embedder models")
        m = emb.assemble_features(models, ds, signals, static_stats)
        return FeatureSet(m.X, m.provenance, m.column_names)
    blocks, prov, names = [], [], []
    for s in signals:
        mean, std = stats.for_signal(s)
        raw = ds.raw_windows(s)
        if rep.kind == "raw":
            z = (raw - mean) / std
            block = z if for_trees else np.where(np.isnan(z), 0.0, z)
            cols = [f"{s}_t{k - N_TIME + 1}" for k in range(N_TIME)]
        else:
            block = ema_features(standardize_values(raw, mean, std), rep.decays)
            cols = [f"{s}_{kind}{a}" for a in rep.decays for kind in ("ema", "emv")] + [f"{s}_last"]
        blocks.append(block)
        prov += [("signal", s)] * block.shape[1]
        names += cols
    blocks.append(emb.static_block(ds, static_stats))
    prov += [("static", n) for n in ds.cohort.static_names]
    names += list(ds.cohort.static_names)
    return FeatureSet(np.hstack(blocks), prov, names)


# ---------------------------------------------------------------------------
# downstream models

MLP_HIDDEN = [("dense", 100, "relu"), ("dense", 100, "relu")]
MLP_LEARNING_RATE = 1e-5
MLP_EPOCHS = 200


def mlp_spec(input_dim):
    return nn.NetworkSpec(input_dim, MLP_HIDDEN, 1, "sigmoid", None, 0.5, 0.0)


def train_downstream_mlp(X, y, X_valid, y_valid, seed=0, epochs=MLP_EPOCHS, batch_size=256,
                         learning_rate=MLP_LEARNING_RATE):
    spec = mlp_spec(X.shape[1])
    cfg = nn.TrainConfig("adam", learning_rate, "bce", epochs, batch_size, False, seed)
    params, hist = nn.train(spec, cfg, X, np.asarray(y, float)[:, None], X_valid, np.asarray(y_valid, float)[:, None])
    return spec, params, hist


LSTM_GRID = {
    "layers": (1, 2, 3),
    "nodes": (100, 200, 300),
    "learning_rate": (0.01, 0.001, 0.0001),
    "dropout": (0.0, 0.5),
    "optimizer": ("adam", "rmsprop", "sgd"),
}


def grid_configs(grid):
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _lstm_inputs(ds, signals, stats):
    return np.stack([ds.windows(s, stats) for s in signals], axis=2)


def run_end_to_end_lstm(X, y, X_valid, y_valid, grid, seed=0, epochs=20, batch_size=256):
    """Grid-search a multi-signal LSTM classifier; select by validation AP.

    Returns (best_config, spec, params, records).
    """
    configs = grid_configs(grid)
    if not configs:
        raise ConfigError("lstm_grid", "grid is empty")
    records, best = [], None
    for k, c in enumerate(configs):
        opt = c.get("optimizer", "adam")
        spec = nn.NetworkSpec(X.shape[2], [("lstm", c.get("nodes", 100))] * c.get("layers", 1), 1, "sigmoid",
                              X.shape[1], c.get("dropout", 0.0), c.get("dropout", 0.0))
        cfg = nn.TrainConfig(opt, c.get("learning_rate", 0.001), "bce", epochs, batch_size, False, seed + k)
        params, _ = nn.train(spec, cfg, X, y[:, None], X_valid, y_valid[:, None])
        ap = ev.average_precision(nn.predict(spec, params, X_valid)[:, 0], y_valid)
        records.append({"config": c, "valid_ap": ap})
        if best is None or ap > best[0]:
            best = (ap, c, spec, params)
    return best[1], best[2], best[3], records


# ---------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentResult:
    report: ev.MetricReport
    run_dir: str
    model: object = None
    features: dict = None
    datasets: dict = None
    embedder_files: dict = None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except PhaseError as e:
        raise StageError(name, e) from e


def _split_id(ds):
    h = hashlib.sha256()
    h.update(ds.cohort.cohort_id.encode())
    h.update(np.asarray(ds.procedure_ids()).astype("U").tobytes())
    h.update(ds.t.astype("<i8").tobytes())
    return h.hexdigest()[:16]


def run_experiment(plan, workspace=None, keep=False):
    """Train or load embedders, build features, fit downstream, evaluate on target test."""
    ws = workspace or Workspace(split=plan.split, split_seed=plan.split_seed)
    if ws.split != tuple(plan.split) or ws.split_seed != plan.split_seed:
        raise ConfigError("split", "workspace split differs from the plan")
    t0 = time.time()
    rep = plan.rep
    sp = _stage("load", ws.splits, plan.target)
    signals = plan.signals or list(sp.train.signal_names)
    spec = get_spec(plan.task)

    def label(c, max_rows, salt):
        ds = label_points(c, spec)
        if len(ds) == 0 or ds.label.min() == ds.label.max():
            raise DataError(f"{c.cohort_id}: need both classes for task {plan.task}")
        return subsample(ds, max_rows, plan.seed + salt)

    ds_tr = _stage("label", label, sp.train, plan.max_train_rows, 1)
    ds_va = _stage("label", label, sp.valid, plan.max_train_rows, 2)
    ds_te = _stage("label", label, sp.test, None, 3)

    models, files = None, {}
    if rep.kind == "embedded":
        models, files = _stage("embedders", resolve_embedders, ws, plan, signals)
    before = {s: _sha256_file(p) for s, p in files.items()}

    trees = plan.downstream == "gbm"
    feats = {}
    if plan.downstream != "lstm":
        for k, ds in (("train", ds_tr), ("valid", ds_va), ("test", ds_te)):
            feats[k] = _stage("features", build_features, plan, ds, signals, sp.stats, models, trees)

    run_dir = os.path.join(plan.out, plan.plan_hash())
    os.makedirs(run_dir, exist_ok=True)
    extra = {}
    if plan.downstream == "gbm":
        cfg = gbm.config_for_task(plan.task, seed=plan.seed, **plan.gbm)
        model = _stage("downstream", gbm.fit, feats["train"].X, ds_tr.label, feats["valid"].X, ds_va.label, cfg)
        scores = gbm.predict_proba(model, feats["test"].X)
        gbm.save_forest(model, os.path.join(run_dir, "forest.json"))
        extra = {"gbm": cfg.to_dict(), "best_round": model.best_round, "n_trees": len(model.trees)}
    elif plan.downstream == "mlp":
        spec_, params, hist = _stage("downstream", train_downstream_mlp, feats["train"].X, ds_tr.label,
                                     feats["valid"].X, ds_va.label, plan.seed)
        model = (spec_, params)
        scores = nn.predict(spec_, params, feats["test"].X)[:, 0]
        extra = {"selected_epoch": hist.selected_epoch}
    else:
        Xs = [_lstm_inputs(d, signals, sp.stats) for d in (ds_tr, ds_va, ds_te)]
        grid = plan.lstm_grid or {"layers": (1,), "nodes": (100,), "learning_rate": (0.001,),
                                  "dropout": (0.0,), "optimizer": ("adam",)}
        best_cfg, spec_, params, records = _stage("downstream", run_end_to_end_lstm, Xs[0], ds_tr.label.astype(float),
                                                  Xs[1], ds_va.label.astype(float), grid, plan.seed)
        model = (spec_, params)
        scores = nn.predict(spec_, params, Xs[2])[:, 0]
        extra = {"selected": best_cfg, "grid": records}

    report = _stage("evaluate", ev.make_report, plan.task, rep.name, scores, ds_te.label, plan.n_resamples,
                    ev.LEVEL, plan.seed, _split_id(ds_te), sp.cohort_id)
    report.extra = extra

    after = {s: _sha256_file(p) for s, p in files.items()}
    if before != after:
        raise StageError("embedders", DataError("embedder files changed during the experiment"))

    ev.write_report(os.path.join(run_dir, "report.json"), report)
    write_scores(os.path.join(run_dir, "scores.csv"), ds_te, scores)
    with open(os.path.join(run_dir, "plan.json"), "w") as f:
        json.dump(plan.to_dict(), f, indent=2, sort_keys=True)
    manifest = {
        "plan_hash": plan.plan_hash(),
        "seeds": {"experiment": plan.seed, "split": plan.split_seed,
                  "signals": {s: _signal_seed(plan.seed, s) for s in signals}},
        "inputs": _input_checksums(plan),
        "embedders": {s: {"path": os.path.relpath(p, plan.out), "sha256": after[s]} for s, p in files.items()},
        "n_rows": {"train": len(ds_tr), "valid": len(ds_va), "test": len(ds_te)},
        "n_features": int(feats["train"].X.shape[1]) if feats else None,
        "seconds": round(time.time() - t0, 3),
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log.info("%s %s %s: AP %.4f (%.1fs)", sp.cohort_id, plan.task, rep.name, report.ap, time.time() - t0)
    res = ExperimentResult(report, run_dir, embedder_files=files)
    if keep:
        res.model, res.features = model, feats
        res.datasets = {"train": ds_tr, "valid": ds_va, "test": ds_te}
    return res


def write_scores(path, ds, scores):
    ids = ds.procedure_ids()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["procedure_id", "t", "label", "score"])
        for r in range(len(ds)):
            w.writerow([ids[r], int(ds.t[r]), int(ds.label[r]), repr(float(scores[r]))])


def read_scores(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "score" not in rows[0] or "label" not in rows[0]:
        raise DataError(f"{path}: expected columns 'score' and 'label'")
    return (np.array([float(r["score"]) for r in rows]), np.array([int(r["label"]) for r in rows]))


@dataclass
class LoadedRun:
    plan: ExperimentPlan
    forest: object
    test: object
    features: FeatureSet


def load_run(run_dir, workspace=None, n_rows=None, seed=0):
    """Reload a finished gbm run: plan, forest and rebuilt test features.

    ``n_rows`` restricts the rebuild to a seeded sample of test rows.
    Embedders come from the model cache only; nothing is retrained.
    """
    plan = load_plan(os.path.join(run_dir, "plan.json"))
    if plan.downstream != "gbm":
        raise ConfigError("downstream", "only gbm runs can be reloaded for explanation")
    forest_path = os.path.join(run_dir, "forest.json")
    if not os.path.exists(forest_path):
        raise DataError(f"{run_dir}: no forest.json")
    ws = workspace or Workspace(split=plan.split, split_seed=plan.split_seed)
    sp = ws.splits(plan.target)
    signals = plan.signals or list(sp.train.signal_names)
    ds_te = label_points(sp.test, get_spec(plan.task))
    if n_rows is not None and n_rows < len(ds_te):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(19,)))
        ds_te = ds_te.subset(np.sort(rng.choice(len(ds_te), size=n_rows, replace=False)))
    models = None
    if plan.rep.kind == "embedded":
        with open(os.path.join(run_dir, "manifest.json")) as f:
            manifest = json.load(f)
        models = {}
        for s in signals:
            entry = manifest["embedders"][s]
            path = os.path.join(plan.out, entry["path"])
            if not os.path.exists(path) or _sha256_file(path) != entry["sha256"]:
                raise DataError(f"embedder for {s} is missing or changed since the run: {path}")
            models[s] = emb.load_model(path)
    fs = build_features(plan, ds_te, signals, sp.stats, models, True)
    return LoadedRun(plan, gbm.load_forest(forest_path), ds_te, fs)


def collect_reports(runs_dir):
    out = []
    for root, _, files in sorted(os.walk(runs_dir)):
        if "report.json" in files:
            out.append(ev.read_report(os.path.join(root, "report.json")))
    return out
