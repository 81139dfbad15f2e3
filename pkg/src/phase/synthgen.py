"""Synthetic operating-room / ICU cohorts.

Every signal is an order-2 autoregressive process around a baseline.  Adverse
events are driven by a hidden instability state: a precursor phase (slow drift
toward the clinical threshold plus amplified variability) is followed by a dip
(or spike) across the threshold, then recovery.  Because the precursor
precedes the crossing by several minutes, the labels are forecastable from
the preceding hour of data.

Each procedure draws from its own random stream keyed by ``(seed, index)``,
so procedures can be generated in any order or in parallel with bitwise
identical results.
"""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError
from .tasks import TASKS, label_series

log = logging.getLogger(__name__)

STATIC_NAMES = ["Height", "Weight", "ASA", "ASA_Emergency", "Gender", "Age"]
PHENYL = "PHENYL"

_BURN_IN = 64
_COOLDOWN = 15
_RECOVERY = 3
_SCHEDULE_START = 30
_PILOT_SEED = 20190801
_REC_STEPS = np.arange(1, _RECOVERY + 1) / (_RECOVERY + 1)


@dataclass
class EventDynamics:
    """How one task's adverse events appear in the signal it is labeled on.

    ``drift`` is the fraction of the baseline-to-threshold distance covered by
    the end of the precursor; ``coupled`` maps other signals to the offset
    (in their units) they reach during the precursor.
    """

    precursor: tuple = (8, 20)
    duration: tuple = (2, 6)
    depth: tuple = (2.0, 6.0)
    drift: float = 0.35
    noise_gain: float = 2.0
    coupled: dict = field(default_factory=dict)


@dataclass
class SignalSpec:
    name: str
    baseline: float
    units: str
    noise: float
    bounds: tuple
    ar: tuple = (0.6, 0.2)
    events: dict = field(default_factory=dict)  # task -> EventDynamics

    def validate(self):
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ConfigError(f"signal_specs[{self.name}].bounds", f"need finite min < max, got {self.bounds}")
        a1, a2 = self.ar
        companion = np.array([[a1, a2], [1.0, 0.0]])
        if np.max(np.abs(np.linalg.eigvals(companion))) >= 1.0:
            raise ConfigError(f"signal_specs[{self.name}].ar", f"AR({a1}, {a2}) is not stable")
        if self.noise < 0:
            raise ConfigError(f"signal_specs[{self.name}].noise", "must be >= 0")
        for task in self.events:
            if task not in TASKS or TASKS[task].signal != self.name:
                raise ConfigError(f"signal_specs[{self.name}].events", f"task {task!r} is not labeled on {self.name}")


@dataclass
class GeneratorConfig:
    cohort_id: str
    n_procedures: int
    signal_specs: list
    static_spec: dict
    event_rate_target: dict
    procedure_len_minutes: tuple = (90, 240)
    missing_rate: object = 0.05  # float, or dict signal -> float
    cohort_shift: dict = field(default_factory=dict)
    phenylephrine: dict = field(default_factory=lambda: {"procedure_fraction": 0.7, "trigger_prob": 0.7})
    calibration_procedures: int = 1500
    seed: int = 0

    @property
    def signal_names(self):
        return [s.name for s in self.signal_specs]

    def missing_for(self, name):
        if isinstance(self.missing_rate, dict):
            return float(self.missing_rate.get(name, 0.0))
        return float(self.missing_rate)

    def validate(self):
        if self.n_procedures < 1:
            raise ConfigError("n_procedures", "must be >= 1")
        lo, hi = self.procedure_len_minutes
        if not (0 < lo <= hi):
            raise ConfigError("procedure_len_minutes", f"invalid range {self.procedure_len_minutes}")
        if not self.signal_specs:
            raise ConfigError("signal_specs", "at least one signal is required")
        names = self.signal_names
        if len(set(names)) != len(names):
            raise ConfigError("signal_specs", "duplicate signal names")
        for spec in self.signal_specs:
            spec.validate()
            rate = self.missing_for(spec.name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError("missing_rate", f"{spec.name}: {rate} not in [0, 1)")
        for task, rate in self.event_rate_target.items():
            if task not in TASKS:
                raise ConfigError("event_rate_target", f"unknown task {task!r}")
            if not 0.0 < rate < 0.5:
                raise ConfigError("event_rate_target", f"{task}: {rate} not in (0, 0.5)")
            if task == "phenylephrine":
                if "hypotension" not in self.event_rate_target and self.phenylephrine.get("trigger_prob", 0) > 0:
                    log.debug("phenylephrine without hypotension events: administrations are untriggered")
                continue
            owner = [s for s in self.signal_specs if task in s.events]
            if not owner:
                raise ConfigError("event_rate_target", f"{task}: no signal carries its event dynamics")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        specs = []
        for s in d.pop("signal_specs"):
            s = dict(s)
            events = {k: EventDynamics(**{kk: (tuple(vv) if isinstance(vv, list) else vv) for kk, vv in v.items()})
                      for k, v in s.pop("events", {}).items()}
            s["bounds"] = tuple(s["bounds"])
            s["ar"] = tuple(s.get("ar", (0.6, 0.2)))
            specs.append(SignalSpec(events=events, **s))
        d["procedure_len_minutes"] = tuple(d.get("procedure_len_minutes", (90, 240)))
        return cls(signal_specs=specs, **d)


@dataclass
class Procedure:
    procedure_id: str
    static: np.ndarray       # (6,) raw static features, NaN = unknown
    values: np.ndarray       # (length, n_signals) raw values, NaN = missing
    phenylephrine: np.ndarray  # (length,) 0/1 administration indicator
    latent: dict = None      # task -> minutes until event onset while in precursor, else -1

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def mask(self):
        return ~np.isnan(self.values)


@dataclass
class RawCohort:
    cohort_id: str
    signal_names: list
    procedures: list
    static_names: list = field(default_factory=lambda: list(STATIC_NAMES))

    def __len__(self):
        return len(self.procedures)

    def signal_index(self, name):
        try:
            return self.signal_names.index(name)
        except ValueError:
            raise DataError(f"signal {name!r} not in cohort {self.cohort_id!r} (has {self.signal_names})") from None

    def subset(self, indices, cohort_id=None):
        return RawCohort(cohort_id or self.cohort_id, list(self.signal_names),
                         [self.procedures[i] for i in indices], list(self.static_names))


# ---------------------------------------------------------------------------
# default cohorts

def default_signal_specs():
    """Fifteen OR signals: the thirteen AIMS names plus TV and ETSEVO."""
    spec = [
        SignalSpec("SAO2", 97.5, "%", 0.35, (50.0, 100.0), events={
            "hypoxemia": EventDynamics(precursor=(8, 18), duration=(2, 5), depth=(2.0, 6.0), drift=0.3,
                                       noise_gain=2.0, coupled={"RESPRATE": 0.6, "ECGRATE": 1.5, "ETCO2": 0.5}),
        }),
        SignalSpec("ETCO2", 39.0, "mmHg", 0.45, (10.0, 80.0), events={
            "hypocapnia": EventDynamics(precursor=(8, 18), duration=(2, 6), depth=(2.0, 5.0), drift=0.35,
                                        noise_gain=1.8, coupled={"RESPRATE": 5.0, "TV": 60.0}),
        }),
        SignalSpec("NIBPS", 118.0, "mmHg", 2.2, (40.0, 250.0)),
        SignalSpec("NIBPM", 82.0, "mmHg", 1.6, (25.0, 200.0), events={
            "hypotension": EventDynamics(precursor=(8, 18), duration=(2, 6), depth=(6.0, 14.0), drift=0.35,
                                         noise_gain=1.8, coupled={"NIBPS": -18.0, "NIBPD": -12.0, "ECGRATE": 8.0,
                                                                  "ETSEV": 0.4, "ETSEVO": 0.4}),
            "hypertension": EventDynamics(precursor=(8, 18), duration=(2, 6), depth=(6.0, 16.0), drift=0.35,
                                          noise_gain=1.8, coupled={"NIBPS": 25.0, "NIBPD": 15.0, "ECGRATE": 10.0}),
        }),
        SignalSpec("NIBPD", 64.0, "mmHg", 1.6, (15.0, 150.0)),
        SignalSpec("FIO2", 55.0, "%", 1.5, (21.0, 100.0)),
        SignalSpec("ETSEV", 1.8, "%", 0.06, (0.0, 8.0)),
        SignalSpec("ECGRATE", 74.0, "bpm", 1.5, (25.0, 200.0)),
        SignalSpec("PEAK", 21.0, "cmH2O", 0.7, (0.0, 60.0)),
        SignalSpec("PEEP", 5.0, "cmH2O", 0.25, (0.0, 25.0)),
        SignalSpec("PIP", 23.0, "cmH2O", 0.7, (0.0, 60.0)),
        SignalSpec("RESPRATE", 12.0, "1/min", 0.5, (3.0, 45.0)),
        SignalSpec("TEMP1", 36.4, "C", 0.04, (32.0, 41.0)),
        SignalSpec("TV", 480.0, "mL", 12.0, (50.0, 1200.0)),
        SignalSpec("ETSEVO", 1.6, "%", 0.06, (0.0, 8.0)),
    ]
    return spec


_OR0_STATIC = {
    "gender_female": 0.57, "age": (51.859, 16.748), "weight": (185.273, 54.042), "height": (66.913, 8.268),
    "asa": [0.1158, 0.4116, 0.3952, 0.0754, 0.0019, 0.0001], "emergency": 0.0765,
}
_OR1_STATIC = {
    "gender_female": 0.38, "age": (48.701, 18.419), "weight": (181.608, 54.194), "height": (67.502, 8.607),
    "asa": [0.1657, 0.4393, 0.3157, 0.0730, 0.0048, 0.0016], "emergency": 0.1531,
}
_ICU_STATIC = {
    "gender_female": 0.44, "age": (63.956, 17.708), "weight": (176.662, 55.448), "height": (66.967, 6.181),
    "asa": None, "emergency": None,
}

# labeled base rates per cohort
_OR0_RATES = {"hypoxemia": 0.0109, "hypocapnia": 0.0976, "hypotension": 0.0744,
              "hypertension": 0.0170, "phenylephrine": 0.0723}
_OR1_RATES = {"hypoxemia": 0.0219, "hypocapnia": 0.0806, "hypotension": 0.0353,
              "hypertension": 0.0166, "phenylephrine": 0.0915}
_ICU_RATES = {"hypoxemia": 0.0393}

_OR1_SHIFT = {
    "baseline": {"SAO2": 0.3, "ETCO2": -0.8, "NIBPM": 3.0, "NIBPS": 4.0, "NIBPD": 2.0, "ECGRATE": 4.0,
                 "RESPRATE": 1.0, "TV": 30.0, "FIO2": 5.0},
    "ar": (0.15, -0.1),
    "noise_scale": 1.15,
}
_ICU_SHIFT = {"baseline": {"SAO2": -0.5}, "ar": (0.1, 0.0), "noise_scale": 1.3}


def default_config(cohort="OR0", n_procedures=2000, seed=0, **overrides):
    """Preset cohorts echoing the OR0 / OR1 / ICU_P roles."""
    signals = default_signal_specs()
    if cohort == "OR0":
        cfg = GeneratorConfig("OR0", n_procedures, signals, dict(_OR0_STATIC), dict(_OR0_RATES), seed=seed)
    elif cohort == "OR1":
        cfg = GeneratorConfig("OR1", n_procedures, signals, dict(_OR1_STATIC), dict(_OR1_RATES),
                              cohort_shift=dict(_OR1_SHIFT), seed=seed)
    elif cohort == "ICU_P":
        sao2 = [s for s in signals if s.name == "SAO2"][0]
        sao2.events["hypoxemia"].coupled = {}
        cfg = GeneratorConfig("ICU_P", n_procedures, [sao2], dict(_ICU_STATIC), dict(_ICU_RATES),
                              procedure_len_minutes=(120, 360), cohort_shift=dict(_ICU_SHIFT), seed=seed)
    else:
        raise ConfigError("cohort_id", f"unknown preset {cohort!r}; expected OR0, OR1 or ICU_P")
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ConfigError(k, "unknown GeneratorConfig field")
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# generation

def _shifted(spec, shift):
    base = spec.baseline + shift.get("baseline", {}).get(spec.name, 0.0)
    da1, da2 = shift.get("ar", (0.0, 0.0))
    a1, a2 = spec.ar[0] + da1, spec.ar[1] + da2
    noise = spec.noise * shift.get("noise_scale", 1.0)
    return base, (a1, a2), noise


def _event_layout(config):
    """Tasks grouped by the signal whose dips/spikes define them."""
    layout = {}
    for spec in config.signal_specs:
        tasks = [t for t in spec.events if t in config.event_rate_target]
        if tasks:
            layout[spec.name] = tasks
    return layout


def _schedule(rng, length, hazards, dyn):
    """Renewal process of non-overlapping events on one signal.

    ``hazards`` are per-minute onset probabilities per task.  A fixed bundle
    of random numbers is drawn per event so that calibration sees common
    random numbers across hazard settings.
    """
    tasks = list(hazards)
    total = sum(hazards.values())
    events = []
    cursor = _SCHEDULE_START
    while True:
        u = rng.random(5)
        if total <= 0:
            break
        wait = int(math.floor(math.log(max(u[0], 1e-300)) / math.log1p(-min(total, 0.999999))))
        cum = np.cumsum([hazards[t] for t in tasks]) / total
        task = tasks[int(np.searchsorted(cum, u[1] * cum[-1], side="right").clip(0, len(tasks) - 1))]
        d = dyn[task]
        pre = d.precursor[0] + int(u[2] * (d.precursor[1] - d.precursor[0] + 1))
        dur = d.duration[0] + int(u[3] * (d.duration[1] - d.duration[0] + 1))
        depth = d.depth[0] + u[4] * (d.depth[1] - d.depth[0])
        start = cursor + wait
        onset = start + pre
        if onset + dur >= length:
            break
        events.append((task, start, onset, dur, depth))
        cursor = onset + dur + _COOLDOWN
    return events


def _phenyl_admin(rng, length, hazard, events, params):
    u = rng.random(length)
    trig = rng.random(len(events) + 1)
    lag = rng.integers(0, 3, size=len(events) + 1)
    is_user = trig[-1] < params.get("procedure_fraction", 0.7)
    admin = np.zeros(length, dtype=np.int8)
    if not is_user:
        return admin
    admin[_SCHEDULE_START:] = u[_SCHEDULE_START:] < hazard
    p_trig = params.get("trigger_prob", 0.7)
    for k, (task, _start, onset, _dur, _depth) in enumerate(events):
        if task == "hypotension" and trig[k] < p_trig and onset + lag[k] < length:
            admin[onset + lag[k]] = 1
    return admin


def _draw_length(rng, config):
    lo, hi = config.procedure_len_minutes
    return int(rng.integers(lo, hi + 1))


def _draw_static(rng, spec):
    u = rng.random(6)
    z = rng.standard_normal(3)
    female = float(u[0] < spec["gender_female"])
    age = float(np.clip(spec["age"][0] + spec["age"][1] * z[0], 18, 95))
    weight = float(np.clip(spec["weight"][0] + spec["weight"][1] * z[1], 80, 450))
    height = float(np.clip(spec["height"][0] + spec["height"][1] * z[2], 48, 84))
    if spec.get("asa") is not None:
        probs = np.asarray(spec["asa"], dtype=float)
        asa = float(1 + np.searchsorted(np.cumsum(probs) / probs.sum(), u[1], side="right"))
        asa = min(asa, float(len(probs)))
        emergency = float(u[2] < spec["emergency"])
    else:
        asa = emergency = np.nan
    return np.array([height, weight, asa, emergency, female, age])


def _procedure_streams(seed, index):
    ss = np.random.SeedSequence(seed, spawn_key=(0, index))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _calibration_rng(index):
    # fixed pilot streams: hazards depend on the dynamics and targets, not the seed
    ss = np.random.SeedSequence(_PILOT_SEED, spawn_key=(1, index))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _indicator_rates(config, hazards, phenyl_hazard):
    """Labeled base rate per task on idealized pilot procedures.

    Each pilot procedure uses its own seeded streams so every call sees
    the same random numbers; only the hazards change.
    """
    layout = _event_layout(config)
    dyn = {t: s.events[t] for s in config.signal_specs for t in s.events}
    base = {s.name: _shifted(s, config.cohort_shift)[0] for s in config.signal_specs}
    pos = {t: 0 for t in config.event_rate_target}
    tot = {t: 0 for t in config.event_rate_target}
    for i in range(config.calibration_procedures):
        r_len, r_evt, r_miss, r_ph = _calibration_rng(i)
        length = _draw_length(r_len, config)
        all_events = []
        for sig, tasks in layout.items():
            events = _schedule(r_evt, length, {t: hazards[t] for t in tasks}, dyn)
            all_events.extend(events)
            miss = r_miss.random(length) < config.missing_for(sig)
            for task in tasks:
                spec = TASKS[task]
                sign = 1.0 if spec.direction == "below" else -1.0
                vals = np.full(length, spec.threshold + 10.0 * sign)
                for (tk, _s, onset, dur, depth) in events:
                    if tk == task:
                        vals[onset:onset + dur] = spec.threshold - 5.0 * sign
                        # recovery minutes still beyond the threshold
                        level = base[sig] + (spec.threshold - sign * depth - base[sig]) * (1 - _REC_STEPS)
                        beyond = (level < spec.threshold) if sign > 0 else (level > spec.threshold)
                        stop = min(onset + dur + _RECOVERY, length)
                        rec = vals[onset + dur:stop]
                        rec[beyond[:len(rec)]] = spec.threshold - 5.0 * sign
                vals[miss] = np.nan
                _, lab = label_series(vals, spec)
                lab = lab[lab >= 0]
                pos[task] += int(lab.sum())
                tot[task] += len(lab)
        if "phenylephrine" in config.event_rate_target:
            admin = _phenyl_admin(r_ph, length, phenyl_hazard, all_events, config.phenylephrine)
            if admin.any():
                _, lab = label_series(None, TASKS["phenylephrine"], admin)
                pos["phenylephrine"] += int(lab.sum())
                tot["phenylephrine"] += len(lab)
    return {t: pos[t] / max(tot[t], 1) for t in pos}


def _calibration_key(config):
    d = config.to_dict()
    for k in ("cohort_id", "n_procedures", "seed", "static_spec"):
        d.pop(k)
    return json.dumps(d, sort_keys=True, default=str)


_HAZARD_CACHE = {}


def calibrate_hazards(config, iterations=8):
    """Per-minute event hazards reproducing ``event_rate_target``.

    Fixed-point iteration on a pilot cohort of idealized threshold
    indicators.  A pure function of the config (memoized per process).
    """
    key = _calibration_key(config)
    if key not in _HAZARD_CACHE:
        _HAZARD_CACHE[key] = _calibrate(config, iterations)
    hazards, phenyl = _HAZARD_CACHE[key]
    return dict(hazards), phenyl


def _calibrate(config, iterations):
    targets = config.event_rate_target
    hazards = {}
    for t, r in targets.items():
        if t == "phenylephrine":
            continue
        dyn = [s.events[t] for s in config.signal_specs if t in s.events][0]
        excl = np.mean(dyn.duration) + (0 if t == "hypoxemia" else 14)
        freq = r / (5.0 + r * excl)
        cycle = np.mean(dyn.precursor) + np.mean(dyn.duration) + _COOLDOWN
        hazards[t] = float(min(0.5, freq / max(1e-6, 1.0 - freq * cycle)))
    phenyl = targets.get("phenylephrine", 0.0) / 5.0
    for _ in range(iterations):
        rates = _indicator_rates(config, hazards, phenyl)
        for t in hazards:
            ratio = targets[t] / max(rates[t], 1e-6)
            hazards[t] = float(min(0.5, hazards[t] * ratio ** 0.8))
        if "phenylephrine" in targets:
            ratio = targets["phenylephrine"] / max(rates["phenylephrine"], 1e-6)
            phenyl = float(min(0.5, max(1e-5, phenyl * ratio ** 0.8)))
    return hazards, phenyl


def _ar_noise(rng, length, ar, noise, gain):
    eps = rng.standard_normal(length + _BURN_IN)
    scale = np.concatenate([np.ones(_BURN_IN), gain]) * noise
    e = lfilter([1.0], [1.0, -ar[0], -ar[1]], eps * scale)
    return e[_BURN_IN:]


def _generate_procedure(config, index, hazards, phenyl_hazard):
    r_len, r_evt, r_sig, r_aux = _procedure_streams(config.seed, index)
    length = _draw_length(r_len, config)
    static = _draw_static(r_aux, config.static_spec)
    shift = config.cohort_shift
    names = config.signal_names
    col = {n: j for j, n in enumerate(names)}
    dyn = {t: s.events[t] for s in config.signal_specs for t in s.events}

    layout = _event_layout(config)
    events_by_signal = {}
    all_events = []
    for sig, tasks in layout.items():
        ev = _schedule(r_evt, length, {t: hazards[t] for t in tasks}, dyn)
        events_by_signal[sig] = ev
        all_events.extend(ev)

    offset = np.zeros((length, len(names)))
    gain = np.ones((length, len(names)))
    latent = {t: np.full(length, -1, dtype=np.int32) for t in config.event_rate_target if t != "phenylephrine"}
    params = {s.name: _shifted(s, shift) for s in config.signal_specs}
    for sig, events in events_by_signal.items():
        j = col[sig]
        base = params[sig][0]
        for task, start, onset, dur, depth in events:
            spec, d = TASKS[task], dyn[task]
            sign = -1.0 if spec.direction == "below" else 1.0
            pre = onset - start
            ramp = np.arange(1, pre + 1) / pre
            dip_level = spec.threshold + sign * depth - base
            drift_level = d.drift * (spec.threshold - base)
            rec = _REC_STEPS
            end = min(onset + dur + _RECOVERY, length)
            offset[start:onset, j] += drift_level * ramp
            offset[onset:onset + dur, j] += dip_level
            offset[onset + dur:end, j] += (dip_level * (1 - rec))[:end - onset - dur]
            gain[start:onset, j] *= d.noise_gain
            latent[task][start:onset] = onset - np.arange(start, onset)
            for other, amount in d.coupled.items():
                if other not in col:
                    continue
                k = col[other]
                offset[start:onset, k] += amount * ramp
                offset[onset:onset + dur, k] += amount
                offset[onset + dur:end, k] += (amount * (1 - rec))[:end - onset - dur]

    values = np.empty((length, len(names)))
    for j, s in enumerate(config.signal_specs):
        base, ar, noise = params[s.name]
        e = _ar_noise(r_sig, length, ar, noise, gain[:, j])
        values[:, j] = np.clip(base + offset[:, j] + e, *s.bounds)
        miss = r_sig.random(length) < config.missing_for(s.name)
        values[miss, j] = np.nan

    admin = _phenyl_admin(r_aux, length, phenyl_hazard, all_events, config.phenylephrine) \
        if "phenylephrine" in config.event_rate_target else np.zeros(length, dtype=np.int8)
    return Procedure(f"{config.cohort_id}-{index:06d}", static, values, admin, latent)


def generate_cohort(config):
    """Generate ``config.n_procedures`` procedures deterministically from the config."""
    config.validate()
    hazards, phenyl = calibrate_hazards(config)
    log.info("cohort %s hazards %s phenylephrine %.5f", config.cohort_id, hazards, phenyl)
    procedures = [_generate_procedure(config, i, hazards, phenyl) for i in range(config.n_procedures)]
    return RawCohort(config.cohort_id, config.signal_names, procedures)


def split_cohort(cohort, fractions=(0.7, 0.15, 0.15), seed=0):
    """Split at procedure granularity into train / valid / test cohorts."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions", f"need three nonnegative fractions summing to 1, got {fractions}")
    n = len(cohort)
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    parts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    return tuple(cohort.subset(sorted(p.tolist())) for p in parts)


# ---------------------------------------------------------------------------
# on-disk format

def _fmt(x):
    return "" if np.isnan(x) else repr(float(x))


def write_cohort(cohort, directory, config=None):
    """Write ``static.csv``, ``signals/<procedure_id>.csv`` and ``config.json``."""
    os.makedirs(os.path.join(directory, "signals"), exist_ok=True)
    with open(os.path.join(directory, "static.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["procedure_id"] + list(cohort.static_names))
        for p in cohort.procedures:
            w.writerow([p.procedure_id] + [_fmt(v) for v in p.static])
    for p in cohort.procedures:
        with open(os.path.join(directory, "signals", f"{p.procedure_id}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["minute"] + list(cohort.signal_names) + [PHENYL])
            for t in range(p.length):
                w.writerow([t] + [_fmt(v) for v in p.values[t]] + [int(p.phenylephrine[t])])
    meta = {"cohort_id": cohort.cohort_id, "signals": list(cohort.signal_names)}
    if config is not None:
        meta["generator"] = config.to_dict()
    with open(os.path.join(directory, "config.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def read_cohort(directory):
    path = os.path.join(directory, "config.json")
    if not os.path.exists(path):
        raise DataError(f"{directory}: not a cohort directory (config.json missing)")
    with open(path) as f:
        meta = json.load(f)
    signals = meta["signals"]
    procedures = []
    with open(os.path.join(directory, "static.csv"), newline="") as f:
        rows = list(csv.reader(f))
    static_names = rows[0][1:]
    for row in rows[1:]:
        pid = row[0]
        static = np.array([float(v) if v != "" else np.nan for v in row[1:]])
        with open(os.path.join(directory, "signals", f"{pid}.csv"), newline="") as f:
            sig_rows = list(csv.reader(f))
        header = sig_rows[0]
        if header[1:1 + len(signals)] != signals:
            raise DataError(f"{pid}: signal columns {header[1:]} do not match config {signals}")
        body = sig_rows[1:]
        values = np.array([[float(v) if v != "" else np.nan for v in r[1:1 + len(signals)]] for r in body])
        values = values.reshape(len(body), len(signals))
        admin = np.array([int(r[1 + len(signals)]) if len(r) > 1 + len(signals) else 0 for r in body], dtype=np.int8)
        procedures.append(Procedure(pid, static, values, admin, None))
    return RawCohort(meta["cohort_id"], signals, procedures, static_names)


def load_config(path):
    with open(path) as f:
        d = json.load(f)
    if "preset" in d:
        preset = d.pop("preset")
        return default_config(preset, **d)
    return GeneratorConfig.from_dict(d)
