"""Synthetic EHR cohort generator.

Each admission is generated from its own child seed, so a cohort is identical
whether it is produced sequentially or in parallel.  Positives carry vital
signs that drift towards (but never across) the SIRS thresholds before onset,
then cross two criteria at the onset round, followed by a blood culture and IV
antibiotics.  Negatives never combine two SIRS criteria with an infection
marker.

Vital signs are registered in hourly rounds.  For positives, the round ``k``
hours before onset is kept with a probability that depends on ``k``; the
defaults reproduce the falling vital-sign completeness seen before onset
(100% of positives with vitals in the 6 h before onset, about 65% in
[t-9h, t-3h], 43% in [t-18h, t-12h], 32% in [t-30h, t-24h]).
"""
from __future__ import annotations

import configparser
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cohort import HOUR, Admission, has_complete_vitals, label_admission
from .events import Event, EventSequence

DAY = 24 * HOUR


class ConfigError(ValueError):
    pass


# -- vital registration profiles ---------------------------------------------

@dataclass(frozen=True)
class VitalProfile:
    """Keep probability of an hourly vital round.

    ``bands`` are ``(upper_hours, q)`` pairs: a positive's round ``k`` hours
    before onset uses the first band with ``k < upper_hours``; rounds beyond the
    last band and all rounds of negatives use ``baseline``.  The onset round and
    post-onset rounds are always kept.
    """

    name: str
    bands: tuple[tuple[float, float], ...]
    baseline: float

    def keep_prob(self, hours_before: float | None) -> float:
        if hours_before is None:
            return self.baseline
        if hours_before <= 0:
            return 1.0
        for upper, q in self.bands:
            if hours_before < upper:
                return q
        return self.baseline

    def validate(self) -> None:
        qs = [q for _, q in self.bands] + [self.baseline]
        if any(not 0 <= q <= 1 for q in qs):
            raise ConfigError(f"profile {self.name}: keep probabilities must lie in [0, 1]")
        if any(b > a for a, b in zip(qs, qs[1:])):
            raise ConfigError(f"profile {self.name}: completeness must not increase with distance from onset")


PROFILES = {
    "fig4": VitalProfile("fig4", ((3, 0.5), (6, 0.189), (12, 0.10), (24, 0.0772)), 0.0536),
    "full": VitalProfile("full", (), 1.0),
    "sparse60": VitalProfile("sparse60", (), 0.4),
}

# fraction of positives with >= 2 vitals registered in [onset - a, onset - b] hours
COMPLETENESS_TARGETS = {(6, 0): 1.00, (9, 3): 0.65, (18, 12): 0.43, (30, 24): 0.32}


# -- config ------------------------------------------------------------------

DEFAULT_DEPARTMENTS = {
    "emergency": (0.30, 0.12),
    "medicine": (0.30, 0.09),
    "surgery": (0.20, 0.05),
    "cardiology": (0.15, 0.045),
    "orthopedics": (0.05, 0.01),
}


@dataclass(frozen=True)
class CohortConfig:
    n_admissions: int = 2000
    seed: int = 0
    departments: tuple[tuple[str, float, float], ...] = tuple((k, *v) for k, v in DEFAULT_DEPARTMENTS.items())
    prevalence: float | None = None  # overrides every department's prevalence when set
    profile: str = "fig4"
    outpatient_fraction: float = 0.04
    short_stay_fraction: float = 0.03
    min_stay_h: float = 7.0
    median_stay_h: float = 48.0
    max_stay_h: float = 14 * 24.0
    mean_onset_h: float = 40.0
    intervention_rate: float = 0.3
    intervention_lead_h: tuple[float, float] = (3.0, 48.0)
    negative_marker_rate: float = 0.1
    negative_mix: tuple[tuple[str, float], ...] = (("normal", 0.60), ("chronic", 0.15),
                                                    ("sirs_no_marker", 0.10), ("drift", 0.15))

    def dept_prevalence(self, name: str) -> float:
        if self.prevalence is not None:
            return self.prevalence
        return dict((d, p) for d, _, p in self.departments)[name]

    def expected_prevalence(self) -> float:
        return float(sum(w * self.dept_prevalence(d) for d, w, _ in self.departments))

    @property
    def vital_profile(self) -> VitalProfile:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown vital profile {self.profile!r}; choose from {sorted(PROFILES)}")
        return PROFILES[self.profile]

    def validate(self) -> None:
        if self.n_admissions < 0:
            raise ConfigError("n_admissions must be >= 0")
        if not self.departments:
            raise ConfigError("at least one department is required")
        weights = [w for _, w, _ in self.departments]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1) > 1e-6:
            raise ConfigError(f"department weights must be >= 0 and sum to 1, got {sum(weights):.6f}")
        prevs = [self.dept_prevalence(d) for d, _, _ in self.departments]
        if any(not 0 <= p <= 1 for p in prevs):
            raise ConfigError("prevalences must lie in [0, 1]")
        for name, f in (("outpatient_fraction", self.outpatient_fraction),
                        ("short_stay_fraction", self.short_stay_fraction),
                        ("intervention_rate", self.intervention_rate),
                        ("negative_marker_rate", self.negative_marker_rate)):
            if not 0 <= f <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.outpatient_fraction + self.short_stay_fraction > 1:
            raise ConfigError("outpatient and short-stay fractions exceed 1")
        if max(prevs) > 0 and self.max_stay_h < 9:
            raise ConfigError("stays too short to host an onset 3 h after admission plus follow-up")
        if max(prevs) >= 1 and self.outpatient_fraction + self.short_stay_fraction >= 1:
            raise ConfigError("prevalence 1.0 with no eligible stays is infeasible")
        if not 6 < self.min_stay_h <= self.median_stay_h <= self.max_stay_h:
            raise ConfigError("need 6 h < min_stay_h <= median_stay_h <= max_stay_h")
        lo, hi = self.intervention_lead_h
        if not 0 < lo <= hi:
            raise ConfigError("intervention_lead_h must satisfy 0 < low <= high")
        mix = [w for _, w in self.negative_mix]
        if any(w < 0 for w in mix) or abs(sum(mix) - 1) > 1e-6:
            raise ConfigError("negative_mix weights must sum to 1")
        unknown = {k for k, _ in self.negative_mix} - set(_NEGATIVE_KINDS)
        if unknown:
            raise ConfigError(f"unknown negative kinds {sorted(unknown)}")
        self.vital_profile.validate()

    # -- key-value file ---------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["cohort"] = {
            "n_admissions": str(self.n_admissions), "seed": str(self.seed), "profile": self.profile,
            "prevalence": "" if self.prevalence is None else repr(self.prevalence),
            "outpatient_fraction": repr(self.outpatient_fraction),
            "short_stay_fraction": repr(self.short_stay_fraction),
            "min_stay_h": repr(self.min_stay_h), "median_stay_h": repr(self.median_stay_h),
            "max_stay_h": repr(self.max_stay_h), "mean_onset_h": repr(self.mean_onset_h),
            "intervention_rate": repr(self.intervention_rate),
            "intervention_lead_h": ", ".join(map(repr, self.intervention_lead_h)),
            "negative_marker_rate": repr(self.negative_marker_rate),
        }
        cp["departments"] = {d: f"{w!r}, {p!r}" for d, w, p in self.departments}
        cp["negative_mix"] = {k: repr(w) for k, w in self.negative_mix}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "CohortConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw = {}
        if cp.has_section("cohort"):
            sec = cp["cohort"]
            ints = {"n_admissions", "seed"}
            floats = {"outpatient_fraction", "short_stay_fraction", "min_stay_h", "median_stay_h",
                      "max_stay_h", "mean_onset_h", "intervention_rate", "negative_marker_rate"}
            for key, raw in sec.items():
                try:
                    if key in ints:
                        kw[key] = int(raw)
                    elif key in floats:
                        kw[key] = float(raw)
                    elif key == "prevalence":
                        kw[key] = float(raw) if raw.strip() else None
                    elif key == "profile":
                        kw[key] = raw.strip()
                    elif key == "intervention_lead_h":
                        kw[key] = tuple(float(x) for x in raw.split(","))
                    else:
                        raise ConfigError(f"unknown cohort key {key!r}")
                except ValueError as exc:
                    if isinstance(exc, ConfigError):
                        raise
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        if cp.has_section("departments"):
            deps = []
            for name, raw in cp["departments"].items():
                parts = [p.strip() for p in raw.split(",")]
                if len(parts) != 2:
                    raise ConfigError(f"department {name}: expected 'weight, prevalence'")
                deps.append((name, float(parts[0]), float(parts[1])))
            kw["departments"] = tuple(deps)
        if cp.has_section("negative_mix"):
            kw["negative_mix"] = tuple((k, float(v)) for k, v in cp["negative_mix"].items())
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "CohortConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


# -- code pools ----------------------------------------------------------------

_DIAG_BY_DEPT = {
    "emergency": ("R07.4", "R10.4", "S06.0", "R55.9", "T78.4"),
    "medicine": ("I50.9", "J44.1", "E11.9", "N17.9", "D64.9"),
    "surgery": ("K35.8", "K80.2", "K56.6", "K40.9", "C18.7"),
    "cardiology": ("I21.4", "I48.9", "I20.0", "I50.1", "I47.1"),
    "orthopedics": ("S72.0", "M16.9", "S82.6", "M17.1", "S42.2"),
}
_INFECTION_DIAG = ("J18.9", "N39.0", "A41.9", "L03.1", "K65.0")
_COMORBID_CODES = ("E11.9", "I10.9", "I50.9", "I25.1", "I48.0", "I63.9", "J44.9", "N18.3",
                   "K70.3", "C34.9", "C91.1", "F03.9", "E66.9", "F10.2")
_ORAL = ("C09AA02", "N02BE01", "B01AC06", "A10BA02", "C07AB02", "C03CA01", "N05CF01", "C10AA05")
_IV_OTHER = ("B05BB01", "N02BE01", "A02BC02", "H02AB04", "B01AB05")
_IV_ANTIBIOTIC = ("J01CR05", "J01DD04", "J01XA01", "J01CF05", "J02AC01", "J01MA02")
_PROCS = ("BGDA0", "ZZ0150", "BNGA0", "UXRC00", "UXUC00", "BOQP2", "KTJA10")
_OTHER_MICRO = ("urine_culture", "sputum_culture", "wound_swab")
_NEGATIVE_KINDS = ("normal", "chronic", "sirs_no_marker", "drift")

_SEXES = ("male", "female")
_MARITAL = ("married", "single", "divorced", "widowed")

# (baseline mean, between-patient sd, reading noise sd, pre-onset drift target)
_VITAL_MODEL = {
    "hr": (76.0, 5.0, 5.0, 89.5),
    "rr": (15.0, 1.2, 1.3, 19.8),
    "temp": (36.8, 0.2, 0.2, 37.9),
    "spo2": (97.0, 1.0, 1.0, 92.0),
    "bp_sys": (126.0, 10.0, 7.0, 100.0),
    "bp_dia": (76.0, 6.0, 5.0, 62.0),
}
# readings never cross the SIRS thresholds before onset
_SUB_SIRS = {"hr": (None, 90.0), "rr": (None, 20.0), "temp": (36.0, 38.0)}


def _clip_sub_sirs(name, v):
    lo, hi = _SUB_SIRS.get(name, (None, None))
    if hi is not None:
        v = min(v, hi)
    if lo is not None:
        v = max(v, lo)
    return v


def _r1(v) -> float:
    return float(round(float(v), 1))


# -- one admission -------------------------------------------------------------

@dataclass
class _Plan:
    id: str
    department: str
    contact_type: str
    duration: int
    positive: bool
    kind: str
    onset: int | None = None
    drift_start: int | None = None  # minute the pre-onset drift begins
    drift_end: int | None = None
    amplitude: float = 0.0
    events: list = field(default_factory=list)


def _stay_minutes(rng, cfg: CohortConfig) -> int:
    h = cfg.median_stay_h * math.exp(rng.normal(0, 0.7))
    return int(round(min(max(h, cfg.min_stay_h), cfg.max_stay_h) * HOUR))


def _plan(i: int, rng: np.random.Generator, cfg: CohortConfig) -> _Plan:
    names = [d for d, _, _ in cfg.departments]
    weights = np.array([w for _, w, _ in cfg.departments], float)
    dept = names[int(rng.choice(len(names), p=weights / weights.sum()))]
    u = rng.random()
    aid = f"A{i:06d}"
    if u < cfg.outpatient_fraction:
        return _Plan(aid, dept, "outpatient", int(rng.integers(60, 300)), False, "outpatient")
    if u < cfg.outpatient_fraction + cfg.short_stay_fraction:
        return _Plan(aid, dept, "inpatient", int(rng.integers(30, 3 * HOUR)), False, "short")
    if rng.random() < cfg.dept_prevalence(dept):
        onset_h = 3.0 + rng.exponential(cfg.mean_onset_h - 3.0)
        onset_h = min(onset_h, cfg.max_stay_h - 6.0)
        onset = int(round(onset_h * HOUR))
        after = int(rng.integers(6 * HOUR, 72 * HOUR))
        duration = min(onset + after, int(cfg.max_stay_h * HOUR))
        drift_len = int(rng.uniform(3.5, 7) * HOUR)
        return _Plan(aid, dept, "inpatient", duration, True, "positive", onset,
                     onset - drift_len, onset, float(rng.uniform(0.5, 1.0)))
    kinds = [k for k, _ in cfg.negative_mix]
    probs = np.array([w for _, w in cfg.negative_mix], float)
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    duration = _stay_minutes(rng, cfg)
    plan = _Plan(aid, dept, "inpatient", duration, False, kind)
    if kind == "drift":
        end = int(rng.integers(3 * HOUR, duration - 3 * HOUR + 1))
        plan.drift_start, plan.drift_end = end - int(rng.uniform(3.5, 7) * HOUR), end
        plan.amplitude = float(rng.uniform(0.3, 0.8))
    return plan


RISE_H = 2.0
PRODROME_H = 36


def _ramp(plan: _Plan, t: int) -> float:
    if plan.drift_start is None:
        return 0.0
    # acute decompensation: vitals shift over a couple of hours, then plateau
    return float(np.clip((t - plan.drift_start) / (RISE_H * HOUR), 0.0, 1.0)) * plan.amplitude


def _inflammation(plan: _Plan, t: int) -> float:
    """Linear rise over the prodrome of a positive; flat otherwise."""
    if not plan.positive:
        return 0.0
    start = plan.onset - PRODROME_H * HOUR
    return float(np.clip((t - start) / (PRODROME_H * HOUR), 0.0, 1.0)) * plan.amplitude


def _context(plan: _Plan, rng) -> dict:
    age = rng.normal(67 if plan.positive else 58, 16)
    p_com = 0.16 if plan.positive else 0.09
    com = sorted(c for c in _COMORBID_CODES if rng.random() < p_com)
    return {"age": int(np.clip(round(age), 18, 100)), "sex": _SEXES[int(rng.integers(2))],
            "marital": _MARITAL[int(rng.integers(4))], "comorbidities": com}


def _vital_round(plan, t, base, rng, ev, abnormal=None, chronic=None, allow_sirs=False):
    """One registration of all six vitals (plus occasionally a consciousness score)."""
    r = _ramp(plan, t)
    vals = {}
    for name, (_, _, noise, target) in _VITAL_MODEL.items():
        v = base[name] + r * (target - base[name]) + rng.normal(0, noise)
        vals[name] = v
    if abnormal is not None:
        vals.update(abnormal)
    if chronic is not None:
        vals.update(chronic)
    for name in _SUB_SIRS:
        if allow_sirs or (chronic is not None and name in chronic) or (abnormal is not None and name in abnormal):
            continue
        vals[name] = _clip_sub_sirs(name, vals[name])
    vals["spo2"] = min(vals["spo2"], 100.0)
    ev.append(Event(t, "bp", (_r1(vals["bp_sys"]), _r1(vals["bp_dia"]))))
    for name in ("hr", "rr", "spo2", "temp"):
        ev.append(Event(t, name, (_r1(vals[name]),)))
    if rng.random() < 0.3:
        score = "A" if r < 0.5 or rng.random() < 0.7 else "V"
        if abnormal is not None and rng.random() < 0.4:
            score = "V"
        ev.append(Event(t, "obs_consciousness", score))


def _abnormal_vitals(rng) -> dict:
    vals = {"hr": rng.uniform(96, 125), "rr": rng.uniform(22, 30)}
    if rng.random() < 0.6:
        vals["temp"] = rng.uniform(38.3, 39.6)
    return vals


def _labs(plan, t, rng, ev, severity=0.0, wbc_override=None):
    r = max(_ramp(plan, t), severity)
    wbc = wbc_override if wbc_override is not None else float(np.clip(rng.normal(7.5 + 3.5 * r, 1.3), 4.1, 11.9))
    ev.append(Event(t, "lab_wbc", (_r1(wbc),)))
    # CRP follows the slower inflammatory course, which only infection produces
    crp_r = max(_inflammation(plan, t), severity)
    ev.append(Event(t, "lab_crp", (_r1(rng.lognormal(1.6, 0.6) + 140 * crp_r * rng.uniform(0.5, 1.0)),)))
    ev.append(Event(t, "lab_creatinine", (_r1(rng.normal(85 + 40 * r, 15)),)))
    ev.append(Event(t, "lab_hgb", (_r1(rng.normal(8.4, 0.8)),)))
    if rng.random() < 0.5 + 0.4 * r:
        ev.append(Event(t, "lab_lactate", (_r1(max(0.4, rng.normal(1.2 + 1.6 * r, 0.3))),)))
    if rng.random() < 0.05:
        ev.append(Event(t, "lab_paco2", (_r1(max(32.1, rng.normal(40, 3))),)))


def _background(plan, rng, ev, horizon: int) -> None:
    """Diagnoses, medications and procedures unrelated to the label."""
    dur = horizon
    diag_pool = _DIAG_BY_DEPT.get(plan.department, _DIAG_BY_DEPT["medicine"])
    ev.append(Event(int(rng.integers(0, 60)), "diag", diag_pool[int(rng.integers(len(diag_pool)))]))
    if plan.positive and rng.random() < 0.35:
        ev.append(Event(int(rng.integers(0, 120)), "diag", _INFECTION_DIAG[int(rng.integers(5))]))
    elif not plan.positive and rng.random() < 0.08:
        ev.append(Event(int(rng.integers(0, 120)), "diag", _INFECTION_DIAG[int(rng.integers(5))]))
    n_oral = int(rng.integers(0, 4))
    orals = rng.choice(len(_ORAL), size=n_oral, replace=False)
    for day in range(0, dur // DAY + 1):
        for j in orals:
            t = day * DAY + int(rng.integers(6 * HOUR, 10 * HOUR))
            if t <= dur:
                ev.append(Event(t, "med_oral", _ORAL[j]))
    for _ in range(int(rng.poisson(1 + dur / DAY))):
        ev.append(Event(int(rng.integers(0, dur + 1)), "med_iv", _IV_OTHER[int(rng.integers(len(_IV_OTHER)))]))
    for _ in range(int(rng.poisson(1 + 0.5 * dur / DAY))):
        ev.append(Event(int(rng.integers(0, dur + 1)), "proc", _PROCS[int(rng.integers(len(_PROCS)))]))
    if rng.random() < 0.15:
        ev.append(Event(int(rng.integers(0, dur + 1)), "micro", _OTHER_MICRO[int(rng.integers(3))]))


def _markers(rng, ev, lo: int, hi: int) -> None:
    """A blood culture and/or IV antibiotic somewhere in [lo, hi]."""
    if hi < lo:
        return
    what = rng.random()
    if what < 0.7:
        ev.append(Event(int(rng.integers(lo, hi + 1)), "micro", "blood_culture"))
    if what > 0.4:
        ev.append(Event(int(rng.integers(lo, hi + 1)), "med_iv", _IV_ANTIBIOTIC[int(rng.integers(6))]))


def _generate(i: int, seed_seq: np.random.SeedSequence, cfg: CohortConfig) -> Admission:
    # registration thinning has its own stream, so cohorts that differ only in
    # the vital profile describe the same patients
    main_seq, thin_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(main_seq)
    thin = np.random.default_rng(thin_seq)
    plan = _plan(i, rng, cfg)
    profile = cfg.vital_profile
    dur = plan.duration
    ev: list[Event] = []
    base = {k: rng.normal(m, sd) for k, (m, sd, _, _) in _VITAL_MODEL.items()}
    base["hr"] = min(base["hr"], 86.0)
    base["rr"] = min(base["rr"], 18.5)
    base["temp"] = float(np.clip(base["temp"], 36.3, 37.4))
    context = _context(plan, rng)
    truth = {"label": int(plan.positive), "kind": plan.kind}

    if plan.positive:
        onset = plan.onset
        truth["onset"] = onset
        # pre-onset rounds, k hours before onset, thinned by the profile
        k = 1
        while onset - k * HOUR >= 0:
            rnd = []
            _vital_round(plan, onset - k * HOUR, base, rng, rnd)
            if thin.random() < profile.keep_prob(k):
                ev.extend(rnd)
            k += 1
        _vital_round(plan, onset, base, rng, ev, abnormal=_abnormal_vitals(rng))
        for k in range(1, 7):
            t = onset + k * HOUR
            if t <= dur:
                _vital_round(plan, t, base, rng, ev, abnormal=_abnormal_vitals(rng))
        ev.append(Event(min(dur, onset + int(rng.integers(0, 61))), "micro", "blood_culture"))
        ev.append(Event(min(dur, onset + int(rng.integers(30, 181))), "med_iv",
                        _IV_ANTIBIOTIC[int(rng.integers(6))]))
        if onset + HOUR <= dur:
            _labs(plan, onset + int(rng.integers(15, 61)), rng, ev, severity=1.0,
                  wbc_override=float(rng.uniform(12.5, 20.0)) if rng.random() < 0.5 else None)
        if rng.random() < cfg.intervention_rate:
            lead = int(rng.uniform(*cfg.intervention_lead_h) * HOUR)
            t0 = onset - lead
            if t0 >= 0:
                _markers(rng, ev, t0, min(onset - 1, t0 + 2 * HOUR))
                truth["pre_onset_intervention"] = t0
        lab_horizon = onset - 1
    else:
        offset = int(rng.integers(0, HOUR))
        chronic = None
        if plan.kind == "chronic":
            which = ("hr", "rr", "temp")[int(rng.integers(3))]
            chronic_val = {"hr": rng.uniform(93, 110), "rr": rng.uniform(21, 26), "temp": rng.uniform(38.2, 38.9)}[which]
            truth["chronic"] = which
        episode = None
        if plan.kind == "sirs_no_marker" and dur > 2 * HOUR:
            start = int(rng.integers(0, max(1, dur - 2 * HOUR)))
            episode = (start, start + int(rng.integers(2, 8)) * HOUR)
        t = offset
        while t <= dur:
            if plan.kind == "chronic":
                chronic = {which: chronic_val + rng.normal(0, 1.0 if which != "temp" else 0.1)}
            in_episode = episode is not None and episode[0] <= t <= episode[1]
            rnd = []
            _vital_round(plan, t, base, rng, rnd, chronic=chronic,
                         abnormal=_abnormal_vitals(rng) if in_episode else None)
            if thin.random() < profile.keep_prob(None) or in_episode:
                ev.extend(rnd)
            t += HOUR
        if plan.kind in ("normal", "chronic", "drift") and rng.random() < cfg.negative_marker_rate:
            _markers(rng, ev, 0, dur)
        lab_horizon = dur

    # labs: admission panel, then roughly daily
    _labs(plan, int(rng.integers(0, 60)), rng, ev)
    t = int(rng.integers(18 * HOUR, 30 * HOUR))
    while t <= lab_horizon:
        _labs(plan, t, rng, ev)
        t += int(rng.integers(20 * HOUR, 28 * HOUR))
    if plan.positive:
        # prodromal work-up: repeated draws once the patient starts to look unwell
        t = plan.onset - int(rng.uniform(3, 18) * HOUR)
        while t >= 0 and t >= plan.onset - PRODROME_H * HOUR:
            if rng.random() < 0.8:
                _labs(plan, t, rng, ev)
            t -= int(rng.uniform(4, 8) * HOUR)

    _background(plan, rng, ev, dur)
    ev = [e for e in ev if 0 <= e.time <= dur]
    admit = int(rng.integers(0, 365 * DAY))
    return Admission(plan.id, plan.department, admit, admit + dur, EventSequence(ev), context,
                     plan.contact_type, f"P{i:06d}", truth)


def _generate_chunk(args):
    start, seqs, cfg = args
    return [_generate(start + j, s, cfg) for j, s in enumerate(seqs)]


def generate_cohort(config: CohortConfig, workers: int = 1) -> list[Admission]:
    """Admissions in id order; identical for any ``workers``."""
    config.validate()
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_admissions)
    if workers <= 1 or config.n_admissions < 200:
        return [_generate(i, s, config) for i, s in enumerate(seqs)]
    size = math.ceil(config.n_admissions / workers)
    chunks = [(a, seqs[a:a + size], config) for a in range(0, config.n_admissions, size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [adm for part in pool.map(_generate_chunk, chunks) for adm in part]


# -- validation -----------------------------------------------------------------

@dataclass
class ValidationReport:
    n_admissions: int
    n_eligible: int = 0
    n_positive: int = 0
    prevalence: float = math.nan
    expected_prevalence: float | None = None
    completeness: dict = field(default_factory=dict)
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def names(self) -> list[str]:
        return [n for n, _ in self.violations]

    def to_json(self) -> dict:
        return {"n_admissions": self.n_admissions, "n_eligible": self.n_eligible,
                "n_positive": self.n_positive, "prevalence": self.prevalence,
                "expected_prevalence": self.expected_prevalence,
                "completeness": {f"t-{a}h..t-{b}h": v for (a, b), v in self.completeness.items()},
                "ok": self.ok, "violations": [{"check": n, "detail": d} for n, d in self.violations]}


def band_completeness(admissions: Sequence[Admission], onsets: dict[str, int], band: tuple[float, float],
                      min_vitals: int = 2) -> tuple[float, int]:
    """Fraction of positives with >= ``min_vitals`` distinct vitals in ``[onset - a, onset - b]`` hours.

    Only admissions whose band starts at or after admission start are counted.
    """
    a, b = band
    hits = n = 0
    for adm in admissions:
        onset = onsets[adm.id]
        lo, hi = onset - a * HOUR, onset - b * HOUR
        if lo < 0:
            continue
        n += 1
        seen = set()
        for ev in adm.sequence.between(lo, hi, lo_closed=True, hi_closed=True):
            if ev.category == "bp":
                seen.update(("bp_sys", "bp_dia"))
            elif ev.category in ("hr", "rr", "spo2", "temp"):
                seen.add(ev.category)
        hits += len(seen) >= min_vitals
    return (hits / n if n else math.nan), n


def validate_cohort(admissions: Sequence[Admission], config: CohortConfig | None = None,
                    prevalence_tol: float = 0.01, completeness_tol: float = 0.05) -> ValidationReport:
    """Run the labeler and completeness measurements and list deviations.

    Statistical checks widen their tolerance to three binomial standard errors
    on small cohorts.
    """
    rep = ValidationReport(len(admissions))
    if not admissions:
        rep.violations.append(("empty_cohort", "no admissions"))
        return rep
    eligible = [a for a in admissions if a.contact_type == "inpatient" and a.duration >= 3 * HOUR]
    rep.n_eligible = len(eligible)
    onsets, bad_label, bad_onset, bad_bounds = {}, [], [], []
    for a in admissions:
        t = a.sequence.times
        if len(t) and (t[0] < 0 or t[-1] > a.duration):
            bad_bounds.append(a.id)
    for a in eligible:
        lab = label_admission(a)
        if lab.label:
            onsets[a.id] = lab.label_time
        truth = a.truth or {}
        if "label" in truth and bool(truth["label"]) != lab.label:
            bad_label.append(a.id)
        elif lab.label and "onset" in truth and truth["onset"] != lab.label_time:
            bad_onset.append(a.id)
    rep.n_positive = len(onsets)
    rep.prevalence = rep.n_positive / rep.n_eligible if rep.n_eligible else math.nan
    if bad_bounds:
        rep.violations.append(("event_bounds", f"{len(bad_bounds)} admission(s) with events outside the stay"))
    if bad_label:
        rep.violations.append(("labeler_agreement", f"{len(bad_label)} admission(s) labeled against their "
                                                    f"generated class, e.g. {bad_label[:5]}"))
    if bad_onset:
        rep.violations.append(("onset_agreement", f"{len(bad_onset)} positive(s) with a shifted onset"))
    if rep.n_eligible == 0:
        rep.violations.append(("empty_cohort", "no eligible inpatient admissions"))
        return rep
    if config is not None:
        exp = config.expected_prevalence()
        rep.expected_prevalence = exp
        tol = max(prevalence_tol, 3 * math.sqrt(exp * (1 - exp) / rep.n_eligible))
        if abs(rep.prevalence - exp) > tol:
            rep.violations.append(("prevalence", f"labeler prevalence {rep.prevalence:.4f} vs target {exp:.4f} "
                                                 f"(tol {tol:.4f})"))
    positives = [a for a in eligible if a.id in onsets]
    for band, target in COMPLETENESS_TARGETS.items():
        frac, n = band_completeness(positives, onsets, band)
        rep.completeness[band] = frac
        if config is None or config.profile != "fig4" or n == 0:
            continue
        tol = max(completeness_tol, 3 * math.sqrt(target * (1 - target) / n)) if 0 < target < 1 else completeness_tol
        if abs(frac - target) > tol:
            rep.violations.append((f"completeness[t-{band[0]}h,t-{band[1]}h]",
                                   f"{frac:.3f} vs target {target:.2f} over {n} positives (tol {tol:.3f})"))
    return rep


def vital_subset_fraction(admissions: Sequence[Admission], label_times: dict[str, int]) -> float:
    if not admissions:
        return math.nan
    return float(np.mean([has_complete_vitals(a.sequence, label_times[a.id]) for a in admissions]))


def with_profile(config: CohortConfig, profile: str) -> CohortConfig:
    return replace(config, profile=profile)
