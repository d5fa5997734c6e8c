"""Cohort construction: inclusion filtering, SIRS labeling, windows and splits."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import Event, EventSequence

log = logging.getLogger(__name__)

MIN = 1
HOUR = 60 * MIN
DAY = 24 * HOUR

VITALS = ("bp_sys", "bp_dia", "hr", "rr", "spo2", "temp")
BLOOD_CULTURE = "blood_culture"
ANTIBIOTIC_ATC = ("J01", "J02")


@dataclass
class Admission:
    id: str
    department: str
    admit: int
    discharge: int
    sequence: EventSequence
    context: dict
    contact_type: str = "inpatient"
    patient_id: str | None = None
    truth: dict | None = None

    def __post_init__(self):
        if self.discharge <= self.admit:
            raise ValueError(f"{self.id}: discharge must be after admit")

    @property
    def duration(self) -> int:
        return self.discharge - self.admit

    def to_json(self) -> dict:
        doc = {
            "admission_id": self.id,
            "patient_id": self.patient_id,
            "department": self.department,
            "contact_type": self.contact_type,
            "admit_time": self.admit,
            "discharge_time": self.discharge,
            "context": self.context,
            "events": [e.to_json() for e in self.sequence],
        }
        if self.truth is not None:
            doc["truth"] = self.truth
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Admission":
        return cls(
            id=str(doc["admission_id"]),
            department=doc["department"],
            admit=int(doc["admit_time"]),
            discharge=int(doc["discharge_time"]),
            sequence=EventSequence(Event.from_json(e) for e in doc["events"]),
            context=doc.get("context", {}),
            contact_type=doc.get("contact_type", "inpatient"),
            patient_id=doc.get("patient_id"),
            truth=doc.get("truth"),
        )


class SchemaError(ValueError):
    """An input file was written by an incompatible version."""


COHORT_FORMAT = "ehrsepsis-admissions"
COHORT_SCHEMA_VERSION = 1


def write_jsonl(path, admissions: Iterable[Admission]) -> None:
    """One header line, then one admission per line."""
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps({"format": COHORT_FORMAT, "schema_version": COHORT_SCHEMA_VERSION}))
        fh.write("\n")
        for adm in admissions:
            fh.write(json.dumps(adm.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Admission]:
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty admissions file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not an admissions file") from exc
    if head.get("format") != COHORT_FORMAT:
        raise SchemaError(f"{path}: missing admissions header")
    if head.get("schema_version") != COHORT_SCHEMA_VERSION:
        raise SchemaError(f"{path}: admissions schema_version {head.get('schema_version')!r} "
                          f"!= {COHORT_SCHEMA_VERSION}")
    return [Admission.from_json(json.loads(line)) for line in lines[1:]]


@dataclass(frozen=True)
class LabelRecord:
    label: bool
    label_time: int | None = None
    onset_criteria: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {"label": int(self.label), "label_time": self.label_time,
                "onset_criteria": sorted(self.onset_criteria)}

    @classmethod
    def from_json(cls, doc: dict) -> "LabelRecord":
        return cls(bool(doc["label"]), doc["label_time"], frozenset(doc.get("onset_criteria", ())))


# -- SIRS labeling -----------------------------------------------------------

def _sirs_hits(ev: Event) -> str | None:
    """SIRS criterion fulfilled by a single measurement, if any."""
    if not isinstance(ev.value, tuple):
        return None
    v = ev.value[0]
    if ev.category == "hr":
        return "HR" if v > 90 else None
    if ev.category == "temp":
        return "TEMP" if v > 38 or v < 36 else None
    if ev.category == "rr":
        return "RR_or_PaCO2" if v > 20 else None
    if ev.category == "lab_paco2":
        return "RR_or_PaCO2" if v < 32 else None
    if ev.category == "lab_wbc":
        return "WBC" if v > 12 or v < 4 else None
    return None


def sirs_flags(sequence: EventSequence, at: int, window_h: float = 6) -> frozenset[str]:
    """SIRS criteria met by any measurement in ``(at - window_h, at]``."""
    if window_h <= 0:
        raise ValueError("window_h must be > 0")
    flags = set()
    for ev in sequence.between(at - window_h * HOUR, at):
        hit = _sirs_hits(ev)
        if hit:
            flags.add(hit)
    return frozenset(flags)


def is_infection_marker(ev: Event) -> bool:
    if ev.category == "micro":
        return ev.value == BLOOD_CULTURE
    if ev.category == "med_iv":
        return isinstance(ev.value, str) and ev.value.startswith(ANTIBIOTIC_ATC)
    return False


def is_antibiotic(ev: Event) -> bool:
    return ev.category == "med_iv" and isinstance(ev.value, str) and ev.value.startswith(ANTIBIOTIC_ATC)


def is_blood_culture(ev: Event) -> bool:
    return ev.category == "micro" and ev.value == BLOOD_CULTURE


def label_admission(admission: Admission, sirs_window_h: float = 6,
                    suspicion_lookaround_h: float = 24) -> LabelRecord:
    """Positive iff >= 2 SIRS criteria co-occur with a suspicion-of-infection marker.

    Suspicion is a blood-culture order or an IV J01/J02 antibiotic within
    +-``suspicion_lookaround_h`` of the SIRS time.  The label time is the
    earliest qualifying time.
    """
    seq = admission.sequence
    if len(seq) == 0:
        return LabelRecord(False)
    markers = np.array([e.time for e in seq if is_infection_marker(e)], dtype=np.int64)
    if len(markers) == 0:
        return LabelRecord(False)
    sirs_times = [e.time for e in seq if _sirs_hits(e)]
    if not sirs_times:
        return LabelRecord(False)
    look = suspicion_lookaround_h * HOUR
    # >= 2 flags holds on intervals opening at measurement times; the suspicion
    # window opens at marker - look, so earliest qualifying time is one of these.
    candidates = set(sirs_times)
    candidates.update(int(max(0, m - look)) for m in markers)
    for t in sorted(candidates):
        flags = sirs_flags(seq, t, sirs_window_h)
        if len(flags) < 2:
            continue
        if np.any(np.abs(markers - t) <= look):
            return LabelRecord(True, int(t), flags)
    return LabelRecord(False)


def choose_label_time(admission: Admission, label: LabelRecord,
                      rng: np.random.Generator, margin_h: float = 3) -> int:
    """Onset for positives, a uniform in-stay time away from both ends for negatives."""
    if label.label:
        return int(label.label_time)
    margin = int(margin_h * HOUR)
    stay = admission.duration
    if stay <= 2 * margin:
        raise ValueError(f"{admission.id}: stay of {stay} min too short for a negative label time")
    return int(rng.integers(margin, stay - margin, endpoint=True))


def clip_window(sequence: EventSequence, label_time: int, max_days: float = 5) -> EventSequence:
    lo = max(0, label_time - max_days * DAY)
    return sequence.between(lo, label_time, lo_closed=True, hi_closed=True)


# -- inclusion ---------------------------------------------------------------

@dataclass
class FlowReport:
    initial: int
    steps: list[tuple[str, int, int]] = field(default_factory=list)

    def add(self, step: str, removed: int, remaining: int) -> None:
        self.steps.append((step, removed, remaining))

    @property
    def final(self) -> int:
        return self.steps[-1][2] if self.steps else self.initial

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "removed", "remaining"])
            w.writerow(["input", 0, self.initial])
            for row in self.steps:
                w.writerow(row)


def apply_inclusion(admissions: Sequence[Admission],
                    labels: dict[str, LabelRecord] | None = None,
                    min_duration_h: float = 3, min_dept_prevalence: float = 0.02,
                    labeler: Callable[[Admission], LabelRecord] = label_admission,
                    ) -> tuple[list[Admission], FlowReport]:
    """Drop outpatient contacts, short stays, then low-prevalence departments.

    Labels missing from ``labels`` are computed with ``labeler`` (and stored in
    the dict when one is passed).
    """
    report = FlowReport(len(admissions))
    kept = [a for a in admissions if a.contact_type == "inpatient"]
    report.add("outpatient", len(admissions) - len(kept), len(kept))

    n = len(kept)
    kept = [a for a in kept if a.duration >= min_duration_h * HOUR]
    report.add("min_duration", n - len(kept), len(kept))

    if labels is None:
        labels = {}
    for a in kept:
        if a.id not in labels:
            labels[a.id] = labeler(a)
    total = Counter(a.department for a in kept)
    pos = Counter(a.department for a in kept if labels[a.id].label)
    low = {d for d in total if pos[d] / total[d] < min_dept_prevalence}
    if low:
        log.info("excluding departments below %.1f%% prevalence: %s", 100 * min_dept_prevalence, sorted(low))
    n = len(kept)
    kept = [a for a in kept if a.department not in low]
    report.add("dept_prevalence", n - len(kept), len(kept))
    return kept, report


def has_complete_vitals(sequence: EventSequence, label_time: int, window_h: float = 3) -> bool:
    seen = set()
    for ev in sequence.between(label_time - window_h * HOUR, label_time):
        if ev.category == "bp":
            seen.update(("bp_sys", "bp_dia"))
        elif ev.category in VITALS:
            seen.add(ev.category)
    return seen.issuperset(VITALS)


def vital_sign_subset(admissions: Sequence[Admission], label_times: dict[str, int],
                      window_h: float = 3) -> list[Admission]:
    """Admissions with all six vitals registered in ``(label_time - 3h, label_time]``."""
    return [a for a in admissions if has_complete_vitals(a.sequence, label_times[a.id], window_h)]


# -- splits ------------------------------------------------------------------

class InsufficientNegatives(ValueError):
    def __init__(self, required: int, available: int):
        super().__init__(f"need {required} training negatives, only {available} available")
        self.required = required
        self.available = available


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    train_instances: list[str]
    manifest: dict

    def to_json(self) -> dict:
        return {"manifest": self.manifest, "train": self.train, "validation": self.validation,
                "test": self.test, "train_instances": self.train_instances}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSplit":
        return cls(doc["train"], doc["validation"], doc["test"], doc["train_instances"], doc["manifest"])


def _partition(ids: list[str], fractions: tuple[float, float, float], rng) -> tuple[list, list, list]:
    ids = list(ids)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    n_val = min(n_val, len(ids) - n_train)
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def make_splits(positives: Sequence[str], negatives: Sequence[str], seed: int,
                fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                oversample: int = 10, neg_ratio: int | None = 5) -> DatasetSplit:
    """80/10/10 split of each class, oversampled balanced training instances.

    Training positives are repeated ``oversample`` times; training negatives are
    drawn without replacement so that positives:negatives = 1:``neg_ratio``.
    Validation and test keep the natural prevalence.
    """
    if abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    pos = sorted(positives)
    neg = sorted(negatives)
    p_tr, p_va, p_te = _partition(pos, fractions, rng)
    n_tr, n_va, n_te = _partition(neg, fractions, rng)

    inst_pos = [i for i in p_tr for _ in range(oversample)]
    if neg_ratio is None:
        inst_neg = list(n_tr)
    else:
        required = len(inst_pos) * neg_ratio
        if required > len(n_tr):
            raise InsufficientNegatives(required, len(n_tr))
        pick = rng.choice(len(n_tr), size=required, replace=False)
        inst_neg = [n_tr[i] for i in sorted(pick)]
    instances = inst_pos + inst_neg
    instances = [instances[i] for i in rng.permutation(len(instances))]

    manifest = {"seed": seed, "fractions": list(fractions), "oversample": oversample,
                "neg_ratio": neg_ratio, "n_positives": len(pos), "n_negatives": len(neg)}
    return DatasetSplit(p_tr + n_tr, p_va + n_va, p_te + n_te, instances, manifest)
