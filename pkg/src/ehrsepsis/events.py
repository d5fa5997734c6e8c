"""Event data model, vocabulary and sparse vectorization of EHR events.

An admission is a time-ordered list of events.  Each event has a category
(e.g. blood pressure, a lab test, a medication code) and a value.  Events are
turned into sparse vectors in two steps: every (category, slot-or-code) pair
gets a column in a :class:`Vocabulary`, then the column values are set by kind:

* numeric      -> standard-normalized value per measurement slot
* categorical  -> one-hot
* hierarchical -> multi-hot, one entry per present level of the code hierarchy

Time is integer minutes since admission start.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

VOCAB_SCHEMA_VERSION = 1

NUMERIC = "numeric"
CATEGORICAL = "categorical"
HIERARCHICAL = "hierarchical"
KINDS = (NUMERIC, CATEGORICAL, HIERARCHICAL)


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class EventCategory:
    """A kind of EHR registration.

    ``levels`` holds the code prefix lengths that make up the hierarchy of a
    hierarchical category (ICD-10: ``(1, 3, 5)`` gives ``A``, ``A41``, ``A41.9``).
    """

    id: str
    kind: str
    arity: int = 1
    levels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown category kind {self.kind!r}")
        if self.kind == NUMERIC and self.arity < 1:
            raise ValueError(f"numeric category {self.id} needs arity >= 1")
        if self.kind == HIERARCHICAL and len(self.levels) < 1:
            raise ValueError(f"hierarchical category {self.id} needs >= 1 level")

    def hierarchy(self, code: str) -> list[str]:
        """Distinct prefixes of ``code`` at each declared level."""
        out = []
        for n in self.levels:
            if n > len(code):
                break
            prefix = code[:n]
            if prefix not in out:
                out.append(prefix)
        if code not in out and (not self.levels or len(code) > self.levels[-1]):
            out.append(code)
        return out


@dataclass(frozen=True)
class Event:
    time: int
    category: str
    value: tuple[float, ...] | str

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"event time must be >= 0, got {self.time}")

    def to_json(self) -> dict:
        val = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"t_min": self.time, "cat": self.category, "val": val}

    @classmethod
    def from_json(cls, obj: dict) -> "Event":
        val = obj["val"]
        if isinstance(val, (list, tuple)):
            val = tuple(float(v) for v in val)
        elif isinstance(val, (int, float)):
            val = (float(val),)
        return cls(int(obj["t_min"]), obj["cat"], val)


class EventSequence(Sequence[Event]):
    """Events sorted by time; ties keep their insertion order."""

    def __init__(self, events: Iterable[Event] = ()):
        self._events = sorted(events, key=lambda e: e.time)  # sorted() is stable
        self._times = np.fromiter((e.time for e in self._events), dtype=np.int64,
                                  count=len(self._events))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventSequence(self._events[i])
        return self._events[i]

    def __len__(self):
        return len(self._events)

    def __eq__(self, other):
        return isinstance(other, EventSequence) and self._events == other._events

    def __repr__(self):
        return f"EventSequence({len(self)} events)"

    @property
    def times(self) -> np.ndarray:
        return self._times

    def between(self, lo: float, hi: float, *, lo_closed=False, hi_closed=True) -> "EventSequence":
        """Events with time in the interval ``(lo, hi]`` (closedness configurable)."""
        t = self._times
        a = np.searchsorted(t, lo, side="left" if lo_closed else "right")
        b = np.searchsorted(t, hi, side="right" if hi_closed else "left")
        return EventSequence(self._events[a:b])

    def with_event(self, event: Event) -> "EventSequence":
        return EventSequence([*self._events, event])

    def of_category(self, *cats: str) -> list[Event]:
        return [e for e in self._events if e.category in cats]


# -- default catalog ---------------------------------------------------------

ICD10_LEVELS = (1, 3, 5)
ATC_LEVELS = (1, 3, 4, 5, 7)


def default_catalog() -> dict[str, EventCategory]:
    cats = [
        EventCategory("bp", NUMERIC, arity=2),
        EventCategory("hr", NUMERIC),
        EventCategory("rr", NUMERIC),
        EventCategory("spo2", NUMERIC),
        EventCategory("temp", NUMERIC),
        EventCategory("lab_wbc", NUMERIC),
        EventCategory("lab_crp", NUMERIC),
        EventCategory("lab_lactate", NUMERIC),
        EventCategory("lab_creatinine", NUMERIC),
        EventCategory("lab_hgb", NUMERIC),
        EventCategory("lab_paco2", NUMERIC),
        EventCategory("micro", CATEGORICAL),
        EventCategory("proc", CATEGORICAL),
        EventCategory("obs_consciousness", CATEGORICAL),
        EventCategory("med_iv", HIERARCHICAL, levels=ATC_LEVELS),
        EventCategory("med_oral", HIERARCHICAL, levels=ATC_LEVELS),
        EventCategory("diag", HIERARCHICAL, levels=ICD10_LEVELS),
    ]
    return {c.id: c for c in cats}


def infer_category(event: Event) -> EventCategory:
    if isinstance(event.value, tuple):
        return EventCategory(event.category, NUMERIC, arity=len(event.value))
    return EventCategory(event.category, CATEGORICAL)


# -- vocabulary --------------------------------------------------------------

EntryKey = tuple[str, str]


@dataclass
class Vocabulary:
    """Column assignment for retained (category, slot-or-code) entries.

    ``mean``/``std`` are only meaningful for numeric entries.  The aggregated
    layout used by interval aggregation puts one count column per categorical
    or hierarchical entry, a (min, max, mean) triple per numeric entry, and a
    trailing "interval non-empty" flag.
    """

    entries: dict[EntryKey, int]
    kinds: list[str]
    support: list[int]
    mean: np.ndarray
    std: np.ndarray
    catalog: dict[str, EventCategory] = field(repr=False)
    min_support: int = 1

    def __post_init__(self):
        self._agg_offsets = np.zeros(len(self.entries), dtype=np.int64)
        off = 0
        for i, kind in enumerate(self.kinds):
            self._agg_offsets[i] = off
            off += 3 if kind == NUMERIC else 1
        self._agg_size = off + 1
        self.keys = sorted(self.entries, key=self.entries.get)

    def __len__(self):
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def agg_size(self) -> int:
        return self._agg_size

    @property
    def agg_offsets(self) -> np.ndarray:
        return self._agg_offsets

    def category(self, cat_id: str) -> EventCategory | None:
        return self.catalog.get(cat_id)

    def index(self, cat_id: str, key: str) -> int | None:
        return self.entries.get((cat_id, key))

    def to_json(self) -> dict:
        return {
            "schema_version": VOCAB_SCHEMA_VERSION,
            "min_support": self.min_support,
            "categories": [
                {"id": c.id, "kind": c.kind, "arity": c.arity, "levels": list(c.levels)}
                for c in sorted(self.catalog.values(), key=lambda c: c.id)
            ],
            "entries": [
                {"cat": k[0], "key": k[1], "index": self.entries[k], "kind": self.kinds[self.entries[k]],
                 "support": self.support[self.entries[k]],
                 "mean": float(self.mean[self.entries[k]]), "std": float(self.std[self.entries[k]])}
                for k in self.keys
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        version = doc.get("schema_version")
        if version != VOCAB_SCHEMA_VERSION:
            raise VocabularyError(f"vocabulary schema_version {version!r} != {VOCAB_SCHEMA_VERSION}")
        catalog = {c["id"]: EventCategory(c["id"], c["kind"], c["arity"], tuple(c["levels"]))
                   for c in doc["categories"]}
        rows = sorted(doc["entries"], key=lambda r: r["index"])
        return cls(
            entries={(r["cat"], r["key"]): r["index"] for r in rows},
            kinds=[r["kind"] for r in rows],
            support=[r["support"] for r in rows],
            mean=np.array([r["mean"] for r in rows], dtype=float),
            std=np.array([r["std"] for r in rows], dtype=float),
            catalog=catalog,
            min_support=doc.get("min_support", 1),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _raw_entries(event: Event, cat: EventCategory) -> list[tuple[str, float]]:
    """(key, raw value) pairs of an event before vocabulary lookup."""
    if cat.kind == NUMERIC:
        if not isinstance(event.value, tuple) or len(event.value) != cat.arity:
            raise ValueError(
                f"{cat.id}: expected {cat.arity} numeric value(s), got {event.value!r}")
        return [(str(i), float(v)) for i, v in enumerate(event.value)]
    if not isinstance(event.value, str):
        raise ValueError(f"{cat.id}: expected a code string, got {event.value!r}")
    if cat.kind == CATEGORICAL:
        return [(event.value, 1.0)]
    return [(p, 1.0) for p in cat.hierarchy(event.value)]


def build_vocabulary(train_sequences: Sequence[EventSequence], min_support: int = 100,
                     catalog: dict[str, EventCategory] | None = None) -> Vocabulary:
    """Keep entries seen in at least ``min_support`` distinct training sequences.

    The numeric normalizer (population mean/std) is fitted on training values of
    the retained entries only.
    """
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    if len(train_sequences) == 0:
        raise VocabularyError("empty training corpus")
    catalog = dict(catalog) if catalog is not None else default_catalog()

    support: dict[EntryKey, int] = defaultdict(int)
    values: dict[EntryKey, list[float]] = defaultdict(list)
    for seq in train_sequences:
        seen = set()
        for ev in seq:
            cat = catalog.get(ev.category)
            if cat is None:
                cat = catalog[ev.category] = infer_category(ev)
            for key, val in _raw_entries(ev, cat):
                k = (ev.category, key)
                seen.add(k)
                if cat.kind == NUMERIC:
                    values[k].append(val)
        for k in seen:
            support[k] += 1

    kept = sorted(k for k, n in support.items() if n >= min_support)
    entries = {k: i for i, k in enumerate(kept)}
    kinds = [catalog[k[0]].kind for k in kept]
    mean = np.zeros(len(kept))
    std = np.zeros(len(kept))
    for i, k in enumerate(kept):
        if kinds[i] == NUMERIC:
            v = np.asarray(values[k])
            mean[i] = v.mean()
            std[i] = v.std()
    return Vocabulary(entries, kinds, [support[k] for k in kept], mean, std, catalog, min_support)


# -- vectorization -----------------------------------------------------------

@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    size: int

    def dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        np.add.at(out, self.indices, self.values)
        return out

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))


def _normalize(vocab: Vocabulary, idx: int, raw: float) -> float:
    sd = vocab.std[idx]
    if sd == 0:
        return 0.0
    return (raw - vocab.mean[idx]) / sd


def event_entries(event: Event, vocab: Vocabulary) -> list[tuple[int, float]]:
    """(column, value) pairs of an event; out-of-vocabulary entries are dropped."""
    cat = vocab.catalog.get(event.category)
    if cat is None:
        return []
    out = []
    for key, raw in _raw_entries(event, cat):
        idx = vocab.entries.get((event.category, key))
        if idx is None:
            continue
        out.append((idx, _normalize(vocab, idx, raw) if cat.kind == NUMERIC else raw))
    return out


def vectorize_event(event: Event, vocab: Vocabulary) -> SparseVector:
    pairs = event_entries(event, vocab)
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    val = np.array([p[1] for p in pairs], dtype=float)
    return SparseVector(idx, val, vocab.size)


@dataclass(frozen=True)
class EncodedEvents:
    """Flat (event position, column, value) triples for a list of events."""

    times: np.ndarray
    event_pos: np.ndarray
    column: np.ndarray
    value: np.ndarray

    @classmethod
    def encode(cls, events: Sequence[Event], vocab: Vocabulary) -> "EncodedEvents":
        pos, col, val = [], [], []
        for i, ev in enumerate(events):
            for c, v in event_entries(ev, vocab):
                pos.append(i)
                col.append(c)
                val.append(v)
        return cls(np.fromiter((e.time for e in events), dtype=np.int64, count=len(events)),
                   np.asarray(pos, dtype=np.int64), np.asarray(col, dtype=np.int64),
                   np.asarray(val, dtype=float))

    def select(self, mask_events: np.ndarray) -> "EncodedEvents":
        keep = mask_events[self.event_pos]
        remap = np.cumsum(mask_events) - 1
        return EncodedEvents(self.times[mask_events], remap[self.event_pos[keep]],
                             self.column[keep], self.value[keep])


def aggregate_groups(enc: EncodedEvents, group: np.ndarray, n_groups: int,
                     vocab: Vocabulary) -> np.ndarray:
    """Aggregate encoded events into ``n_groups`` rows of the aggregated layout.

    ``group[i]`` is the row of event ``i`` (or -1 to ignore it).  Count entries
    sum occurrences, numeric entries get (min, max, mean) of normalized values,
    and the last column flags rows holding at least one event.
    """
    out = np.zeros((n_groups, vocab.agg_size))
    if n_groups == 0:
        return out
    ev_group = group[enc.event_pos] if len(enc.event_pos) else np.zeros(0, dtype=np.int64)
    valid = ev_group >= 0
    g = ev_group[valid]
    col = enc.column[valid]
    val = enc.value[valid]
    kinds_num = np.array([k == NUMERIC for k in vocab.kinds], dtype=bool)
    base = vocab.agg_offsets[col]

    cnt = ~kinds_num[col] if len(col) else np.zeros(0, dtype=bool)
    np.add.at(out, (g[cnt], base[cnt]), val[cnt])

    num = ~cnt
    if num.any():
        gn, bn, vn = g[num], base[num], val[num]
        key = gn * vocab.agg_size + bn
        uniq, inv = np.unique(key, return_inverse=True)
        mins = np.full(len(uniq), np.inf)
        maxs = np.full(len(uniq), -np.inf)
        np.minimum.at(mins, inv, vn)
        np.maximum.at(maxs, inv, vn)
        sums = np.bincount(inv, weights=vn, minlength=len(uniq))
        counts = np.bincount(inv, minlength=len(uniq))
        rows, cols = np.divmod(uniq, vocab.agg_size)
        out[rows, cols] = mins
        out[rows, cols + 1] = maxs
        out[rows, cols + 2] = sums / counts

    present = group[group >= 0]
    out[present, -1] = 1.0
    return out


def aggregate_interval(events: Sequence[Event], vocab: Vocabulary) -> np.ndarray:
    """Aggregate all given events (assumed to share one interval) into one vector."""
    enc = EncodedEvents.encode(events, vocab)
    return aggregate_groups(enc, np.zeros(len(events), dtype=np.int64), 1, vocab)[0]


# -- context -----------------------------------------------------------------

DEFAULT_COMORBIDITIES: dict[str, tuple[str, ...]] = {
    "diabetes": ("E10", "E11", "E12", "E13", "E14"),
    "hypertension": ("I10", "I11", "I12", "I13", "I15"),
    "heart_failure": ("I50",),
    "ischemic_heart": ("I20", "I21", "I22", "I23", "I24", "I25"),
    "atrial_fibrillation": ("I48",),
    "cerebrovascular": ("I6",),
    "copd": ("J44",),
    "asthma": ("J45",),
    "chronic_kidney": ("N18",),
    "liver": ("K70", "K71", "K72", "K73", "K74", "K75", "K76", "K77"),
    "cancer": ("C",),
    "hematologic_malignancy": tuple(f"C{n}" for n in range(81, 97)),
    "hiv": ("B20", "B21", "B22", "B23", "B24"),
    "dementia": ("F00", "F01", "F02", "F03", "G30"),
    "rheumatoid": ("M05", "M06"),
    "obesity": ("E66",),
    "alcohol": ("F10",),
    "immunodeficiency": ("D80", "D81", "D82", "D83", "D84"),
    "peripheral_vascular": ("I70", "I71", "I72", "I73"),
}


@dataclass(frozen=True)
class ContextSchema:
    age_mean: float = 60.0
    age_std: float = 18.0
    sexes: tuple[str, ...] = ("male", "female")
    marital: tuple[str, ...] = ("married", "single", "divorced", "widowed")
    comorbidities: tuple[tuple[str, tuple[str, ...]], ...] = tuple(DEFAULT_COMORBIDITIES.items())

    @property
    def size(self) -> int:
        return 1 + len(self.sexes) + len(self.marital) + len(self.comorbidities)

    def names(self) -> list[str]:
        return (["age"] + [f"sex={s}" for s in self.sexes] + [f"marital={m}" for m in self.marital]
                + [f"comorb={n}" for n, _ in self.comorbidities])


def vectorize_context(meta: dict, schema: ContextSchema = ContextSchema()) -> np.ndarray:
    age = meta.get("age")
    if age is None or (isinstance(age, float) and math.isnan(age)):
        raise ValueError("context is missing mandatory field 'age'")
    out = np.zeros(schema.size)
    out[0] = (float(age) - schema.age_mean) / schema.age_std
    off = 1
    if meta.get("sex") in schema.sexes:
        out[off + schema.sexes.index(meta["sex"])] = 1.0
    off += len(schema.sexes)
    if meta.get("marital") in schema.marital:
        out[off + schema.marital.index(meta["marital"])] = 1.0
    off += len(schema.marital)
    for code in set(meta.get("comorbidities", ())):
        for j, (_, prefixes) in enumerate(schema.comorbidities):
            if code.startswith(prefixes):
                out[off + j] = 1.0
    return out
