"""Model inputs built from a clipped event sequence at a prediction time.

* :func:`gb_vital_features` - hourly vital-sign means and trends (30 values)
* :func:`mlp_features`      - aggregated events over nested look-back windows
* :func:`sequence_matrix`   - 5-minute blocks, gap-filled, with the context attached
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .cohort import HOUR, VITALS
from .events import EncodedEvents, Event, EventSequence, Vocabulary, aggregate_groups

MATRIX_SCHEMA_VERSION = 1
BLOCK_MIN = 5
MAX_ROWS = 5 * 24 * 60 // BLOCK_MIN
MLP_WINDOWS_H = (1, 2, 4, 8, 16, 32)
FEATURES_PER_VITAL = 5
LOCF_LIMIT_H = 24

# population means used before an imputer is fitted on training data
DEFAULT_VITAL_MEANS = {"bp_sys": 125.0, "bp_dia": 75.0, "hr": 78.0, "rr": 16.0,
                       "spo2": 97.0, "temp": 37.0}


def vital_feature_names() -> list[str]:
    parts = ("mean_h0", "mean_h1", "mean_h2", "trend_h0_h1", "trend_h1_h2")
    return [f"{v}:{p}" for v in VITALS for p in parts]


def _vital_channels(sequence: Iterable[Event]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    times = {v: [] for v in VITALS}
    vals = {v: [] for v in VITALS}
    for ev in sequence:
        if ev.category == "bp":
            times["bp_sys"].append(ev.time)
            vals["bp_sys"].append(ev.value[0])
            times["bp_dia"].append(ev.time)
            vals["bp_dia"].append(ev.value[1])
        elif ev.category in times:
            times[ev.category].append(ev.time)
            vals[ev.category].append(ev.value[0])
    out = {}
    for v in VITALS:
        t = np.asarray(times[v], dtype=np.int64)
        order = np.argsort(t, kind="stable")
        out[v] = (t[order], np.asarray(vals[v], dtype=float)[order])
    return out


@dataclass
class VitalImputer:
    """Population means used when neither a bucket nor a recent reading exists."""

    means: dict[str, float]

    @classmethod
    def fit(cls, sequences: Iterable[EventSequence]) -> "VitalImputer":
        sums = dict.fromkeys(VITALS, 0.0)
        counts = dict.fromkeys(VITALS, 0)
        for seq in sequences:
            for v, (_, vals) in _vital_channels(seq).items():
                sums[v] += float(vals.sum())
                counts[v] += len(vals)
        return cls({v: sums[v] / counts[v] if counts[v] else DEFAULT_VITAL_MEANS[v] for v in VITALS})

    @classmethod
    def default(cls) -> "VitalImputer":
        return cls(dict(DEFAULT_VITAL_MEANS))


@dataclass
class VitalFeatureVector:
    values: np.ndarray   # (30,)
    missing: np.ndarray  # (30,) 1 where a value or a trend relies on imputation

    def as_model_input(self) -> np.ndarray:
        return np.concatenate([self.values, self.missing])


def vital_feature_matrix(sequence: Sequence[Event], times: Sequence[int],
                         imputer: VitalImputer | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vital features for many prediction times at once: ``(values, missing)``, each (n, 30).

    Hour buckets are ``(p-1h, p]``, ``(p-2h, p-1h]``, ``(p-3h, p-2h]``.  An empty
    bucket takes the last reading within 24 h before its end, else the
    imputer's population mean; trends touching such a value are 0.
    """
    imputer = imputer or VitalImputer.default()
    p = np.asarray(times, dtype=np.int64)
    n = len(p)
    values = np.zeros((n, len(VITALS) * FEATURES_PER_VITAL))
    missing = np.zeros_like(values)
    channels = _vital_channels(sequence)
    for j, vital in enumerate(VITALS):
        t, v = channels[vital]
        csum = np.concatenate([[0.0], np.cumsum(v)])
        means = np.empty((n, 3))
        imputed = np.zeros((n, 3), dtype=bool)
        for k in range(3):
            hi = p - k * HOUR
            lo = hi - HOUR
            i0 = np.searchsorted(t, lo, side="right")
            i1 = np.searchsorted(t, hi, side="right")
            cnt = i1 - i0
            with np.errstate(invalid="ignore", divide="ignore"):
                m = (csum[i1] - csum[i0]) / cnt
            empty = cnt == 0
            last = i1 - 1
            has_recent = empty & (last >= 0)
            if has_recent.any():
                lt = np.where(last >= 0, t[np.maximum(last, 0)], np.iinfo(np.int64).min)
                has_recent &= lt > hi - LOCF_LIMIT_H * HOUR
            m = np.where(has_recent, v[np.maximum(last, 0)] if len(v) else 0.0, m)
            m = np.where(empty & ~has_recent, imputer.means[vital], m)
            means[:, k] = m
            imputed[:, k] = empty
        base = j * FEATURES_PER_VITAL
        values[:, base:base + 3] = means
        trend01 = ~(imputed[:, 0] | imputed[:, 1])
        trend12 = ~(imputed[:, 1] | imputed[:, 2])
        values[:, base + 3] = np.where(trend01, means[:, 0] - means[:, 1], 0.0)
        values[:, base + 4] = np.where(trend12, means[:, 1] - means[:, 2], 0.0)
        missing[:, base:base + 3] = imputed
        missing[:, base + 3] = ~trend01
        missing[:, base + 4] = ~trend12
    return values, missing


def gb_vital_features(sequence: Sequence[Event], prediction_time: int,
                      imputer: VitalImputer | None = None) -> VitalFeatureVector:
    if prediction_time < 0:
        raise ValueError("prediction_time must be >= 0")
    values, missing = vital_feature_matrix(sequence, [prediction_time], imputer)
    return VitalFeatureVector(values[0], missing[0])


# -- MLP windows -------------------------------------------------------------

def mlp_feature_size(vocab: Vocabulary, context_size: int, windows=MLP_WINDOWS_H) -> int:
    return len(windows) * vocab.agg_size + context_size


def mlp_feature_matrix(enc: EncodedEvents, context: np.ndarray, times: Sequence[int],
                       vocab: Vocabulary, windows=MLP_WINDOWS_H) -> np.ndarray:
    """One row per prediction time: per-window aggregates (1 h first) then the context."""
    times = list(times)
    out = np.zeros((len(times), mlp_feature_size(vocab, len(context), windows)))
    k = vocab.agg_size
    for i, p in enumerate(times):
        for w_i, w in enumerate(windows):
            inside = (enc.times > p - w * HOUR) & (enc.times <= p)
            if not inside.any():
                continue
            group = np.where(inside, 0, -1)
            out[i, w_i * k:(w_i + 1) * k] = aggregate_groups(enc, group, 1, vocab)[0]
        out[i, len(windows) * k:] = context
    return out


def mlp_features(sequence: Sequence[Event], context: np.ndarray, prediction_time: int,
                 vocab: Vocabulary, windows=MLP_WINDOWS_H) -> np.ndarray:
    enc = EncodedEvents.encode(list(sequence), vocab)
    return mlp_feature_matrix(enc, context, [prediction_time], vocab, windows)[0]


# -- CNN-LSTM sequence matrix ------------------------------------------------

def block_of(t) -> np.ndarray:
    return np.floor_divide(t, BLOCK_MIN)


@dataclass
class SequenceMatrix:
    """Sparse N x (K + C) matrix of 5-minute blocks.

    Only the event part (columns ``< K``) is stored as coordinates; every row
    carries the same context vector in columns ``K..K+C``.  Row ``i`` covers
    minutes ``[5 * (start_block + i), 5 * (start_block + i + 1))``.
    """

    n_rows: int
    n_event_cols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    context: np.ndarray
    start_block: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_event_cols + len(self.context)

    @property
    def n_context(self) -> int:
        return len(self.context)

    def event_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_event_cols))

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        out[:, self.n_event_cols:] = self.context
        return out

    def coo(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Full coordinate list including the repeated context columns."""
        nz = np.flatnonzero(self.context)
        r = np.repeat(np.arange(self.n_rows), len(nz))
        c = np.tile(nz + self.n_event_cols, self.n_rows)
        v = np.tile(self.context[nz], self.n_rows)
        rows = np.concatenate([self.rows, r])
        cols = np.concatenate([self.cols, c])
        vals = np.concatenate([self.vals, v])
        order = np.lexsort((cols, rows))
        return rows[order], cols[order], vals[order]

    @classmethod
    def from_coo(cls, n_rows: int, k: int, c: int, rows, cols, vals, start_block: int = 0) -> "SequenceMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        ev = cols < k
        context = np.zeros(c)
        first = (~ev) & (rows == 0)
        context[cols[first] - k] = vals[first]
        return cls(n_rows, k, rows[ev], cols[ev], vals[ev], context, start_block)

    def head(self, n: int) -> "SequenceMatrix":
        """The first ``n`` rows (the sequence as seen ``n_rows - n`` blocks earlier)."""
        n = max(1, min(n, self.n_rows))
        keep = self.rows < n
        return SequenceMatrix(n, self.n_event_cols, self.rows[keep], self.cols[keep], self.vals[keep],
                              self.context, self.start_block)

    def header(self) -> dict:
        return {"N": self.n_rows, "K": self.n_event_cols, "C": self.n_context,
                "schema_version": MATRIX_SCHEMA_VERSION, "start_block": self.start_block}

    def equals(self, other: "SequenceMatrix") -> bool:
        return (self.shape == other.shape and self.start_block == other.start_block
                and np.array_equal(self.dense(), other.dense()))


def sequence_matrix(sequence: Sequence[Event], context: np.ndarray, vocab: Vocabulary,
                    prediction_time: int, max_rows: int | None = MAX_ROWS,
                    encoded: EncodedEvents | None = None) -> SequenceMatrix:
    """Group events up to ``prediction_time`` into gap-filled 5-minute rows.

    Rows run from the block of the first event to the block holding the
    prediction time, so elapsed time without registrations shows up as
    empty rows.  With no events the matrix is a single empty row.
    """
    enc = encoded if encoded is not None else EncodedEvents.encode(list(sequence), vocab)
    end_block = int(block_of(prediction_time))
    upto = enc.times <= prediction_time
    if not upto.any():
        return SequenceMatrix(1, vocab.agg_size, np.zeros(0, np.int64), np.zeros(0, np.int64),
                              np.zeros(0), np.asarray(context, float), end_block)
    start_block = int(block_of(enc.times[upto].min()))
    if max_rows is not None:
        start_block = max(start_block, end_block - max_rows + 1)
    keep = upto & (block_of(enc.times) >= start_block)
    if not keep.any():
        return SequenceMatrix(1, vocab.agg_size, np.zeros(0, np.int64), np.zeros(0, np.int64),
                              np.zeros(0), np.asarray(context, float), end_block)
    sub = enc.select(keep)
    start_block = int(block_of(sub.times.min()))
    n = end_block - start_block + 1
    dense = aggregate_groups(sub, block_of(sub.times) - start_block, n, vocab)
    r, c = np.nonzero(dense)
    return SequenceMatrix(n, vocab.agg_size, r.astype(np.int64), c.astype(np.int64), dense[r, c],
                          np.asarray(context, float), start_block)


# -- serialization -----------------------------------------------------------

_MAGIC = b"EHRSM01\n"


def write_matrices_binary(path, matrices: dict[str, SequenceMatrix]) -> None:
    """Canonical store: magic, then per matrix a JSON header and raw COO arrays."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for key in matrices:
            m = matrices[key]
            rows, cols, vals = m.coo()
            head = dict(m.header(), id=key, nnz=len(vals))
            hb = json.dumps(head, sort_keys=True).encode()
            fh.write(struct.pack("<I", len(hb)))
            fh.write(hb)
            fh.write(rows.astype("<i4").tobytes())
            fh.write(cols.astype("<i4").tobytes())
            fh.write(vals.astype("<f8").tobytes())


def read_matrices_binary(path) -> dict[str, SequenceMatrix]:
    out = {}
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a sequence-matrix store")
    buf = io.BytesIO(data[len(_MAGIC):])
    while True:
        raw = buf.read(4)
        if not raw:
            break
        (hl,) = struct.unpack("<I", raw)
        head = json.loads(buf.read(hl))
        _check_version(head)
        nnz = head["nnz"]
        rows = np.frombuffer(buf.read(4 * nnz), dtype="<i4")
        cols = np.frombuffer(buf.read(4 * nnz), dtype="<i4")
        vals = np.frombuffer(buf.read(8 * nnz), dtype="<f8")
        out[head["id"]] = SequenceMatrix.from_coo(head["N"], head["K"], head["C"], rows, cols, vals,
                                                  head.get("start_block", 0))
    return out


def write_matrices_jsonl(path, matrices: dict[str, SequenceMatrix]) -> None:
    with open(path, "w") as fh:
        for key in matrices:
            m = matrices[key]
            rows, cols, vals = m.coo()
            rec = {"header": dict(m.header(), id=key),
                   "coo": [[int(r), int(c), float(v)] for r, c, v in zip(rows, cols, vals)]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_matrices_jsonl(path) -> dict[str, SequenceMatrix]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            head = rec["header"]
            _check_version(head)
            coo = np.asarray(rec["coo"], dtype=float).reshape(-1, 3)
            out[head["id"]] = SequenceMatrix.from_coo(
                head["N"], head["K"], head["C"], coo[:, 0].astype(np.int64), coo[:, 1].astype(np.int64),
                coo[:, 2], head.get("start_block", 0))
    return out


def _check_version(head: dict) -> None:
    if head.get("schema_version") != MATRIX_SCHEMA_VERSION:
        raise ValueError(f"sequence matrix schema_version {head.get('schema_version')!r} "
                         f"!= {MATRIX_SCHEMA_VERSION}")
