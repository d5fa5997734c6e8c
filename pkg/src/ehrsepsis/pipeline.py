"""Pipeline stages: prepare a labeled cohort, train risk models, score sliding prediction grids.

A prepared directory holds everything downstream stages need: the included
admissions with sequences clipped to their observation window, labels, the
split, the vocabulary, the vital imputer, and one feature store per model
family.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .cohort import (HOUR, DAY, Admission, DatasetSplit, LabelRecord, apply_inclusion, choose_label_time,
                     clip_window, has_complete_vitals, is_antibiotic, is_blood_culture, label_admission,
                     make_splits, read_jsonl, write_jsonl, SchemaError)
from .events import ContextSchema, EncodedEvents, Vocabulary, aggregate_groups, build_vocabulary, vectorize_context
from .features import (BLOCK_MIN, SequenceMatrix, VitalImputer, block_of, mlp_feature_matrix,
                       read_matrices_binary, sequence_matrix, vital_feature_matrix, write_matrices_binary)
from .gbt import GbtModel, fit_gbt
from .nn.models import CnnLstm, CnnLstmSpec, Mlp, MlpSpec
from .nn.serialize import load_model, save_model
from .nn.train import ArrayDataset, SequenceDataset, TrainConfig, train

log = logging.getLogger(__name__)

PREPARED_SCHEMA_VERSION = 1
NEG_MARGIN_H = 3.0


# -- configuration -------------------------------------------------------------

def _parse_value(default, raw: str, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if name in ("neg_ratio", "early_stop_patience"):
        return None if raw.lower() in ("", "none") else int(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    if isinstance(default, dict):
        out = {}
        for part in filter(None, (p.strip() for p in raw.split(","))):
            k, v = part.split(":")
            out[k.strip()] = float(v)
        return out
    if isinstance(default, tuple):
        items = [p.strip() for p in raw.split(",") if p.strip()]
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(x) for x in p.split("x")) for p in items)
        cast = float if default and isinstance(default[0], float) else int
        return tuple(cast(p) for p in items)
    raise TypeError(f"cannot parse field {name}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, dict):
        return ", ".join(f"{k}:{x!r}" for k, x in v.items())
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join("x".join(map(str, p)) for p in v)
        return ", ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


class _Section:
    """Dataclass mixin: read and write one INI section."""

    @classmethod
    def from_section(cls, sec) -> "_Section":
        base = cls()
        kw = {}
        known = {f.name for f in fields(cls)}
        for key, raw in sec.items():
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{cls.SECTION}]")
            try:
                kw[key] = _parse_value(getattr(base, key), raw, key)
            except (ValueError, TypeError) as exc:
                raise ValueError(f"bad value for {cls.SECTION}.{key}: {raw!r}") from exc
        return replace(base, **kw)

    def to_section(self) -> dict:
        return {f.name: _format_value(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class PrepareConfig(_Section):
    SECTION = "prepare"
    seed: int = 0
    min_support: int = 100
    oversample: int = 10
    neg_ratio: int | None = 5
    fractions: tuple = (0.8, 0.1, 0.1)
    train_offset_h: float = 3.0
    max_days: float = 5.0
    min_duration_h: float = 3.0
    min_dept_prevalence: float = 0.02
    sirs_window_h: float = 6.0
    suspicion_h: float = 24.0


@dataclass(frozen=True)
class GbConfig(_Section):
    SECTION = "gb"
    n_trees: int = 1000
    max_splits: int = 6
    shrinkage: float = 0.1
    min_leaf: int = 1
    seed: int = 0


@dataclass(frozen=True)
class MlpConfig(_Section):
    SECTION = "mlp"
    hidden: tuple = (200, 200)
    dropout: float = 0.3
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 50
    early_stop_patience: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class CnnLstmConfig(_Section):
    SECTION = "cnnlstm"
    embed_dim: int = 1000
    conv_depths: tuple = ((128, 128), (64, 64), (64, 64), (64, 64), (64, 64))
    lstm_units: int = 64
    init_state_std: float = 0.1
    step_loss: str = "all"
    crop_h: tuple = (3.0, 3.0)  # hours cut from the end of each training sequence, drawn uniformly
    weight_decay: float = 0.0
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 50
    early_stop_patience: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig(_Section):
    SECTION = "evaluate"
    horizons_h: tuple = (3.0, 10.0, 24.0)
    tau: float = 0.1
    tau_by_department: dict = field(default_factory=dict)
    lookback_h: float = 72.0
    grid_start_min: int = 15
    grid_step_min: int = 5
    calibration_bins: int = 10


@dataclass(frozen=True)
class PipelineConfig:
    prepare: PrepareConfig = PrepareConfig()
    gb: GbConfig = GbConfig()
    mlp: MlpConfig = MlpConfig()
    cnnlstm: CnnLstmConfig = CnnLstmConfig()
    evaluate: EvalConfig = EvalConfig()

    SECTIONS = ("prepare", "gb", "mlp", "cnnlstm", "evaluate")

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw = {}
        for name in cls.SECTIONS:
            if cp.has_section(name):
                kw[name] = type(getattr(cls(), name)).from_section(cp[name])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def to_json(self) -> dict:
        return {name: getattr(self, name).to_section() for name in self.SECTIONS}

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same configuration with every stage seeded from ``seed``."""
        return replace(self, prepare=replace(self.prepare, seed=seed), gb=replace(self.gb, seed=seed),
                       mlp=replace(self.mlp, seed=seed), cnnlstm=replace(self.cnnlstm, seed=seed))


# -- prepare ---------------------------------------------------------------------

def _label_rng(seed: int, adm_id: str) -> np.random.Generator:
    # order-independent per-admission stream
    return np.random.default_rng([seed, zlib.crc32(adm_id.encode())])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def prepare(admissions: list[Admission], cfg: PrepareConfig, out_dir) -> dict:
    """Label, filter, clip, split and featurize; returns a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels: dict[str, LabelRecord] = {}

    def labeler(a):
        return label_admission(a, cfg.sirs_window_h, cfg.suspicion_h)

    included, flow = apply_inclusion(admissions, labels, cfg.min_duration_h, cfg.min_dept_prevalence, labeler)
    # a negative label time keeps NEG_MARGIN_H clear of both stay ends
    n = len(included)
    included = [a for a in included if labels[a.id].label or a.duration > 2 * NEG_MARGIN_H * HOUR]
    flow.add("negative_min_stay", n - len(included), len(included))
    flow.write_csv(out / "flow.csv")

    label_times, clipped = {}, []
    for a in included:
        lab = labels[a.id]
        t = choose_label_time(a, lab, _label_rng(cfg.seed, a.id), NEG_MARGIN_H)
        label_times[a.id] = t
        clipped.append(replace(a, sequence=clip_window(a.sequence, t, cfg.max_days)))
    pos = [a.id for a in included if labels[a.id].label]
    neg = [a.id for a in included if not labels[a.id].label]
    split = make_splits(pos, neg, cfg.seed, tuple(cfg.fractions), cfg.oversample, cfg.neg_ratio)
    by_id = {a.id: a for a in clipped}
    vocab = build_vocabulary([by_id[i].sequence for i in split.train], cfg.min_support)
    imputer = VitalImputer.fit(by_id[i].sequence for i in split.train)

    write_jsonl(out / "admissions.jsonl", clipped)
    _write_json(out / "labels.json", {i: dict(labels[i].to_json(), label_time=label_times[i])
                                      for i in sorted(label_times)})
    _write_json(out / "split.json", split.to_json())
    vocab.save(out / "vocab.json")
    _write_json(out / "imputer.json", imputer.means)
    subset = sorted(a.id for a in clipped if has_complete_vitals(a.sequence, label_times[a.id]))
    _write_json(out / "vital_subset.json", subset)
    _write_json(out / "prepared.json", {"schema_version": PREPARED_SCHEMA_VERSION, "config": cfg.to_section()})

    prep = PreparedData(out)
    offset = int(cfg.train_offset_h * HOUR)
    stores = {}
    for part in ("train", "validation"):
        ids = getattr(split, part)
        X = prep.gb_features(ids, offset)
        np.savez(out / f"gb_{part}.npz", X=X, y=prep.labels_of(ids), ids=np.array(ids))
        M = prep.mlp_features(ids, offset)
        np.savez(out / f"mlp_{part}.npz", X=M, y=prep.labels_of(ids), ids=np.array(ids))
        # training sequences end at the label time and are cropped while training
        mats = {i: prep.matrix(i, 0 if part == "train" else offset) for i in ids}
        write_matrices_binary(out / f"cnnlstm_{part}.ehrsm", mats)
        stores[part] = len(ids)
    summary = {"n_input": len(admissions), "n_included": len(included), "n_positive": len(pos),
               "n_negative": len(neg), "n_train": len(split.train), "n_validation": len(split.validation),
               "n_test": len(split.test), "n_train_instances": len(split.train_instances),
               "vocab_size": len(vocab), "agg_size": vocab.agg_size, "vital_subset": len(subset)}
    _write_json(out / "summary.json", summary)
    return summary


class PreparedData:
    """Read-side view of a prepared directory, with per-admission caches."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "prepared.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{self.root} is not a prepared directory (missing prepared.json)")
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("schema_version") != PREPARED_SCHEMA_VERSION:
            raise SchemaError(f"prepared schema_version {meta.get('schema_version')!r} != {PREPARED_SCHEMA_VERSION}")
        self.config = PrepareConfig.from_section(meta["config"])
        self.admissions = {a.id: a for a in read_jsonl(self.root / "admissions.jsonl")}
        with open(self.root / "labels.json") as fh:
            raw = json.load(fh)
        self.labels = {k: LabelRecord.from_json(v) for k, v in raw.items()}
        self.label_times = {k: int(v["label_time"]) for k, v in raw.items()}
        with open(self.root / "split.json") as fh:
            self.split = DatasetSplit.from_json(json.load(fh))
        try:
            self.vocab = Vocabulary.load(self.root / "vocab.json")
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc
        with open(self.root / "imputer.json") as fh:
            self.imputer = VitalImputer(json.load(fh))
        self.schema = ContextSchema()
        self._ctx, self._enc = {}, {}

    def label(self, i) -> int:
        return int(self.labels[i].label)

    def labels_of(self, ids) -> np.ndarray:
        return np.array([self.label(i) for i in ids], dtype=np.int64)

    def context(self, i) -> np.ndarray:
        if i not in self._ctx:
            self._ctx[i] = vectorize_context(self.admissions[i].context, self.schema)
        return self._ctx[i]

    def encoded(self, i) -> EncodedEvents:
        if i not in self._enc:
            self._enc[i] = EncodedEvents.encode(list(self.admissions[i].sequence), self.vocab)
        return self._enc[i]

    def prediction_time(self, i, offset_min: int) -> int:
        return max(0, self.label_times[i] - offset_min)

    def gb_features(self, ids, offset_min: int) -> np.ndarray:
        rows = []
        for i in ids:
            v, m = vital_feature_matrix(self.admissions[i].sequence, [self.prediction_time(i, offset_min)],
                                        self.imputer)
            rows.append(np.concatenate([v[0], m[0]]))
        return np.array(rows).reshape(len(rows), -1)

    def mlp_features(self, ids, offset_min: int) -> np.ndarray:
        rows = [mlp_feature_matrix(self.encoded(i), self.context(i), [self.prediction_time(i, offset_min)],
                                   self.vocab)[0] for i in ids]
        return np.array(rows).reshape(len(rows), -1)

    def matrix(self, i, offset_min: int) -> SequenceMatrix:
        adm = self.admissions[i]
        return sequence_matrix(adm.sequence, self.context(i), self.vocab, self.prediction_time(i, offset_min),
                               encoded=self.encoded(i))

    def grid(self, i, cfg: EvalConfig) -> np.ndarray:
        """Prediction times every ``grid_step_min`` from admission start + 15 min (or 5 days
        before the label time) up to the label time, aligned on the label time."""
        lt = self.label_times[i]
        start = max(cfg.grid_start_min, lt - int(self.config.max_days * DAY))
        n = (lt - start) // cfg.grid_step_min if lt >= start else 0
        return lt - cfg.grid_step_min * np.arange(n, -1, -1, dtype=np.int64)

    def interventions(self, i) -> tuple[np.ndarray, np.ndarray]:
        seq = self.admissions[i].sequence
        return (np.array([e.time for e in seq if is_antibiotic(e)], float),
                np.array([e.time for e in seq if is_blood_culture(e)], float))


# -- training --------------------------------------------------------------------

def _history_csv(path, history: list[dict]) -> None:
    # wall-clock timings go to the run manifest so the CSV is reproducible
    cols = ["epoch", "train_loss", "val_loss", "val_auroc"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row.get(c, "") if not isinstance(row.get(c), float) else repr(row[c]) for c in cols])


def _instance_rows(split: DatasetSplit, ids: np.ndarray) -> np.ndarray:
    pos = {k: j for j, k in enumerate(ids.tolist())}
    return np.array([pos[i] for i in split.train_instances], dtype=np.int64)


def train_model(prep: PreparedData, kind: str, cfg: PipelineConfig, out_dir) -> dict:
    """Train one model family; writes the model file and a history CSV, returns metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if kind == "gb":
        tr = np.load(prep.root / "gb_train.npz")
        va = np.load(prep.root / "gb_validation.npz")
        rows = _instance_rows(prep.split, tr["ids"])
        g = cfg.gb
        model = fit_gbt(tr["X"][rows], tr["y"][rows], g.max_splits, g.n_trees, g.shrinkage, g.seed, g.min_leaf)
        val_auroc = _safe_auroc(model.predict_proba(va["X"]), va["y"])
        history = [{"epoch": r, "train_loss": loss} for r, loss in enumerate(model.train_loss)]
        meta = {"kind": "gb", "config": g.to_section(), "val_auroc": val_auroc, "n_trees": len(model.trees)}
        model.meta = meta
        model.save(out / "model.json")
        path = out / "model.json"
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "train_loss"])
            for r, loss in enumerate(model.train_loss):
                w.writerow([r, repr(loss)])
    elif kind == "mlp":
        tr = np.load(prep.root / "mlp_train.npz")
        va = np.load(prep.root / "mlp_validation.npz")
        rows = _instance_rows(prep.split, tr["ids"])
        m = cfg.mlp
        model = Mlp(MlpSpec(tr["X"].shape[1], tuple(m.hidden), m.dropout), seed=m.seed)
        tc = TrainConfig(m.batch_size, m.lr, m.epochs, m.seed, m.early_stop_patience)
        _, history = train(model, ArrayDataset(tr["X"][rows], tr["y"][rows]), ArrayDataset(va["X"], va["y"]), tc)
        meta = _nn_meta("mlp", m, tc, history)
        path = out / "model.bin"
        save_model(path, model, meta)
        _history_csv(out / "history.csv", history)
    elif kind == "cnnlstm":
        mats_tr = read_matrices_binary(prep.root / "cnnlstm_train.ehrsm")
        mats_va = read_matrices_binary(prep.root / "cnnlstm_validation.ehrsm")
        c = cfg.cnnlstm
        n_in = prep.vocab.agg_size + prep.schema.size
        spec = CnnLstmSpec(n_in, c.embed_dim, tuple(tuple(d) for d in c.conv_depths), 3, c.lstm_units,
                           c.init_state_std, c.step_loss)
        model = CnnLstm(spec, seed=c.seed)
        inst = prep.split.train_instances
        crop = tuple(int(round(h * HOUR / BLOCK_MIN)) for h in c.crop_h)
        train_set = SequenceDataset([mats_tr[i] for i in inst], prep.labels_of(inst), crop)
        va_ids = prep.split.validation
        val_set = SequenceDataset([mats_va[i] for i in va_ids], prep.labels_of(va_ids))
        tc = TrainConfig(c.batch_size, c.lr, c.epochs, c.seed, c.early_stop_patience, c.weight_decay)
        _, history = train(model, train_set, val_set, tc)
        meta = _nn_meta("cnnlstm", c, tc, history)
        path = out / "model.bin"
        save_model(path, model, meta)
        _history_csv(out / "history.csv", history)
    else:
        raise ValueError(f"unknown model kind {kind!r}; choose gb, mlp or cnnlstm")
    meta["vocab_sha256"] = _sha256(prep.root / "vocab.json")
    meta["model_file"] = path.name
    timings = {"seconds": time.perf_counter() - start}
    if kind != "gb":
        timings["epoch_seconds"] = _timings(history)
    return {**meta, **timings}


def _nn_meta(kind, section, tc: TrainConfig, history) -> dict:
    best = max((r.get("val_auroc", -1) for r in history if not math.isnan(r.get("val_auroc", math.nan))),
               default=None)
    return {"kind": kind, "config": section.to_section(), "train_config": tc.to_json(),
            "val_auroc": best, "epochs_run": len(history)}


def _timings(history) -> list:
    return [round(r.get("seconds", 0.0), 3) for r in history]


def _safe_auroc(s, y):
    try:
        return ev.auroc(s, y)
    except ev.MetricError:
        return None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- risk scorers ---------------------------------------------------------------

class GbScorer:
    kind = "gb"

    def __init__(self, model: GbtModel):
        self.model = model

    def trace(self, prep: PreparedData, i, times) -> np.ndarray:
        v, m = vital_feature_matrix(prep.admissions[i].sequence, times, prep.imputer)
        return self.model.predict_proba(np.hstack([v, m]))


class MlpScorer:
    kind = "mlp"

    def __init__(self, model: Mlp):
        self.model = model

    def trace(self, prep: PreparedData, i, times) -> np.ndarray:
        X = mlp_feature_matrix(prep.encoded(i), prep.context(i), times, prep.vocab)
        return self.model.predict_proba(X)


class CnnLstmScorer:
    """Sliding-grid risks from one forward pass over the label-time matrix.

    For prediction time ``p`` the model input is the matrix rows up to the
    block holding ``p``, with that last row restricted to events at or before
    ``p``; causality lets every such prefix reuse the full pass.
    """

    kind = "cnnlstm"

    def __init__(self, model: CnnLstm):
        self.model = model

    def trace(self, prep: PreparedData, i, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.int64)
        if len(times) == 0:
            return np.zeros(0)
        enc = prep.encoded(i)
        ctx = prep.context(i)
        full = sequence_matrix(prep.admissions[i].sequence, ctx, prep.vocab, int(times.max()), encoded=enc)
        _, cache = self.model.forward(full)
        empty = SequenceMatrix(1, prep.vocab.agg_size, np.zeros(0, np.int64), np.zeros(0, np.int64),
                               np.zeros(0), ctx, 0)
        r_empty = None
        first_t = enc.times.min() if len(enc.times) else None
        out = np.empty(len(times))
        for j, p in enumerate(times):
            if first_t is None or p < first_t or block_of(p) < full.start_block:
                if r_empty is None:
                    r_empty = self.model.predict_last(empty)
                out[j] = r_empty
                continue
            n = int(block_of(p)) - full.start_block + 1
            in_block = (enc.times >= block_of(p) * BLOCK_MIN) & (enc.times <= p)
            if in_block.any():
                row = aggregate_groups(enc, np.where(in_block, 0, -1), 1, prep.vocab)[0]
            else:
                row = np.zeros(prep.vocab.agg_size)
            out[j] = self.model.prefix_risk(cache, n, self.model.embed_row(row, ctx))
        return out


def load_scorer(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} not found")
    if path.suffix == ".json":
        try:
            return GbScorer(GbtModel.load(path))
        except (KeyError, ValueError) as exc:
            raise SchemaError(str(exc)) from exc
    try:
        model, header = load_model(path)
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc
    return MlpScorer(model) if header["kind"] == "mlp" else CnnLstmScorer(model)


def _score_chunk(args):
    root, scorer, ids, ecfg = args
    prep = PreparedData(root)
    return [_score_case(prep, scorer, i, ecfg) for i in ids]


def _score_case(prep, scorer, i, ecfg: EvalConfig) -> ev.ScoredCase:
    times = prep.grid(i, ecfg)
    risks = scorer.trace(prep, i, times)
    anti, blood = prep.interventions(i)
    adm = prep.admissions[i]
    return ev.ScoredCase(i, adm.department, prep.label(i), prep.label_times[i], times, np.clip(risks, 0, 1),
                         anti, blood)


def score_cases(prep: PreparedData, scorer, ids, ecfg: EvalConfig, workers: int = 1) -> list[ev.ScoredCase]:
    """Sliding-grid risk traces for ``ids``, in input order for any worker count."""
    ids = list(ids)
    if workers <= 1 or len(ids) < 2 * workers:
        return [_score_case(prep, scorer, i, ecfg) for i in ids]
    size = math.ceil(len(ids) / workers)
    chunks = [(prep.root, scorer, ids[a:a + size], ecfg) for a in range(0, len(ids), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [c for part in pool.map(_score_chunk, chunks) for c in part]


def horizon_scores(cases: list[ev.ScoredCase], horizon_h: float):
    """Instantaneous risk at ``label_time - horizon``; cases whose grid starts later are skipped."""
    ids, scores, labels, skipped = [], [], [], []
    for c in cases:
        i = c.step_at(c.label_time - horizon_h * HOUR)
        if i is None:
            skipped.append(c.admission_id)
            continue
        ids.append(c.admission_id)
        scores.append(float(c.risks[i]))
        labels.append(c.label)
    return ids, np.array(scores), np.array(labels, dtype=np.int64), skipped


def write_cases(path, cases: list[ev.ScoredCase]) -> None:
    with open(path, "w") as fh:
        for c in cases:
            fh.write(json.dumps({"id": c.admission_id, "department": c.department, "label": c.label,
                                 "label_time": c.label_time, "times": c.times.astype(int).tolist(),
                                 "risks": [float(r) for r in c.risks],
                                 "antibiotic_times": c.antibiotic_times.tolist(),
                                 "culture_times": c.culture_times.tolist()}, sort_keys=True) + "\n")


def read_cases(path) -> list[ev.ScoredCase]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            out.append(ev.ScoredCase(d["id"], d["department"], d["label"], d["label_time"], d["times"],
                                     d["risks"], d["antibiotic_times"], d["culture_times"]))
    return out


def evaluate_cases(cases: list[ev.ScoredCase], ecfg: EvalConfig, out_dir, model_name: str = "model") -> dict:
    """Per-horizon ROC/PR/DCA/calibration CSV+SVG files and a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"model": model_name, "horizons": {}}
    for h in ecfg.horizons_h:
        tag = f"t-{h:g}h"
        ids, s, y, skipped = horizon_scores(cases, h)
        block = {"n": len(y), "n_positive": int(y.sum()), "n_skipped": len(skipped)}
        with open(out / f"scores_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["admission_id", "label", "risk"])
            for i, yi, si in zip(ids, y, s):
                w.writerow([i, int(yi), repr(float(si))])
        if 0 < y.sum() < len(y):
            r = ev.roc(s, y)
            p = ev.pr(s, y)
            r.write_csv(out / f"roc_{tag}.csv", "fpr", "tpr")
            p.write_csv(out / f"pr_{tag}.csv", "recall", "precision")
            block["auroc"] = r.summary
            block["average_precision"] = p.summary
            _svg(out / f"roc_{tag}.svg", [(f"AUROC {r.summary:.3f}", r.x, r.y)], f"ROC {model_name} {tag}",
                 "1 - specificity", "sensitivity", diagonal=True, ylim=(0, 1))
            _svg(out / f"pr_{tag}.svg", [(f"AP {p.summary:.3f}", p.x, p.y)], f"PR {model_name} {tag}",
                 "recall", "precision", ylim=(0, 1))
        if len(y):
            dca = ev.decision_curve(s, y)
            with open(out / f"dca_{tag}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "model", "treat_all", "treat_none"])
                for k in range(len(dca["model"].x)):
                    w.writerow([repr(float(dca["model"].x[k])), repr(float(dca["model"].y[k])),
                                repr(float(dca["treat_all"].y[k])), repr(0.0)])
            prev = y.mean()
            _svg(out / f"dca_{tag}.svg", [(name, c.x, c.y) for name, c in dca.items()],
                 f"Decision curve {model_name} {tag}", "threshold probability", "net benefit",
                 ylim=(min(-0.05, -prev), max(prev, 0.05) * 1.1))
            cal = ev.calibration_curve(s, y, ecfg.calibration_bins)
            cal.write_csv(out / f"calibration_{tag}.csv", "mean_predicted", "observed")
            _svg(out / f"calibration_{tag}.svg", [("model", cal.x, cal.y)], f"Calibration {model_name} {tag}",
                 "mean predicted risk", "observed frequency", diagonal=True, ylim=(0, 1))
        summary["horizons"][tag] = block
    _write_json(out / "summary.json", summary)
    return summary


def _svg(path, curves, title, xlabel, ylabel, **kw):
    with open(path, "w") as fh:
        fh.write(ev.curves_svg(curves, title, xlabel, ylabel, **kw))


def seraip(cases: list[ev.ScoredCase], ecfg: EvalConfig, out_dir) -> ev.SeraipReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tau = dict(ecfg.tau_by_department) if ecfg.tau_by_department else ecfg.tau
    if isinstance(tau, dict):
        tau = {d: tau.get(d, ecfg.tau) for d in {c.department for c in cases}}
    report = ev.seraip_report(cases, tau, ecfg.horizons_h, ecfg.lookback_h)
    report.write_csv(out / "seraip.csv")
    report.write_footnotes(out / "seraip_footnotes.txt")
    return report


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
