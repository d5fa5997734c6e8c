"""Discrimination, decision-curve, calibration and SERAIP evaluation.

SERAIP classifies a whole admission sequentially: the risk reported at a
prediction step is the running maximum of all risks so far, so a positive
classification is never withdrawn.  True positives are then checked for
antibiotics or blood cultures in the 72 h before the prediction time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from html import escape

import numpy as np
from scipy.stats import rankdata

HOUR = 60


class MetricError(ValueError):
    pass


@dataclass
class Curve:
    """Points ``(x, y, threshold)`` plus an optional scalar summary."""

    name: str
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray
    summary: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        for i in range(len(self.x)):
            yield float(self.x[i]), float(self.y[i]), float(self.thresholds[i])

    def write_csv(self, path, x_name="x", y_name="y") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            cols = [x_name, y_name, "threshold", *self.extra]
            w.writerow(cols)
            for i, row in enumerate(self.rows()):
                w.writerow([*(_fmt(v) for v in row), *(_fmt(self.extra[k][i]) for k in self.extra)])


def _fmt(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return ""
    return repr(v)


def _check(scores, labels):
    s = np.asarray(scores, float).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores but {len(y)} labels")
    if np.isnan(s).any():
        raise MetricError("NaN score")
    return s, y


def _threshold_counts(s, y):
    """Cumulative (tp, fp) when predicting positive for ``score >= threshold``, per distinct threshold."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp, fp


# -- ROC / PR -------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(positive outranks negative), ties counting one half."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("undefined AUROC: need both classes")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


def roc(scores, labels) -> Curve:
    s, y = _check(scores, labels)
    a = auroc(s, y)
    thr, tp, fp = _threshold_counts(s, y)
    P, N = y.sum(), len(y) - y.sum()
    return Curve("roc", np.r_[0.0, fp / N], np.r_[0.0, tp / P], np.r_[np.inf, thr], a)


def average_precision(scores, labels) -> float:
    """Step-wise integrated precision over recall increments."""
    s, y = _check(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise MetricError("average precision undefined without positives")
    _, tp, fp = _threshold_counts(s, y)
    d_recall = np.diff(np.r_[0, tp]) / P
    return float(np.sum(d_recall * tp / (tp + fp)))


def pr(scores, labels) -> Curve:
    s, y = _check(scores, labels)
    ap = average_precision(s, y)
    thr, tp, fp = _threshold_counts(s, y)
    return Curve("pr", tp / y.sum(), tp / (tp + fp), thr, ap)


# -- decision curves ---------------------------------------------------------------

def net_benefit(tp, fp, total, p_tau) -> float:
    """``(TP - FP * w) / N`` with ``w = p_tau / (1 - p_tau)``."""
    if not 0.0 < p_tau < 1.0:
        raise MetricError(f"p_tau must lie in (0, 1), got {p_tau}")
    if total <= 0:
        raise MetricError("total must be positive")
    return (tp - fp * (p_tau / (1.0 - p_tau))) / total


def decision_curve(scores, labels, tau_grid=None) -> dict[str, Curve]:
    s, y = _check(scores, labels)
    if tau_grid is None:
        tau_grid = np.round(np.arange(0.01, 1.0, 0.01), 2)
    tau = np.asarray(tau_grid, float)
    n, P = len(y), int(y.sum())
    model = np.empty(len(tau))
    for i, t in enumerate(tau):
        pos = s > t
        tp = int(np.sum(pos & (y == 1)))
        model[i] = net_benefit(tp, int(pos.sum()) - tp, n, t)
    w = tau / (1 - tau)
    treat_all = (P - (n - P) * w) / n
    return {"model": Curve("dca_model", tau, model, tau),
            "treat_all": Curve("dca_treat_all", tau, treat_all, tau),
            "treat_none": Curve("dca_treat_none", tau, np.zeros(len(tau)), tau)}


# -- calibration --------------------------------------------------------------------

def calibration_curve(scores, labels, n_bins: int = 10) -> Curve:
    """Equal-width bins on [0, 1]: (mean predicted, observed frequency); empty bins dropped."""
    s, y = _check(scores, labels)
    b = np.clip((s * n_bins).astype(np.int64), 0, n_bins - 1)
    count = np.bincount(b, minlength=n_bins)
    keep = count > 0
    mean_pred = np.bincount(b, weights=s, minlength=n_bins)[keep] / count[keep]
    freq = np.bincount(b, weights=y, minlength=n_bins)[keep] / count[keep]
    lower = np.arange(n_bins)[keep] / n_bins
    return Curve("calibration", mean_pred, freq, lower, None, {"count": count[keep]})


# -- SERAIP ------------------------------------------------------------------

def seraip_sequence(risks) -> np.ndarray:
    """Running maximum of the per-step risks."""
    r = np.asarray(risks, float)
    return np.maximum.accumulate(r) if r.size else r.copy()


@dataclass
class ScoredCase:
    admission_id: str
    department: str
    label: int
    label_time: int
    times: np.ndarray  # prediction times, minutes since admission start
    risks: np.ndarray
    antibiotic_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    culture_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.risks = np.asarray(self.risks, float)
        self.antibiotic_times = np.asarray(self.antibiotic_times, float)
        self.culture_times = np.asarray(self.culture_times, float)
        if self.times.shape != self.risks.shape:
            raise ValueError("times and risks differ in length")
        if self.risks.size and (self.risks.min() < 0 or self.risks.max() > 1):
            raise ValueError(f"risk outside [0, 1] for {self.admission_id}")

    def step_at(self, t) -> int | None:
        """Index of the last grid step at or before ``t``; None if ``t`` precedes the grid."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return None if i < 0 else i

    def seq_risk_at(self, t) -> float | None:
        i = self.step_at(t)
        if i is None:
            return None
        return float(self.risks[: i + 1].max())


def _any_in(times, lo, hi) -> bool:
    return bool(np.any((times >= lo) & (times <= hi)))


@dataclass
class SeraipRow:
    department: str
    horizon_h: float
    tp: int
    tn: int
    fn: int
    fp: int
    tp_anti: int
    tp_blood: int
    tp_int: int

    def __post_init__(self):
        if self.tp_int < max(self.tp_anti, self.tp_blood) or self.tp_int > self.tp:
            raise ValueError(f"inconsistent intervention counts: {self}")

    @property
    def tp_no_int(self) -> int:
        return self.tp - self.tp_int

    @property
    def sen(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else math.nan

    @property
    def spe(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else math.nan

    @property
    def fp_per_tp(self) -> float:
        return self.fp / self.tp if self.tp else math.nan

    COLUMNS = ("department", "horizon", "SEN", "SPE", "FP/TP", "TP", "TN", "FN", "FP",
               "TP_anti", "TP_blood", "TP_int", "TP_no_int")

    def formatted(self) -> dict:
        def r2(v):
            return "" if math.isnan(v) else f"{v:.2f}"
        return dict(zip(self.COLUMNS, (
            self.department, f"t-{self.horizon_h:g}h", r2(self.sen), r2(self.spe), r2(self.fp_per_tp),
            self.tp, self.tn, self.fn, self.fp, self.tp_anti, self.tp_blood, self.tp_int, self.tp_no_int)))


@dataclass
class SeraipReport:
    rows: list[SeraipRow]
    footnotes: list[str]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SeraipRow.COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row.formatted())

    def write_footnotes(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("".join(f"{n}\n" for n in self.footnotes))


def seraip_report(cases: list[ScoredCase], tau: float | dict = 0.1, horizons_h=(3, 10, 24),
                  lookback_h: float = 72) -> SeraipReport:
    """Table of sequential classification results per department and horizon.

    ``tau`` is a global threshold or a ``{department: tau}`` map (missing
    departments default to 0.1).  A case whose evaluation time falls before
    its first grid step is skipped for that horizon and listed in the footnotes.
    """
    departments = sorted({c.department for c in cases})
    rows, notes = [], []
    for dept in departments:
        t_dept = tau.get(dept, 0.1) if isinstance(tau, dict) else tau
        group = [c for c in cases if c.department == dept]
        for h in horizons_h:
            tp = tn = fn = fp = anti = blood = both = 0
            skipped = []
            for c in group:
                t_eval = c.label_time - h * HOUR
                p = c.seq_risk_at(t_eval)
                if p is None:
                    skipped.append(c.admission_id)
                    continue
                pos = p > t_dept
                if c.label == 1 and pos:
                    tp += 1
                    lo = t_eval - lookback_h * HOUR
                    a = _any_in(c.antibiotic_times, lo, t_eval)
                    b = _any_in(c.culture_times, lo, t_eval)
                    anti += a
                    blood += b
                    both += a or b
                elif c.label == 1:
                    fn += 1
                elif pos:
                    fp += 1
                else:
                    tn += 1
            rows.append(SeraipRow(dept, h, tp, tn, fn, fp, anti, blood, both))
            if skipped:
                notes.append(f"{dept} t-{h:g}h: {len(skipped)} case(s) skipped, horizon precedes the "
                             f"prediction grid: {', '.join(skipped)}")
    return SeraipReport(rows, notes)


# -- SVG ---------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f")


def curves_svg(curves: list[tuple[str, np.ndarray, np.ndarray]], title: str, xlabel: str, ylabel: str,
               xlim=(0.0, 1.0), ylim=None, diagonal=False, width=480, height=400) -> str:
    """A small line plot as a standalone SVG document."""
    ml, mr, mt, mb = 60, 20, 35, 50
    pw, ph = width - ml - mr, height - mt - mb
    if ylim is None:
        ys = np.concatenate([np.asarray(c[2], float) for c in curves]) if curves else np.zeros(1)
        ys = ys[np.isfinite(ys)]
        lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
        if hi - lo < 1e-9:
            lo, hi = lo - 0.5, hi + 0.5
        ylim = (lo, hi)

    def px(x):
        return ml + (x - xlim[0]) / (xlim[1] - xlim[0]) * pw

    def py(y):
        y = min(max(y, ylim[0]), ylim[1])
        return mt + ph - (y - ylim[0]) / (ylim[1] - ylim[0]) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{ml + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="15" y="{mt + ph / 2}" text-anchor="middle" '
           f'transform="rotate(-90 15 {mt + ph / 2})">{escape(ylabel)}</text>']
    for k in range(6):
        xv = xlim[0] + k * (xlim[1] - xlim[0]) / 5
        yv = ylim[0] + k * (ylim[1] - ylim[0]) / 5
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{xv:.2g}</text>')
        out.append(f'<text x="{ml - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2g}</text>')
    if diagonal:
        out.append(f'<line x1="{px(xlim[0]):.1f}" y1="{py(ylim[0]):.1f}" x2="{px(xlim[1]):.1f}" '
                   f'y2="{py(ylim[1]):.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, x, y) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * i}" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
