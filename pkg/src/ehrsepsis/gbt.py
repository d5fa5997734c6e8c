"""Gradient-boosted decision trees for binary classification (logistic loss).

Each round fits a regression tree to the residuals ``y - p`` by exact greedy
split search (squared-error reduction), grown best-first up to ``max_splits``
internal nodes; leaves hold one Newton step ``sum(r) / sum(p (1 - p))``.
Missing values (NaN) follow a per-split default direction chosen at fit time.
"""
from __future__ import annotations

import heapq
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

GBT_SCHEMA_VERSION = 1
_P_CLIP = 1e-12


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, float)))


def logistic_loss(y, F) -> float:
    # mean of log(1 + exp(F)) - y F, computed stably
    F = np.asarray(F, float)
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    missing_left: bool = True
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def n_splits(self) -> int:
        return 0 if self.is_leaf else 1 + self.left.n_splits() + self.right.n_splits()

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        self._route(X, np.arange(len(X)), out)
        return out

    def _route(self, X, idx, out):
        if self.is_leaf:
            out[idx] = self.value
            return
        x = X[idx, self.feature]
        nan = np.isnan(x)
        go_left = (x <= self.threshold) | (nan & self.missing_left)
        self.left._route(X, idx[go_left], out)
        self.right._route(X, idx[~go_left], out)

    def to_json(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.value}
        return {"feature": self.feature, "threshold": self.threshold, "missing_left": self.missing_left,
                "left": self.left.to_json(), "right": self.right.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> "TreeNode":
        if "leaf" in doc:
            return cls(value=float(doc["leaf"]))
        return cls(int(doc["feature"]), float(doc["threshold"]), bool(doc["missing_left"]),
                   cls.from_json(doc["left"]), cls.from_json(doc["right"]))


@dataclass
class Split:
    gain: float
    feature: int
    threshold: float
    missing_left: bool


def best_split(X: np.ndarray, r: np.ndarray, order: np.ndarray | None = None,
               min_leaf: int = 1) -> Split | None:
    """Exact greedy search for the split maximising the squared-error reduction.

    The gain of sending index sets L/R apart is ``S_L^2/n_L + S_R^2/n_R - S^2/n``
    where ``S`` are residual sums.  Thresholds are midpoints between adjacent
    distinct values; NaNs are tried on both sides.  ``order`` holds, per column,
    the row ids of the node's samples sorted by that column (NaN last); it
    defaults to all rows of ``X``.
    """
    if order is None:
        order = np.argsort(X, axis=0, kind="stable")
    n, d = order.shape
    if n < 2 * min_leaf:
        return None
    xs = X[order, np.arange(d)]
    rs = r[order]
    nan = np.isnan(xs)
    n_nan = nan.sum(axis=0)
    has_nan = bool(n_nan.any())
    n_val = n - n_nan
    if has_nan:
        rs_val = np.where(nan, 0.0, rs)
        s_nan = rs.sum(axis=0) - rs_val.sum(axis=0)
    else:
        rs_val = rs
        s_nan = np.zeros(d)
    cs = np.cumsum(rs_val, axis=0)
    s_val = cs[-1]
    base = (s_val + s_nan) ** 2 / n

    # split after sorted position i: left = xs[:i+1]
    valid = xs[1:] > xs[:-1]
    nl = np.arange(1, n, dtype=float)[:, None]
    sl = cs[:-1]
    sr = s_val[None, :] - sl

    best = None
    for miss_left in ((True, False) if has_nan else (True,)):
        if miss_left:
            a_s, a_n, b_s, b_n = sl + s_nan, nl + n_nan, sr, n_val[None, :] - nl
        else:
            a_s, a_n, b_s, b_n = sl, nl, sr + s_nan, n - nl
        ok = valid
        if min_leaf > 1:
            ok = ok & (a_n >= min_leaf) & (b_n >= min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = a_s ** 2 / a_n + b_s ** 2 / b_n
        gain = np.where(ok, gain, -np.inf)
        flat = int(np.argmax(gain))
        i, f = divmod(flat, d)
        g = gain[i, f] - base[f]
        if np.isfinite(g) and (best is None or g > best.gain):
            lo, hi = xs[i, f], xs[i + 1, f]
            thr = lo + (hi - lo) / 2
            if thr >= hi:  # adjacent floats
                thr = lo
            best = Split(float(g), int(f), float(thr), miss_left)
    # missing-direction choice is irrelevant when the feature has no NaNs
    if best is not None and n_nan[best.feature] == 0:
        best.missing_left = True
    return best


def _child_orders(order: np.ndarray, go_left: np.ndarray):
    """Column-wise sorted orders of the two children, reusing the parent's order.

    ``go_left`` is a mask over all rows of ``X``.
    """
    sel = go_left[order]
    n, d = order.shape
    n_left = int(sel[:, 0].sum())
    left = order.T[sel.T].reshape(d, n_left).T
    right = order.T[~sel.T].reshape(d, n - n_left).T
    return left, right


def _newton_value(r, h) -> float:
    den = h.sum()
    return float(r.sum() / den) if den > 1e-150 else 0.0


def grow_tree(X, r, h, max_splits: int = 6, min_leaf: int = 1, order=None) -> TreeNode:
    """Best-first growth: always split the leaf with the largest gain."""
    if order is None:
        order = np.argsort(X, axis=0, kind="stable")
    root = TreeNode()
    heap = []
    counter = 0

    def consider(node, ordr):
        nonlocal counter
        s = best_split(X, r, ordr, min_leaf)
        rows = ordr[:, 0]
        # a zero-gain split of an impure node can still open up an interaction (XOR)
        if s is not None and (s.gain > 1e-12 or (s.gain > -1e-12 and np.ptp(r[rows]) > 0)):
            heapq.heappush(heap, (-max(s.gain, 0.0), counter, node, ordr, s))
            counter += 1
        node.value = _newton_value(r[rows], h[rows])

    consider(root, order)
    splits = 0
    while heap and splits < max_splits:
        _, _, node, ordr, s = heapq.heappop(heap)
        x = X[:, s.feature]
        go_left = (x <= s.threshold) | (np.isnan(x) & s.missing_left)
        lo, ro = _child_orders(ordr, go_left)
        node.feature, node.threshold, node.missing_left = s.feature, s.threshold, s.missing_left
        node.left, node.right = TreeNode(), TreeNode()
        consider(node.left, lo)
        consider(node.right, ro)
        splits += 1
    return root


@dataclass
class GbtModel:
    base_score: float
    shrinkage: float
    n_features: int
    trees: list[TreeNode] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        F = np.full(len(X), self.base_score)
        for t in self.trees:
            F += self.shrinkage * t.predict(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def to_json(self) -> dict:
        return {"schema_version": GBT_SCHEMA_VERSION, "kind": "gb", "base_score": self.base_score,
                "shrinkage": self.shrinkage, "n_features": self.n_features, "meta": self.meta,
                "train_loss": self.train_loss, "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, doc: dict) -> "GbtModel":
        if doc.get("schema_version") != GBT_SCHEMA_VERSION:
            raise ValueError(f"gbt schema_version {doc.get('schema_version')!r} != {GBT_SCHEMA_VERSION}")
        return cls(doc["base_score"], doc["shrinkage"], doc["n_features"],
                   [TreeNode.from_json(t) for t in doc["trees"]], doc.get("meta", {}), doc.get("train_loss", []))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "GbtModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_gbt(X, y, max_splits: int = 6, n_trees: int = 1000, shrinkage: float = 0.1,
            seed: int = 0, min_leaf: int = 1, subsample: float = 1.0) -> GbtModel:
    """Boost ``n_trees`` trees of at most ``max_splits`` splits each.

    A tree whose step would raise the training loss is halved until it does
    not, so the training loss never increases from one round to the next.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if len(y) < 2:
        raise ValueError("need at least 2 samples")
    rate = float(np.clip(y.mean(), _P_CLIP, 1 - _P_CLIP))
    model = GbtModel(float(np.log(rate / (1 - rate))), shrinkage, X.shape[1])
    F = np.full(len(y), model.base_score)
    model.train_loss.append(logistic_loss(y, F))
    if y.min() == y.max():
        warnings.warn("single-class training labels; returning a prior-only model", stacklevel=2)
        return model
    rng = np.random.default_rng(seed)
    order = np.argsort(X, axis=0, kind="stable")
    for _ in range(n_trees):
        p = sigmoid(F)
        r = y - p
        h = p * (1 - p)
        if subsample < 1.0:
            take = np.sort(rng.choice(len(y), size=max(2, int(subsample * len(y))), replace=False))
            keep = np.zeros(len(y), dtype=bool)
            keep[take] = True
            sub_order = order.T[keep[order].T].reshape(X.shape[1], len(take)).T
            tree = grow_tree(X, r, h, max_splits, min_leaf, sub_order)
        else:
            tree = grow_tree(X, r, h, max_splits, min_leaf, order)
        step = tree.predict(X)
        old = model.train_loss[-1]
        scale = 1.0
        new = logistic_loss(y, F + shrinkage * step)
        while new > old and scale > 1e-6:
            scale *= 0.5
            new = logistic_loss(y, F + shrinkage * scale * step)
        if new > old:
            break
        if scale != 1.0:
            for leaf in tree.leaves():
                leaf.value *= scale
            step = step * scale
        if tree.is_leaf and abs(tree.value) < 1e-15:
            break
        F = F + shrinkage * step
        model.trees.append(tree)
        model.train_loss.append(new)
    return model


def predict_gbt(model: GbtModel, features) -> np.ndarray:
    return model.predict_proba(features)
