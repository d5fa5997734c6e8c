"""Adam optimizer and the mini-batch training loop shared by the MLP and CNN-LSTM."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np


log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Adam; ``weight_decay`` > 0 adds decoupled decay of all parameters."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.weight_decay:
                params[k] *= 1 - self.lr * self.weight_decay
            params[k] -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 50
    lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    early_stop_patience: int | None = None
    weight_decay: float = 0.0

    def to_json(self):
        return asdict(self)


class ArrayDataset:
    """Rows of a dense feature matrix (MLP input)."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = np.asarray(X, float)
        self.y = np.asarray(y, dtype=np.int64)

    def __len__(self):
        return len(self.y)

    @property
    def labels(self):
        return self.y

    def batch(self, model, idx, rng):
        loss, grads = model.loss_and_grads(self.X[idx], self.y[idx], rng=rng, train=True)
        return loss, grads, None

    def predict(self, model) -> np.ndarray:
        return model.predict_proba(self.X)


class SequenceDataset:
    """Sequence matrices, one label each (CNN-LSTM input).

    With ``crop_rows=(lo, hi)`` every training draw drops a uniform number of
    trailing rows in ``[lo, hi]``, i.e. moves the prediction time earlier.
    """

    def __init__(self, matrices: list, y, crop_rows: tuple[int, int] | None = None):
        self.matrices = list(matrices)
        self.y = np.asarray(y, dtype=np.int64)
        self.crop_rows = crop_rows

    def __len__(self):
        return len(self.y)

    @property
    def labels(self):
        return self.y

    def batch(self, model, idx, rng):
        # per-sample gradients summed in index order so results do not depend on scheduling
        total = {k: np.zeros_like(v) for k, v in model.params.items()}
        loss = 0.0
        for i in idx:
            m = self.matrices[i]
            if self.crop_rows is not None:
                lo, hi = self.crop_rows
                m = m.head(m.n_rows - int(rng.integers(lo, hi + 1)))
            li, gi = model.loss_and_grads(m, self.y[i], rng=rng, train=True)
            loss += li
            for k in total:
                total[k] += gi[k]
        n = len(idx)
        return loss / n, {k: v / n for k, v in total.items()}, None

    def predict(self, model) -> np.ndarray:
        return np.array([model.predict_last(m) for m in self.matrices])


def _val_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def train(model, train_set, val_set, config: TrainConfig = TrainConfig()):
    """Cross-entropy training with Adam; returns (best params, history).

    The returned parameters are those of the epoch with the best validation
    AUROC (validation loss when AUROC is undefined).
    """
    from ..evaluation import auroc

    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    history = []
    best_score, best_params, since_best = -math.inf, copy.deepcopy(model.params), 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            loss, grads, _ = train_set.batch(model, idx, rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, batch {b // config.batch_size}"
                                       f" (loss={loss}); try a lower learning rate")
            opt.step(model.params, grads)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        row = {"epoch": epoch, "train_loss": train_loss}
        if val_set is not None and len(val_set):
            pv = val_set.predict(model)
            row["val_loss"] = _val_loss(pv, val_set.labels)
            yv = val_set.labels
            row["val_auroc"] = auroc(pv, yv) if 0 < yv.sum() < len(yv) else float("nan")
            score = row["val_auroc"] if not math.isnan(row["val_auroc"]) else -row["val_loss"]
        else:
            score = -train_loss
        row["seconds"] = time.perf_counter() - start
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if score > best_score:
            best_score, best_params, since_best = score, copy.deepcopy(model.params), 0
        else:
            since_best += 1
            if config.early_stop_patience is not None and since_best >= config.early_stop_patience:
                break
    model.params = best_params
    return best_params, history
