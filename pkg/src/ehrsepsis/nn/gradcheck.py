"""Central finite-difference checks of the hand-written backward passes.

The error reported for one array is ``||analytic - numeric|| / (||analytic|| + ||numeric||)``;
checks return the maximum over all arrays involved.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import layers as L
from .models import CnnLstm, CnnLstmSpec, Mlp, MlpSpec


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Gradient of ``f`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _max_error(f, arrays: dict, analytic: dict, eps: float) -> float:
    return max(rel_error(analytic[k], numeric_grad(f, arrays[k], eps)) for k in arrays)


def check_dense(seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    R = rng.normal(size=(4, 3))

    def f():
        return float(np.sum(L.dense_forward(x, W, b)[0] * R))

    dx, dW, db = L.dense_backward(R, x, W)
    return _max_error(f, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db}, eps)


def check_mlp(seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    model = Mlp(MlpSpec(n_in=6, hidden=(5, 4), dropout=0.3), seed=seed)
    # zero biases put dead-row pre-activations exactly on the ReLU kink
    for key in model.params:
        if key.startswith("b"):
            model.params[key] = rng.normal(scale=0.1, size=model.params[key].shape)
    X = rng.normal(size=(7, 6))
    y = rng.integers(0, 2, size=7)

    def f():
        return model.loss_and_grads(X, y, train=False)[0]

    _, grads = model.loss_and_grads(X, y, train=False)
    return _max_error(f, model.params, grads, eps)


def check_conv(seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(9, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    R = rng.normal(size=(9, 4))

    def f():
        return float(np.sum(L.causal_conv1d_forward(x, W, b)[0] * R))

    _, cols = L.causal_conv1d_forward(x, W, b)
    dx, dW, db = L.causal_conv1d_backward(R, cols, W)
    return _max_error(f, {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db}, eps)


def check_pool(seed: int, eps: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(11, 3))
    R = rng.normal(size=(L.pooled_length(11), 3))

    def f():
        return float(np.sum(L.maxpool1d_forward(x)[0] * R))

    _, cache = L.maxpool1d_forward(x)
    return _max_error(f, {"x": x}, {"x": L.maxpool1d_backward(R, cache)}, eps)


def check_conv_pool(seed: int, eps: float = 1e-4) -> float:
    """Two ReLU causal convolutions followed by a max-pool, like one conv block."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(13, 3))
    W1, b1 = rng.normal(size=(3, 3, 4)), rng.normal(scale=0.1, size=4)
    W2, b2 = rng.normal(size=(3, 4, 4)), rng.normal(scale=0.1, size=4)
    R = rng.normal(size=(L.pooled_length(13), 4))

    def forward():
        z1, c1 = L.causal_conv1d_forward(x, W1, b1)
        a1, m1 = L.relu_forward(z1)
        z2, c2 = L.causal_conv1d_forward(a1, W2, b2)
        a2, m2 = L.relu_forward(z2)
        y, pc = L.maxpool1d_forward(a2)
        return y, (c1, m1, c2, m2, pc)

    def f():
        return float(np.sum(forward()[0] * R))

    _, (c1, m1, c2, m2, pc) = forward()
    d = L.relu_backward(L.maxpool1d_backward(R, pc), m2)
    d, dW2, db2 = L.causal_conv1d_backward(d, c2, W2)
    dx, dW1, db1 = L.causal_conv1d_backward(L.relu_backward(d, m1), c1, W1)
    return _max_error(f, {"x": x, "W1": W1, "b1": b1, "W2": W2, "b2": b2},
                      {"x": dx, "W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, eps)


def check_lstm(seed: int, eps: float = 1e-4, steps: int = 4) -> float:
    rng = np.random.default_rng(seed)
    d_in, H = 3, 5
    x = rng.normal(size=(steps, d_in))
    W = rng.normal(scale=0.5, size=(d_in + H, 4 * H))
    b = rng.normal(scale=0.5, size=4 * H)
    h0, c0 = rng.normal(size=H), rng.normal(size=H)
    R = rng.normal(size=(steps, H))

    def f():
        return float(np.sum(L.lstm_forward(x, W, b, h0, c0)[0] * R))

    _, cache = L.lstm_forward(x, W, b, h0, c0)
    dx, dW, db, dh0, dc0 = L.lstm_backward(R, cache)
    return _max_error(f, {"x": x, "W": W, "b": b, "h0": h0, "c0": c0},
                      {"x": dx, "W": dW, "b": db, "h0": dh0, "c0": dc0}, eps)


class _TinyMatrix:
    """Duck-typed stand-in for a SequenceMatrix."""

    def __init__(self, events: np.ndarray, context: np.ndarray):
        self._csr = sp.csr_matrix(events)
        self.context = context

    def event_csr(self):
        return self._csr


def tiny_cnn_lstm(seed: int, n_rows: int = 40, k: int = 7, c: int = 3) -> tuple[CnnLstm, _TinyMatrix]:
    rng = np.random.default_rng(seed)
    spec = CnnLstmSpec(n_in=k + c, embed_dim=6, conv_depths=((4, 4),) + ((3, 3),) * 4, lstm_units=4)
    model = CnnLstm(spec, seed=seed)
    for key in model.params:
        if key.endswith("_b"):
            model.params[key] = rng.normal(scale=0.1, size=model.params[key].shape)
    events = rng.normal(size=(n_rows, k)) * (rng.random((n_rows, k)) < 0.4)
    return model, _TinyMatrix(events, rng.normal(size=c))


def check_cnn_lstm(seed: int, eps: float = 1e-4) -> float:
    model, matrix = tiny_cnn_lstm(seed)

    def f():
        return model.loss_and_grads(matrix, 1, train=False)[0]

    _, grads = model.loss_and_grads(matrix, 1, train=False)
    return _max_error(f, model.params, grads, eps)


CHECKS = {
    "dense": check_dense,
    "mlp": check_mlp,
    "conv": check_conv,
    "maxpool": check_pool,
    "conv_pool": check_conv_pool,
    "lstm": check_lstm,
    "cnn_lstm": check_cnn_lstm,
}


def grad_check(layer: str, seed: int = 0, eps: float = 1e-4) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    return CHECKS[layer](seed, eps)
