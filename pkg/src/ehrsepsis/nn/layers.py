"""Dense numpy kernels with hand-written backward passes (float64 throughout).

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
followed by parameter gradients.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


# -- dense / activations -----------------------------------------------------

def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    return x @ W + b, x


def dense_backward(dy, x, W):
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def dropout_forward(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels, weights=None):
    """Mean (optionally weighted) cross-entropy over rows; returns (loss, probs, dlogits)."""
    probs = softmax(logits)
    n = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
    logp = logits - logits.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    loss = -float(np.sum(w * logp[np.arange(n), labels]))
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, probs, d * w[:, None]


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- sparse embedding ---------------------------------------------------------

def embed_forward(x_events: sp.csr_matrix, context, W, b):
    """Project sparse rows ``[events | context]`` to dense vectors.

    Equivalent to ``dense_rows @ W + b`` but only touches nonzeros; the context
    contribution is computed once and broadcast over rows.
    """
    k = x_events.shape[1]
    if k + len(context) != W.shape[0]:
        raise ShapeError(f"embedding expects {W.shape[0]} columns, got {k}+{len(context)}")
    y = x_events @ W[:k] + (context @ W[k:] + b)
    return y, (x_events, context)


def embed_backward(dy, cache, W):
    x_events, context = cache
    k = x_events.shape[1]
    dW = np.empty_like(W)
    dW[:k] = x_events.T @ dy
    col = dy.sum(axis=0)
    dW[k:] = np.outer(context, col)
    return dW, col


# -- causal convolution -------------------------------------------------------

def causal_conv1d_forward(x, W, b):
    """``x``: (T, D_in), ``W``: (k, D_in, D_out); output (T, D_out).

    Tap ``k-1`` sees the current step, tap 0 sees ``k-1`` steps back; the left
    edge is zero-padded so output ``t`` depends only on ``x[t-k+1 .. t]``.
    """
    if x.ndim != 2 or W.ndim != 3 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {W.shape}")
    k, d_in, d_out = W.shape
    T = x.shape[0]
    if T < 1:
        raise ShapeError("conv: empty input")
    xp = np.concatenate([np.zeros((k - 1, d_in)), x], axis=0)
    cols = np.concatenate([xp[j:j + T] for j in range(k)], axis=1)
    y = cols @ W.reshape(k * d_in, d_out) + b
    return y, cols


def causal_conv1d_backward(dy, cols, W):
    k, d_in, d_out = W.shape
    T = dy.shape[0]
    dW = (cols.T @ dy).reshape(k, d_in, d_out)
    db = dy.sum(axis=0)
    dcols = dy @ W.reshape(k * d_in, d_out).T
    dxp = np.zeros((T + k - 1, d_in))
    for j in range(k):
        dxp[j:j + T] += dcols[:, j * d_in:(j + 1) * d_in]
    return dxp[k - 1:], dW, db


def conv_tail(x_last3, W, b):
    """Output at the newest step given the last ``k`` input rows (zero-padded if short)."""
    k, d_in, _ = W.shape
    if x_last3.shape[0] < k:
        x_last3 = np.concatenate([np.zeros((k - x_last3.shape[0], d_in)), x_last3], axis=0)
    return np.einsum("kd,kdo->o", x_last3, W) + b


# -- max pooling ---------------------------------------------------------------

def pooled_length(n: int) -> int:
    return (n + 1) // 2


def maxpool1d_forward(x):
    """Kernel 2 / stride 2 over time; an odd trailing step forms its own window."""
    T, D = x.shape
    if T % 2:
        x = np.concatenate([x, np.full((1, D), -np.inf)], axis=0)
    pairs = x.reshape(-1, 2, D)
    arg = pairs.argmax(axis=1)
    y = np.take_along_axis(pairs, arg[:, None, :], axis=1)[:, 0, :]
    return y, (T, arg)


def maxpool1d_backward(dy, cache):
    T, arg = cache
    n, D = dy.shape
    dpairs = np.zeros((n, 2, D))
    np.put_along_axis(dpairs, arg[:, None, :], dy[:, None, :], axis=1)
    return dpairs.reshape(-1, D)[:T]


# -- LSTM --------------------------------------------------------------------

def lstm_forward(x, W, b, h0, c0):
    """Standard LSTM with input, forget and output gates.

    ``W``: (D_in + H, 4H) acting on ``[x_t, h_{t-1}]``; gate order i, f, o, g.
    Returns hidden states (T, H) and a cache.
    """
    T, d_in = x.shape
    H = h0.shape[0]
    if W.shape != (d_in + H, 4 * H):
        raise ShapeError(f"lstm: weight {W.shape} != {(d_in + H, 4 * H)}")
    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    hs[0], cs[0] = h0, c0
    gates = np.zeros((T, 4 * H))
    Wx, Wh = W[:d_in], W[d_in:]
    xw = x @ Wx + b
    for t in range(T):
        a = xw[t] + hs[t] @ Wh
        g = np.empty_like(a)
        g[:3 * H] = sigmoid(a[:3 * H])
        g[3 * H:] = np.tanh(a[3 * H:])
        gates[t] = g
        cs[t + 1] = g[H:2 * H] * cs[t] + g[:H] * g[3 * H:]
        hs[t + 1] = g[2 * H:3 * H] * np.tanh(cs[t + 1])
    return hs[1:], (x, W, hs, cs, gates)


def lstm_step(x_t, W, b, h, c):
    H = h.shape[0]
    a = np.concatenate([x_t, h]) @ W + b
    i, f, o = sigmoid(a[:3 * H]).reshape(3, H)
    g = np.tanh(a[3 * H:])
    c = f * c + i * g
    return o * np.tanh(c), c


def lstm_backward(dh_out, cache):
    x, W, hs, cs, gates = cache
    T, d_in = x.shape
    H = hs.shape[1]
    Wh = W[d_in:]
    dW = np.zeros_like(W)
    da_all = np.zeros((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in reversed(range(T)):
        g = gates[t]
        i, f, o, gg = g[:H], g[H:2 * H], g[2 * H:3 * H], g[3 * H:]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1 - tc ** 2)
        di = dc * gg
        df = dc * cs[t]
        dg = dc * i
        da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - gg ** 2)])
        da_all[t] = da
        dh_next = Wh @ da
        dc_next = dc * f
    dW[:d_in] = x.T @ da_all
    dW[d_in:] = hs[:-1].T @ da_all
    db = da_all.sum(axis=0)
    dx = da_all @ W[:d_in].T
    return dx, dW, db, dh_next, dc_next
