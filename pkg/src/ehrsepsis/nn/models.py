"""MLP and CNN-LSTM risk models built on :mod:`ehrsepsis.nn.layers`."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    hidden: tuple[int, ...] = (200, 200)
    dropout: float = 0.3

    def to_json(self):
        return asdict(self)


@dataclass(frozen=True)
class CnnLstmSpec:
    n_in: int
    embed_dim: int = 1000
    conv_depths: tuple[tuple[int, int], ...] = ((128, 128), (64, 64), (64, 64), (64, 64), (64, 64))
    kernel: int = 3
    lstm_units: int = 64
    init_state_std: float = 0.1
    step_loss: str = "all"  # "all" steps or only the "last" one

    def to_json(self):
        return asdict(self)

    @property
    def stride(self) -> int:
        return 2 ** len(self.conv_depths)

    def output_length(self, n: int) -> int:
        for _ in self.conv_depths:
            n = L.pooled_length(n)
        return n


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Mlp:
    kind = "mlp"

    def __init__(self, spec: MlpSpec, seed: int = 0, params: dict | None = None):
        self.spec = spec
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        sizes = (spec.n_in, *spec.hidden)
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            self.params[f"W{i}"] = _he(rng, a, (a, b))
            self.params[f"b{i}"] = np.zeros(b)
        n = len(spec.hidden) + 1
        self.params[f"W{n}"] = _glorot(rng, sizes[-1], 2, (sizes[-1], 2))
        self.params[f"b{n}"] = np.zeros(2)

    def _forward(self, X, train=False, rng=None):
        caches = []
        h = X
        n_hidden = len(self.spec.hidden)
        for i in range(1, n_hidden + 1):
            z, xc = L.dense_forward(h, self.params[f"W{i}"], self.params[f"b{i}"])
            a, rmask = L.relu_forward(z)
            h, dmask = L.dropout_forward(a, self.spec.dropout, rng, train)
            caches.append((xc, rmask, dmask))
        n = n_hidden + 1
        logits, xc = L.dense_forward(h, self.params[f"W{n}"], self.params[f"b{n}"])
        caches.append(xc)
        return logits, caches

    def predict_proba(self, X) -> np.ndarray:
        """Positive-class probability per row (dropout off)."""
        logits, _ = self._forward(np.atleast_2d(X))
        return L.softmax(logits)[:, 1]

    def loss_and_grads(self, X, y, rng=None, train=True):
        logits, caches = self._forward(X, train, rng)
        loss, _, dlogits = L.softmax_xent(logits, y)
        grads = {}
        n = len(self.spec.hidden) + 1
        dh, grads[f"W{n}"], grads[f"b{n}"] = L.dense_backward(dlogits, caches[-1], self.params[f"W{n}"])
        for i in range(n - 1, 0, -1):
            xc, rmask, dmask = caches[i - 1]
            da = L.dropout_backward(dh, dmask)
            dz = L.relu_backward(da, rmask)
            dh, grads[f"W{i}"], grads[f"b{i}"] = L.dense_backward(dz, xc, self.params[f"W{i}"])
        return loss, grads


@dataclass
class CnnLstmCache:
    embed: np.ndarray
    blocks: list = field(default_factory=list)  # per block: (conv_a, conv_b, pooled) activations
    conv_caches: list = field(default_factory=list)
    lstm_cache: tuple = ()
    hs: np.ndarray | None = None
    cs: np.ndarray | None = None
    logits: np.ndarray | None = None
    embed_cache: tuple = ()


class CnnLstm:
    """Sparse embedding -> causal conv blocks -> LSTM -> per-step softmax.

    Each conv block is two ReLU causal convolutions followed by a 2x max-pool,
    so one output step summarises ``2 ** n_blocks`` input rows.
    """

    kind = "cnnlstm"

    def __init__(self, spec: CnnLstmSpec, seed: int = 0, params: dict | None = None):
        self.spec = spec
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        p = {}
        d = spec.embed_dim
        p["embed_W"] = _glorot(rng, spec.n_in, d, (spec.n_in, d))
        p["embed_b"] = np.zeros(d)
        d_in = d
        for i, depths in enumerate(spec.conv_depths):
            for tag, d_out in zip("ab", depths):
                p[f"conv{i}{tag}_W"] = _he(rng, spec.kernel * d_in, (spec.kernel, d_in, d_out))
                p[f"conv{i}{tag}_b"] = np.zeros(d_out)
                d_in = d_out
        H = spec.lstm_units
        p["lstm_W"] = _glorot(rng, d_in + H, 4 * H, (d_in + H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate bias
        p["lstm_b"] = b
        p["out_W"] = _glorot(rng, H, 2, (H, 2))
        p["out_b"] = np.zeros(2)
        self.params = p

    # -- forward / backward -------------------------------------------------
    def _initial_state(self, train, rng):
        H = self.spec.lstm_units
        if train and rng is not None and self.spec.init_state_std > 0:
            return (rng.normal(0, self.spec.init_state_std, H), rng.normal(0, self.spec.init_state_std, H))
        return np.zeros(H), np.zeros(H)

    def forward(self, matrix, train=False, rng=None, state=None) -> tuple[np.ndarray, CnnLstmCache]:
        """Per-step positive-class probability for a :class:`SequenceMatrix`."""
        p = self.params
        x, ecache = L.embed_forward(matrix.event_csr(), matrix.context, p["embed_W"], p["embed_b"])
        cache = CnnLstmCache(embed=x, embed_cache=ecache)
        h = x
        for i in range(len(self.spec.conv_depths)):
            acts, cc = [], []
            for tag in "ab":
                z, cols = L.causal_conv1d_forward(h, p[f"conv{i}{tag}_W"], p[f"conv{i}{tag}_b"])
                h, mask = L.relu_forward(z)
                acts.append(h)
                cc.append((cols, mask))
            h, pc = L.maxpool1d_forward(h)
            acts.append(h)
            cc.append(pc)
            cache.blocks.append(acts)
            cache.conv_caches.append(cc)
        h0, c0 = state if state is not None else self._initial_state(train, rng)
        hs, lc = L.lstm_forward(h, p["lstm_W"], p["lstm_b"], h0, c0)
        cache.lstm_cache = lc
        cache.hs, cache.cs = lc[2], lc[3]
        logits, _ = L.dense_forward(hs, p["out_W"], p["out_b"])
        cache.logits = logits
        return L.softmax(logits)[:, 1], cache

    def backward(self, dlogits, cache: CnnLstmCache) -> dict:
        p = self.params
        g = {}
        hs = cache.lstm_cache[2][1:]
        dhs, g["out_W"], g["out_b"] = L.dense_backward(dlogits, hs, p["out_W"])
        dh, g["lstm_W"], g["lstm_b"], _, _ = L.lstm_backward(dhs, cache.lstm_cache)
        for i in reversed(range(len(self.spec.conv_depths))):
            (cols_a, mask_a), (cols_b, mask_b), pc = cache.conv_caches[i]
            dh = L.maxpool1d_backward(dh, pc)
            dh = L.relu_backward(dh, mask_b)
            dh, g[f"conv{i}b_W"], g[f"conv{i}b_b"] = L.causal_conv1d_backward(dh, cols_b, p[f"conv{i}b_W"])
            dh = L.relu_backward(dh, mask_a)
            dh, g[f"conv{i}a_W"], g[f"conv{i}a_b"] = L.causal_conv1d_backward(dh, cols_a, p[f"conv{i}a_W"])
        g["embed_W"], g["embed_b"] = L.embed_backward(dh, cache.embed_cache, p["embed_W"])
        return g

    def step_weights(self, n_steps: int) -> np.ndarray:
        if self.spec.step_loss == "last":
            w = np.zeros(n_steps)
            w[-1] = 1.0
            return w
        return np.full(n_steps, 1.0 / n_steps)

    def loss_and_grads(self, matrix, label: int, rng=None, train=True, state=None):
        _, cache = self.forward(matrix, train, rng, state)
        n = cache.logits.shape[0]
        loss, _, dlogits = L.softmax_xent(cache.logits, np.full(n, int(label)), self.step_weights(n))
        return loss, self.backward(dlogits, cache)

    def predict_last(self, matrix) -> float:
        risk, _ = self.forward(matrix)
        return float(risk[-1])

    # -- incremental prefix evaluation ----------------------------------------
    def embed_row(self, event_row: np.ndarray, context: np.ndarray) -> np.ndarray:
        p = self.params
        k = len(event_row)
        return event_row @ p["embed_W"][:k] + context @ p["embed_W"][k:] + p["embed_b"]

    def prefix_risk(self, cache: CnnLstmCache, n_prefix: int, last_embed: np.ndarray) -> float:
        """Risk at the last step of the first ``n_prefix`` rows, with row ``n_prefix-1`` replaced.

        Causal layers make every earlier activation of the prefix identical to
        the full-sequence activations, so only the newest element of each layer
        needs recomputing.
        """
        p = self.params
        k = self.spec.kernel
        n = n_prefix
        full_in = cache.embed
        tail = last_embed
        for i in range(len(self.spec.conv_depths)):
            conv_a, conv_b, _ = cache.blocks[i]
            lo = max(0, n - k)
            ta = np.maximum(L.conv_tail(np.vstack([full_in[lo:n - 1], tail]), p[f"conv{i}a_W"], p[f"conv{i}a_b"]), 0)
            tb = np.maximum(L.conv_tail(np.vstack([conv_a[lo:n - 1], ta]), p[f"conv{i}b_W"], p[f"conv{i}b_b"]), 0)
            if n % 2 == 0:
                tail = np.maximum(conv_b[n - 2], tb)
            else:
                tail = tb
            full_in = cache.blocks[i][2]
            n = L.pooled_length(n)
        h, c = L.lstm_step(tail, p["lstm_W"], p["lstm_b"], cache.hs[n - 1], cache.cs[n - 1])
        logits = h @ p["out_W"] + p["out_b"]
        return float(L.softmax(logits[None, :])[0, 1])
