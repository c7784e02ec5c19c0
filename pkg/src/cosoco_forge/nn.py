"""Numpy convolutional patch classifier with hand-written backpropagation.

Activations are kept channels-last internally; the public ``forward`` takes
``(n, c, h, w)`` batches.
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-7

Params = Dict[str, np.ndarray]


# -- loss ------------------------------------------------------------------

def weighted_bce(probs, labels, w_pos: float = 1.0, w_neg: float = 1.0) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(w_pos * y * np.log(p) + w_neg * (1 - y) * np.log(1 - p)))


def bce(probs, labels) -> float:
    """Unweighted per-patch binary cross-entropy averaged over all patches."""
    return weighted_bce(probs, labels, 1.0, 1.0)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit_loss(z: np.ndarray, y: np.ndarray, w_pos: float, w_neg: float,
               n_total: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """Weighted BCE from logits with the probability clamp; returns (loss, dL/dz).

    ``n_total`` is the full batch size when ``z`` is one chunk of it.
    """
    n = n_total or len(z)
    z = z.astype(np.float64)
    y = y.astype(np.float64)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    lo, hi = np.log(EPS), np.log1p(-EPS)
    lp = np.clip(log_p, lo, hi)
    lq = np.clip(log_q, lo, hi)
    loss = -np.sum(w_pos * y * lp + w_neg * (1 - y) * lq) / n
    p = np.exp(log_p)
    # d(log p)/dz = 1 - p, d(log(1-p))/dz = -p; zero where the clamp is active.
    dp = np.where((log_p > lo) & (log_p < hi), 1 - p, 0.0)
    dq = np.where((log_q > lo) & (log_q < hi), -p, 0.0)
    grad = -(w_pos * y * dp + w_neg * (1 - y) * dq) / n
    return float(loss), grad


# -- layers ----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,c,3,3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv3x3(x: np.ndarray, W: np.ndarray, b) -> Tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    cols = _im2col(x)
    wm = W.reshape(9 * c, -1)
    z = np.empty((n * h * w, wm.shape[1]), dtype=np.result_type(cols, wm))
    # one GEMM per sample: BLAS blocking over a shared M dimension would make a
    # patch's output depend on its position in the batch
    hw = h * w
    for i in range(n):
        np.matmul(cols[i * hw:(i + 1) * hw], wm, out=z[i * hw:(i + 1) * hw])
    z += b
    return z.reshape(n, h, w, -1), cols


def conv3x3_backward(dz: np.ndarray, cols: np.ndarray, W: np.ndarray, need_dx: bool = True):
    co = dz.shape[-1]
    flat = dz.reshape(-1, co)
    dW = (cols.T @ flat).reshape(W.shape)
    db = flat.sum(axis=0)
    dx = None
    if need_dx:
        wf = np.ascontiguousarray(W[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = conv3x3(dz, wf, 0)
    return dx, dW, db


def maxpool2(x: np.ndarray) -> np.ndarray:
    a = np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2])
    b = np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    return np.maximum(a, b)


def maxpool2_backward(dy: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Route each gradient to the first maximal element of its 2x2 window."""
    dx = np.zeros_like(x)
    free = np.ones(y.shape, dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            hit = (x[:, i::2, j::2] == y) & free
            dx[:, i::2, j::2] = np.where(hit, dy, 0)
            free &= ~hit
    return dx


# -- models ----------------------------------------------------------------

class ConvNet:
    """Three conv3x3/ReLU/maxpool blocks, global pooling, one logit."""

    arch = "cosoco-convnet-v1"

    def __init__(self, channels: Sequence[int] = (8, 16, 32), in_channels: int = 3,
                 pooling: str = "avg", seed: int = 0, dtype=np.float32):
        if pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {pooling!r}")
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.pooling = pooling
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: Params = OrderedDict()
        cin = in_channels
        for k, cout in enumerate(self.channels, 1):
            lim = np.sqrt(6.0 / (9 * cin))
            self.params[f"conv{k}.W"] = rng.uniform(-lim, lim, (3, 3, cin, cout))
            self.params[f"conv{k}.b"] = np.zeros(cout)
            cin = cout
        lim = 1.0 / np.sqrt(cin)
        self.params["fc.W"] = rng.uniform(-lim, lim, (cin,))
        self.params["fc.b"] = np.zeros(1)
        self.astype(dtype)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "ConvNet":
        self.dtype = np.dtype(dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(self.dtype)
        return self

    def config(self) -> dict:
        return {"channels": list(self.channels), "in_channels": self.in_channels, "pooling": self.pooling}

    def _prep(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected batch of shape (n, {self.in_channels}, h, w), got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"patch sides must be multiples of 8, got {x.shape[2:]}")
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)

    def _forward(self, a: np.ndarray, keep: bool):
        cache = []
        for k in range(1, len(self.channels) + 1):
            z, cols = conv3x3(a, self.params[f"conv{k}.W"], self.params[f"conv{k}.b"])
            pz = maxpool2(z)
            a = np.maximum(pz, 0)
            if keep:
                cache.append((cols, z, pz))
        if self.pooling == "avg":
            feat = a.mean(axis=(1, 2))
        else:
            feat = a.max(axis=(1, 2))
        logit = (feat * self.params["fc.W"]).sum(axis=1) + self.params["fc.b"][0]
        return logit, feat, a, cache

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(self._prep(x), keep=False)[0]

    def kink_pattern(self, x: np.ndarray) -> Tuple[np.ndarray, bytes]:
        """Logits plus a fingerprint of every ReLU and max-pool branch taken."""
        logit, feat, a, cache = self._forward(self._prep(x), keep=True)
        bits = []
        for _, z, pz in cache:
            bits.append(np.packbits(pz > 0))
            up = np.repeat(np.repeat(pz, 2, axis=1), 2, axis=2)
            bits.append(np.packbits(z == up))
        if self.pooling == "max":
            bits.append(a.reshape(len(a), -1, a.shape[-1]).argmax(axis=1).astype(np.int32).view(np.uint8))
        return logit, b"".join(b.tobytes() for b in bits)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Patch probabilities for a ``(n, c, h, w)`` batch."""
        return sigmoid(self.logits(x))

    def loss_and_grads(self, x, y, w_pos: float = 1.0, w_neg: float = 1.0,
                       n_total: Optional[int] = None) -> Tuple[float, Params]:
        logit, feat, a, cache = self._forward(self._prep(x), keep=True)
        loss, dz = logit_loss(logit, np.asarray(y), w_pos, w_neg, n_total)
        dz = dz.astype(self.dtype)
        grads: Params = OrderedDict()
        grads["fc.W"] = feat.T @ dz
        grads["fc.b"] = np.array([dz.sum()], dtype=self.dtype)
        dfeat = np.outer(dz, self.params["fc.W"])
        n, h, w, c = a.shape
        if self.pooling == "avg":
            da = np.broadcast_to((dfeat / (h * w))[:, None, None, :], a.shape)
        else:
            flat = a.reshape(n, h * w, c)
            first = flat.argmax(axis=1)
            da = np.zeros_like(flat)
            np.put_along_axis(da, first[:, None, :], dfeat[:, None, :], axis=1)
            da = da.reshape(a.shape)
        for k in range(len(self.channels), 0, -1):
            cols, z, pz = cache[k - 1]
            dpz = np.where(pz > 0, da, 0).astype(self.dtype)
            dzk = maxpool2_backward(dpz, z, pz)
            da, dW, db = conv3x3_backward(dzk, cols, self.params[f"conv{k}.W"], need_dx=k > 1)
            grads[f"conv{k}.W"] = dW
            grads[f"conv{k}.b"] = db
        return loss, OrderedDict((k, grads[k]) for k in self.params)


class LogisticModel:
    """Single linear layer on the flattened patch; the closed-form gradient oracle's subject."""

    arch = "cosoco-logistic-v1"

    def __init__(self, n_features: int, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: Params = OrderedDict(
            [("fc.W", rng.normal(0, 0.01, n_features).astype(dtype)), ("fc.b", np.zeros(1, dtype))]
        )

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "LogisticModel":
        self.dtype = np.dtype(dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(self.dtype)
        return self

    def logits(self, x):
        x = np.asarray(x, dtype=self.dtype).reshape(len(x), -1)
        return x @ self.params["fc.W"] + self.params["fc.b"][0]

    def forward(self, x):
        return sigmoid(self.logits(x))

    def loss_and_grads(self, x, y, w_pos=1.0, w_neg=1.0, n_total=None):
        xf = np.asarray(x, dtype=self.dtype).reshape(len(x), -1)
        loss, dz = logit_loss(self.logits(x), np.asarray(y), w_pos, w_neg, n_total)
        return loss, OrderedDict([("fc.W", xf.T @ dz), ("fc.b", np.array([dz.sum()]))])


def batch_loss_and_grads(model, x, y, w_pos=1.0, w_neg=1.0, chunk: int = 16):
    """Full-batch loss and gradients accumulated over memory-bounded chunks."""
    n = len(x)
    total = 0.0
    acc: Optional[Params] = None
    for s in range(0, n, chunk):
        loss, g = model.loss_and_grads(x[s:s + chunk], y[s:s + chunk], w_pos, w_neg, n_total=n)
        total += loss
        if acc is None:
            acc = g
        else:
            for k in acc:
                acc[k] += g[k]
    return total, acc


def _plain_loss(z, y, w_pos, w_neg) -> float:
    # same clamped loss as logit_loss, kept in the dtype of ``z``
    lo, hi = np.log(z.dtype.type(EPS)), np.log1p(-z.dtype.type(EPS))
    lp = np.clip(-np.logaddexp(0, -z), lo, hi)
    lq = np.clip(-np.logaddexp(0, z), lo, hi)
    return -np.sum(w_pos * y * lp + w_neg * (1 - y) * lq) / len(z)


def _central_difference(model, batch, y, name, i, h, w_pos, w_neg, max_halvings=12):
    # A step that flips a ReLU or pooling branch measures a secant across the
    # kink, not the derivative; shrink until both sides share one branch.
    p = model.params[name].reshape(-1)
    old = p[i]
    pattern = getattr(model, "kink_pattern", None)
    try:
        for _ in range(max_halvings + 1):
            p[i] = old + h
            zp, kp = pattern(batch) if pattern else (model.logits(batch), b"")
            p[i] = old - h
            zm, km = pattern(batch) if pattern else (model.logits(batch), b"")
            if kp == km:
                break
            h /= 2
    finally:
        p[i] = old
    y = y.astype(zp.dtype)
    return float((_plain_loss(zp, y, w_pos, w_neg) - _plain_loss(zm, y, w_pos, w_neg)) / (2 * h))


def grad_check(model, batch, labels, h: float = 1e-5, n_samples: int = 200,
               w_pos: float = 1.0, w_neg: float = 1.0, seed: int = 0,
               oracle_dtype=np.longdouble) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_samples`` parameter coordinates spread over every tensor (all
    of them when the model is smaller). The analytic side runs in the model's
    dtype (use float64); the differences are taken on a copy in
    ``oracle_dtype`` so round-off does not swamp coordinates whose gradient is
    tiny.
    """
    y = np.asarray(labels)
    _, grads = model.loss_and_grads(batch, y, w_pos, w_neg)
    ref = copy.deepcopy(model).astype(oracle_dtype)
    batch = np.asarray(batch, dtype=oracle_dtype)
    rng = np.random.default_rng(seed)
    names = list(model.params)
    total = model.n_params()
    picks = []
    if total <= n_samples:
        for name in names:
            picks += [(name, i) for i in range(model.params[name].size)]
    else:
        for name in names:  # every tensor at least once
            picks.append((name, int(rng.integers(model.params[name].size))))
        sizes = np.array([model.params[k].size for k in names], dtype=float)
        while len(picks) < n_samples:
            name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
            picks.append((name, int(rng.integers(model.params[name].size))))
    worst = 0.0
    for name, i in picks:
        g_n = _central_difference(ref, batch, y, name, i, h, w_pos, w_neg)
        g_a = float(grads[name].reshape(-1)[i])
        err = abs(g_a - g_n) / max(abs(g_a), abs(g_n), 1e-12)
        worst = max(worst, err)
    return worst
