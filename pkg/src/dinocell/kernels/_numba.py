"""Numba-compiled kernels; semantics mirror ``_numpy``."""

import math

import numba as nb
import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_opts = {"nogil": True, "cache": True, "fastmath": False}


@nb.njit(parallel=True, **_opts)
def softmax_rows(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in nb.prange(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


@nb.njit(parallel=True, **_opts)
def softmax_rows_backward(y, dy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in nb.prange(n):
        s = 0.0
        for j in range(m):
            s += dy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (dy[i, j] - s)
    return out


@nb.njit(parallel=True, **_opts)
def layernorm_rows(x, gamma, beta, eps):
    n, m = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in nb.prange(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@nb.njit(parallel=True, **_opts)
def layernorm_rows_backward(dy, xhat, rstd, gamma):
    n, m = dy.shape
    dx = np.empty_like(dy)
    for i in nb.prange(n):
        a = 0.0
        b = 0.0
        for j in range(m):
            g = dy[i, j] * gamma[j]
            a += g
            b += g * xhat[i, j]
        a /= m
        b /= m
        r = rstd[i]
        for j in range(m):
            dx[i, j] = (dy[i, j] * gamma[j] - a - xhat[i, j] * b) * r
    return dx


@nb.njit(parallel=True, **_opts)
def _gelu_flat(x, out):
    for i in nb.prange(x.size):
        v = x[i]
        u = GELU_C * (v + GELU_A * v * v * v)
        out[i] = 0.5 * v * (1.0 + math.tanh(u))


@nb.njit(parallel=True, **_opts)
def _gelu_backward_flat(x, dy, out):
    for i in nb.prange(x.size):
        v = x[i]
        v2 = v * v
        t = math.tanh(GELU_C * (v + GELU_A * v2 * v))
        du = GELU_C * (1.0 + 3.0 * GELU_A * v2)
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)


def gelu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_flat(x.reshape(-1), out.reshape(-1))
    return out


def gelu_backward(x, dy):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    out = np.empty_like(x)
    _gelu_backward_flat(x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


@nb.njit(**_opts)
def _axis_weights(n_in, n_out):
    i0 = np.empty(n_out, dtype=np.int64)
    i1 = np.empty(n_out, dtype=np.int64)
    frac = np.empty(n_out, dtype=np.float64)
    scale = n_in / n_out
    for j in range(n_out):
        s = (j + 0.5) * scale - 0.5
        if s < 0.0:
            s = 0.0
        if s > n_in - 1:
            s = n_in - 1.0
        a = int(math.floor(s))
        i0[j] = a
        i1[j] = min(a + 1, n_in - 1)
        frac[j] = s - a
    return i0, i1, frac


@nb.njit(parallel=True, **_opts)
def _resize(img, out_h, out_w):
    c, h, w = img.shape
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    out = np.empty((c, out_h, out_w), dtype=img.dtype)
    for ch in nb.prange(c):
        for i in range(out_h):
            a = img.dtype.type(fr[i])
            for j in range(out_w):
                b = img.dtype.type(fc[j])
                tl = img[ch, r0[i], c0[j]]
                tr = img[ch, r0[i], c1[j]]
                bl = img[ch, r1[i], c0[j]]
                br = img[ch, r1[i], c1[j]]
                left = tl + (bl - tl) * a
                right = tr + (br - tr) * a
                out[ch, i, j] = left + (right - left) * b
    return out


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of a ``(C, H, W)`` stack with half-pixel centres."""
    return _resize(np.ascontiguousarray(img), int(out_h), int(out_w))


@nb.njit(parallel=True, **_opts)
def cosine_matrix(x):
    """All-pairs cosine similarity with sequential summation order."""
    n, d = x.shape
    norms = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for t in range(d):
            s += x[i, t] * x[i, t]
        norms[i] = math.sqrt(s)
    out = np.empty((n, n), dtype=np.float64)
    for i in nb.prange(n):
        for j in range(n):
            s = 0.0
            for t in range(d):
                s += x[i, t] * x[j, t]
            out[i, j] = s / (norms[i] * norms[j])
    return out


@nb.njit(parallel=True, **_opts)
def rank_neighbors(sim, k):
    """Top-k columns per row excluding the diagonal.

    Ordered by descending similarity, ties by ascending column index.
    """
    n = sim.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for q in nb.prange(n):
        cand = np.empty(n - 1, dtype=np.int64)
        keys = np.empty(n - 1, dtype=np.float64)
        m = 0
        for j in range(n):
            if j != q:
                cand[m] = j
                keys[m] = -sim[q, j]
                m += 1
        order = np.argsort(keys, kind="mergesort")
        for r in range(k):
            out[q, r] = cand[order[r]]
    return out


@nb.njit(parallel=True, **_opts)
def soft_vote(sim, neighbors, labels, tau):
    """Exponentially weighted neighbour label sums, normalized by total weight."""
    n, k = neighbors.shape
    n_cls = labels.shape[1]
    scores = np.zeros((n, n_cls), dtype=np.float64)
    for q in nb.prange(n):
        total = 0.0
        acc = np.zeros(n_cls, dtype=np.float64)
        for r in range(k):
            j = neighbors[q, r]
            wgt = math.exp(sim[q, j] / tau)
            total += wgt
            for c in range(n_cls):
                acc[c] += wgt * labels[j, c]
        for c in range(n_cls):
            scores[q, c] = acc[c] / total
    return scores
