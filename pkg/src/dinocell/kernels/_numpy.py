"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and
semantics. Row-wise kernels take 2-D ``(rows, cols)`` arrays.
"""

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_rows_backward(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def layernorm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_rows_backward(dy, xhat, rstd, gamma):
    g = dy * gamma
    n = xhat.shape[1]
    a = g.sum(axis=1, keepdims=True)
    b = (g * xhat).sum(axis=1, keepdims=True)
    return (g - a / n - xhat * (b / n)) * rstd[:, None]


def gelu(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x, dy):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _axis_weights(n_in, n_out):
    # half-pixel centres, edge-clamped
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of a ``(C, H, W)`` stack with half-pixel centres."""
    _, h, w = img.shape
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr.astype(img.dtype)[None, :, None]
    fc = fc.astype(img.dtype)[None, None, :]
    top = img[:, r0, :]
    bot = img[:, r1, :]
    rows = top + (bot - top) * fr
    left = rows[:, :, c0]
    right = rows[:, :, c1]
    return left + (right - left) * fc


def _seq_sum(v, axis):
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise tree
    return np.cumsum(v, axis=axis).take(-1, axis=axis)


def cosine_matrix(x):
    """All-pairs cosine similarity with sequential summation order."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(_seq_sum(x * x, axis=1))
    n = x.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    block = max(1, 4_000_000 // max(1, n * x.shape[1]))
    for start in range(0, n, block):
        stop = min(n, start + block)
        dots = _seq_sum(x[start:stop, None, :] * x[None, :, :], axis=2)
        out[start:stop] = dots / (norms[start:stop, None] * norms[None, :])
    return out


def rank_neighbors(sim, k):
    """Top-k columns per row excluding the diagonal.

    Ordered by descending similarity, ties by ascending column index.
    """
    s = sim.copy()
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def soft_vote(sim, neighbors, labels, tau):
    """Exponentially weighted neighbour label sums, normalized by total weight."""
    n, k = neighbors.shape
    n_cls = labels.shape[1]
    scores = np.zeros((n, n_cls), dtype=np.float64)
    for q in range(n):
        total = 0.0
        acc = np.zeros(n_cls, dtype=np.float64)
        for r in range(k):
            j = neighbors[q, r]
            wgt = math.exp(sim[q, j] / tau)
            total += wgt
            acc += wgt * labels[j]
        scores[q] = acc / total
    return scores
