"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def seq_dot_matrix(x):
    # left-to-right summation over the feature axis
    prods = x[:, None, :] * x[None, :, :]
    return np.cumsum(prods, axis=2)[..., -1]


def brute_force_loo(x, labels, k, tau, threshold=0.5):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = x.shape[0]
    dots = seq_dot_matrix(x)
    norms = [math.sqrt(dots[i, i]) for i in range(n)]
    scores = np.zeros_like(labels)
    for q in range(n):
        sims = [(dots[q, j] / (norms[q] * norms[j]), j) for j in range(n) if j != q]
        sims.sort(key=lambda t: (-t[0], t[1]))
        total = 0.0
        acc = np.zeros(labels.shape[1])
        for s, j in sims[:k]:
            w = math.exp(s / tau)
            total += w
            acc += w * labels[j]
        scores[q] = acc / total
    return scores, (scores >= threshold).astype(np.int8)


def naive_prf(y_true, y_pred):
    """Per-class (precision, recall, f1) by explicit counting."""
    n, c = len(y_true), len(y_true[0])
    out = []
    for j in range(c):
        tp = sum(1 for i in range(n) if y_true[i][j] and y_pred[i][j])
        fp = sum(1 for i in range(n) if not y_true[i][j] and y_pred[i][j])
        fn = sum(1 for i in range(n) if y_true[i][j] and not y_pred[i][j])
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out.append((p, r, f))
    return out
