"""Leave-one-out soft-vote k-nearest-neighbour evaluation of embeddings.

Each sample queries all others by cosine similarity; the top-k neighbours
vote with weights ``exp(s / tau)`` and the weighted label sum is normalized
per sample (by total weight, or min-max across classes). Ties in similarity
at the k-boundary go to the lower sample index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, DataError, NumericError, RangeError
from .metrics import evaluate

DEFAULT_KS = (1, 3, 5, 10, 20)


@dataclass(frozen=True)
class KnnConfig:
    ks: tuple = DEFAULT_KS
    tau: float = 0.07
    threshold: float = 0.5
    normalization: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        if any(k < 1 for k in self.ks):
            raise ConfigError("every k must be >= 1")
        if self.normalization not in ("sum", "minmax"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector")
    return float(a @ b) / (na * nb)


def _minmax(scores):
    # rows with zero spread map to 1 where positive, else 0
    lo = scores.min(axis=1, keepdims=True)
    hi = scores.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span <= 0
    return np.where(flat, (hi > 0) * 1.0, (scores - lo) / np.where(flat, 1.0, span))


class KnnIndex:
    """Precomputed similarity matrix and neighbour ranking for one embedding set."""

    def __init__(self, features, max_k):
        x = np.ascontiguousarray(features, dtype=np.float64)
        n = x.shape[0]
        if max_k > n - 1:
            raise RangeError(f"k={max_k} needs at least {max_k + 1} samples, have {n}")
        if np.any(np.sqrt((x * x).sum(axis=1)) == 0):
            raise NumericError("zero embedding vector; cosine similarity undefined")
        self.sim = K.cosine_matrix(x)
        self.neighbors = K.rank_neighbors(self.sim, max_k)

    def scores(self, labels, k, cfg):
        lab = np.ascontiguousarray(labels, dtype=np.float64)
        nb = np.ascontiguousarray(self.neighbors[:, :k])
        s = K.soft_vote(self.sim, nb, lab, cfg.tau)
        if cfg.normalization == "minmax":
            s = _minmax(s)
        return s


def knn_soft_vote(query_index, features, labels, cfg, k):
    """Scores and binary prediction for one query against all other samples."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if k > n - 1:
        raise RangeError(f"k={k} exceeds n-1={n - 1}")
    sims = [(cosine_sim(features[query_index], features[j]), j) for j in range(n) if j != query_index]
    top = sorted(sims, key=lambda t: (-t[0], t[1]))[:k]
    w = np.array([math.exp(s / cfg.tau) for s, _ in top])
    lab = np.asarray(labels, dtype=np.float64)[[j for _, j in top]]
    raw = (w[:, None] * lab).sum(axis=0)
    scores = raw / w.sum() if cfg.normalization == "sum" else _minmax(raw[None])[0]
    return scores, (scores >= cfg.threshold).astype(np.int8)


@dataclass
class KnnResult:
    reports: dict
    scores: dict
    predictions: dict

    @property
    def macro_f1(self):
        return {k: r.macro_f1 for k, r in self.reports.items()}

    def rows(self):
        return [{"k": k, "macro_f1": r.macro_f1, "per_class_f1": r.f1}
                for k, r in sorted(self.reports.items())]


def loo_eval(features, labels, cfg=KnnConfig(), class_names=None):
    """Leave-one-out evaluation for every ``k`` in ``cfg.ks``."""
    labels = np.asarray(labels)
    if labels.shape[0] != np.asarray(features).shape[0]:
        raise DataError("features and labels disagree on sample count")
    if not labels.any(axis=1).all():
        raise DataError("every sample needs at least one positive label")
    index = KnnIndex(features, max(cfg.ks))
    reports, scores, preds = {}, {}, {}
    for k in cfg.ks:
        s = index.scores(labels, k, cfg)
        p = (s >= cfg.threshold).astype(np.int8)
        scores[k], preds[k] = s, p
        reports[k] = evaluate(labels, p, class_names)
    return KnnResult(reports, scores, preds)
