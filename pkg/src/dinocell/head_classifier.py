"""Supervised evaluation head trained on frozen embeddings.

Features are standardized with training-split statistics, batches are drawn
with replacement at probabilities inverse to each sample's rarest label, and
a ReLU MLP with dropout is fit with AdamW, cosine annealing and binary
cross-entropy on logits.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ctf
from .checkpoint import ModelState, register_config
from .errors import ConfigError, DataError, NumericError, ResolutionError, ShapeError
from .metrics import evaluate
from .numerics import (
    DEFAULT_DTYPE,
    OptimizerState,
    Schedule,
    adamw_step,
    bce_with_logits,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    schedule_value,
    sigmoid,
)

STD_EPS = 1e-8


# ----------------------------------------------------------------- embeddings


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    ids: list
    labels: np.ndarray
    class_names: list = field(default_factory=list)
    grades: np.ndarray | None = None
    split: str | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.matrix.ndim != 2 or self.labels.ndim != 2:
            raise ShapeError("matrix and labels must both be 2-D")
        n = self.matrix.shape[0]
        if len(self.ids) != n or self.labels.shape[0] != n:
            raise ShapeError(
                f"row counts disagree: matrix {n}, ids {len(self.ids)}, labels {self.labels.shape[0]}")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0/1")
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.labels.shape[1])]
        if self.grades is not None:
            self.grades = np.asarray(self.grades, dtype=np.int8)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def take(self, rows, split=None):
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingSet(
            self.matrix[rows],
            [self.ids[i] for i in rows],
            self.labels[rows],
            list(self.class_names),
            None if self.grades is None else self.grades[rows],
            split if split is not None else self.split,
        )

    def subset_ids(self, ids, split=None):
        pos = {s: i for i, s in enumerate(self.ids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise DataError(f"unknown sample ids: {missing[:5]}")
        return self.take([pos[s] for s in ids], split)

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ctf.save(root / "emb.ctf", self.matrix.astype(np.float32))
        side = {
            "ids": list(self.ids),
            "class_names": list(self.class_names),
            "labels": self.labels.tolist(),
            "grades": None if self.grades is None else self.grades.tolist(),
            "split": self.split,
        }
        (root / "emb.json").write_text(json.dumps(side))

    @classmethod
    def load(cls, root):
        root = Path(root)
        if not (root / "emb.json").exists():
            raise ResolutionError(str(root / "emb.json"), "embedding sidecar")
        side = json.loads((root / "emb.json").read_text())
        mat = ctf.load(root / "emb.ctf")
        return cls(mat, side["ids"], np.array(side["labels"], dtype=np.int8).reshape(len(side["ids"]), -1),
                   side["class_names"], None if side["grades"] is None else np.array(side["grades"]),
                   side.get("split"))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    eps: float = STD_EPS

    @classmethod
    def fit(cls, x, eps=STD_EPS):
        x = np.asarray(x.matrix if isinstance(x, EmbeddingSet) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("cannot fit a standardizer on an empty set")
        mean = x.mean(axis=0)
        std = np.maximum(np.sqrt(((x - mean) ** 2).mean(axis=0)), eps)
        return cls(mean, std, eps)

    def apply(self, x):
        if isinstance(x, EmbeddingSet):
            out = self.apply(x.matrix)
            return EmbeddingSet(out, x.ids, x.labels, x.class_names, x.grades, x.split)
        x = np.asarray(x)
        if x.shape[-1] != self.mean.shape[0]:
            raise ShapeError(f"expected dim {self.mean.shape[0]}, got {x.shape[-1]}")
        return ((x - self.mean) / self.std).astype(x.dtype if x.dtype.kind == "f" else np.float64)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), d["eps"])


def fit_standardizer(train):
    return Standardizer.fit(train)


def drop_unlabeled(es):
    """Remove samples without any positive label, warning when any are dropped."""
    keep = es.labels.any(axis=1)
    if keep.all():
        return es
    warnings.warn(f"excluding {int((~keep).sum())} samples without a positive label", stacklevel=2)
    return es.take(np.flatnonzero(keep))


def resample_weights(labels):
    """Sampling probability per sample, proportional to 1 / count of its rarest label."""
    y = np.asarray(labels).astype(bool)
    if y.ndim != 2:
        raise ShapeError("labels must be (n_samples, n_classes)")
    if not y.any(axis=1).all():
        raise DataError("every sample needs at least one positive label")
    counts = y.sum(axis=0).astype(np.float64)
    rarest = np.where(y, counts[None, :], np.inf).min(axis=1)
    w = 1.0 / rarest
    return w / w.sum()


# ----------------------------------------------------------------- the head


@register_config("mlp_head")
@dataclass(frozen=True)
class HeadConfig:
    in_dim: int
    n_classes: int = 17
    hidden: tuple = (512, 256)
    dropout: float = 0.5
    epochs: int = 300
    batch_size: int = 512
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.04
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.n_classes < 1:
            raise ConfigError("in_dim and n_classes must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def dims(self):
        return (self.in_dim, *self.hidden, self.n_classes)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_head(cfg, seed=0, dtype=DEFAULT_DTYPE):
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
    rng = np.random.default_rng(seed)
    params = {}
    dims = cfg.dims
    for i in range(len(dims) - 1):
        bound = 1.0 / math.sqrt(dims[i])
        params[f"fc{i}.weight"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1])).astype(dtype)
        params[f"fc{i}.bias"] = rng.uniform(-bound, bound, dims[i + 1]).astype(dtype)
    return ModelState(cfg, params)


def head_forward(head, x, train=False, rng=None):
    """Logits for a feature batch; dropout follows each hidden ReLU in train mode."""
    cfg = head.config
    p = head.params
    x = np.asarray(x)
    if x.shape[-1] != cfg.in_dim:
        raise ShapeError(f"head expects input dim {cfg.in_dim}, got {x.shape[-1]}")
    n_layers = len(cfg.dims) - 1
    caches = []
    h = x
    for i in range(n_layers):
        z = linear_forward(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i == n_layers - 1:
            caches.append((h, None, None))
            h = z
            break
        a = relu_forward(z)
        d, mask = dropout_forward(a, cfg.dropout, rng, train)
        caches.append((h, z, mask))
        h = d
    return h, caches


def head_backward(head, caches, dlogits):
    p = head.params
    grads = {}
    dy = dlogits
    for i in reversed(range(len(caches))):
        h_in, z, mask = caches[i]
        if z is not None:
            dy = relu_backward(dropout_backward(dy, mask), z)
        dx, grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = linear_backward(
            dy, h_in, p[f"fc{i}.weight"])
        dy = dx
    return grads, dy


def predict(head, x, threshold=None):
    """``(predictions, scores)``: sigmoid scores and ``score >= threshold`` per class."""
    threshold = head.config.threshold if threshold is None else threshold
    logits, _ = head_forward(head, x.matrix if isinstance(x, EmbeddingSet) else x)
    scores = sigmoid(logits.astype(np.float64))
    return (scores >= threshold).astype(np.int8), scores


@dataclass
class HeadResult:
    head: ModelState
    standardizer: Standardizer
    trace: list

    def predict(self, es, threshold=None):
        return predict(self.head, self.standardizer.apply(es), threshold)

    def evaluate(self, es, threshold=None):
        pred, _ = self.predict(es, threshold)
        return evaluate(es.labels, pred, es.class_names)


def train_head(train, val=None, cfg=None, seed=0, on_epoch=None):
    """Fit a head on ``train``; ``val`` only feeds the per-epoch metric trace.

    The standardizer is fitted on ``train`` alone. Returns a HeadResult whose
    trace holds ``{epoch, loss, lr, train_macro_f1, val_macro_f1}`` rows.
    """
    if train.split == "test" or (val is not None and val.split == "test"):
        raise DataError("test rows may not be used for head training or its trace")
    train = drop_unlabeled(train)
    if len(train) == 0:
        raise DataError("empty training set")
    cfg = cfg or HeadConfig(in_dim=train.dim, n_classes=train.labels.shape[1])
    if cfg.in_dim != train.dim or cfg.n_classes != train.labels.shape[1]:
        raise ShapeError(
            f"head is {cfg.in_dim}->{cfg.n_classes}, data is {train.dim}->{train.labels.shape[1]}")
    std = Standardizer.fit(train)
    xt = std.apply(train.matrix.astype(np.float64)).astype(DEFAULT_DTYPE)
    yt = train.labels.astype(DEFAULT_DTYPE)
    xv = None if val is None else std.apply(val.matrix.astype(np.float64)).astype(DEFAULT_DTYPE)
    ss = np.random.SeedSequence(seed)
    init_seed, sample_seed, drop_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    head = init_head(cfg, init_seed)
    opt = OptimizerState.for_params(head.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    no_decay = {k for k, v in head.params.items() if v.ndim == 1}
    probs = resample_weights(train.labels)
    sample_rng = np.random.default_rng(sample_seed)
    drop_rng = np.random.default_rng(drop_seed)
    n = len(train)
    bs = min(cfg.batch_size, n)
    steps = math.ceil(n / bs)
    sched = Schedule("cosine-annealing", cfg.lr, cfg.min_lr, max(cfg.epochs, 1))
    trace = []
    for epoch in range(cfg.epochs):
        lr = schedule_value(sched, epoch)
        draw = sample_rng.choice(n, size=n, replace=True, p=probs)
        losses = []
        for s in range(steps):
            idx = draw[s * bs:(s + 1) * bs]
            logits, caches = head_forward(head, xt[idx], train=True, rng=drop_rng)
            loss, dlog = bce_with_logits(logits, yt[idx])
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite head loss at epoch {epoch} step {s} (lr={lr:.3g}, "
                    f"max |logit|={float(np.nanmax(np.abs(logits))):.3g})")
            grads, _ = head_backward(head, caches, dlog)
            adamw_step(opt, head.params, grads, lr=lr, no_decay=no_decay)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
               "train_macro_f1": evaluate(train.labels, predict(head, xt)[0]).macro_f1}
        if xv is not None:
            row["val_macro_f1"] = evaluate(val.labels, predict(head, xv)[0]).macro_f1
        trace.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return HeadResult(head, std, trace)
