"""Differentiable op kernel, optimizers, schedules and gradient checking.

Tensors are plain ``numpy.ndarray`` objects. Every differentiable op comes as
a ``*_forward`` / ``*_backward`` pair (or a function returning the value
together with its input gradient) so networks can be assembled by hand.
Training runs in float32; gradient checks run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, NumericError, RangeError, ShapeError

DEFAULT_DTYPE = np.float32
PROB_FLOOR = 1e-12
LN_EPS = 1e-6


def _rows(x):
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------- elementwise


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w, need_dx=True):
    """Return ``(dx, dw, db)`` for ``y = x @ w + b`` with ``x`` of shape ``(..., in)``."""
    d2 = _rows(dy)
    dw = _rows(x).T @ d2
    db = d2.sum(axis=0)
    dx = dy @ w.T if need_dx else None
    return dx, dw, db


def matmul_backward(dy, a, b):
    """Gradients of ``a @ b`` for batched operands."""
    return dy @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dy


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    shape = x.shape
    y, xhat, rstd = K.layernorm_rows(np.ascontiguousarray(_rows(x)), gamma, beta, eps)
    return y.reshape(shape), (xhat, rstd, shape)


def layer_norm_backward(dy, cache, gamma):
    xhat, rstd, shape = cache
    d2 = np.ascontiguousarray(_rows(dy))
    dx = K.layernorm_rows_backward(d2, xhat, rstd, gamma)
    dgamma = (d2 * xhat).sum(axis=0)
    dbeta = d2.sum(axis=0)
    return dx.reshape(shape), dgamma, dbeta


def gelu_forward(x):
    """GELU, tanh approximation."""
    return K.gelu(x)


def gelu_backward(dy, x):
    return K.gelu_backward(x, dy)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def dropout_forward(x, p, rng=None, train=False):
    """Inverted dropout: kept units are scaled by ``1/(1-p)`` at train time only."""
    if not train or p <= 0.0:
        return x, None
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def softmax_forward(x):
    """Softmax over the last axis."""
    shape = x.shape
    return K.softmax_rows(np.ascontiguousarray(_rows(x))).reshape(shape)


def softmax_backward(dy, y):
    shape = y.shape
    return K.softmax_rows_backward(
        np.ascontiguousarray(_rows(y)), np.ascontiguousarray(_rows(dy))
    ).reshape(shape)


# --------------------------------------------------------------- probability


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def softmax_temp(logits, tau):
    """Temperature softmax over the last axis, max-subtracted for stability."""
    _check_tau(tau)
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if logits.dtype.kind != "f":
        logits = logits.astype(np.float64)
    return softmax_forward(logits / logits.dtype.type(tau))


def softmax_temp_backward(dy, probs, tau):
    return softmax_backward(dy, probs) / probs.dtype.type(tau)


def log_softmax_temp(logits, tau):
    z = logits / logits.dtype.type(tau)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_soft(p_target, p_pred):
    """``-sum(p_target * log(p_pred))`` over the last axis, log floored at 1e-12."""
    p_target = np.asarray(p_target)
    p_pred = np.asarray(p_pred)
    if p_target.shape != p_pred.shape:
        raise ShapeError(f"length mismatch {p_target.shape} vs {p_pred.shape}")
    return -(p_target * np.log(np.maximum(p_pred, PROB_FLOOR))).sum(axis=-1)


def cross_entropy_soft_backward(dy, p_target, p_pred):
    """Gradient w.r.t. ``p_pred`` (zero below the clamp floor)."""
    dy = np.asarray(dy)[..., None]
    inside = p_pred > PROB_FLOOR
    return np.where(inside, -dy * p_target / np.maximum(p_pred, PROB_FLOOR), 0.0)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on logits; returns ``(loss, dlogits)``.

    Uses ``max(x,0) - x*t + log1p(exp(-|x|))``.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    n = logits.size
    sig = sigmoid(logits)
    return float(per.mean()), ((sig - targets) / n).astype(logits.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        x.dtype if x.dtype.kind == "f" else np.float64, copy=False
    )


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """AdamW moments for a named parameter set.

    Decoupled decay is applied before the adaptive step:
    ``w <- w * (1 - lr*wd)`` then the bias-corrected Adam update.
    """

    lr: float = 1e-4
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        st = cls(**hyper)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        return st


def adamw_step(state, params, grads, lr=None, no_decay=()):
    """One AdamW update of ``params`` (a name -> array dict) in place.

    ``lr`` overrides ``state.lr`` for this step (schedules). Names listed in
    ``no_decay`` skip weight decay.
    """
    if set(grads) - set(params):
        raise ShapeError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {w.shape}")
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        wd = 0.0 if name in no_decay else state.weight_decay
        if wd:
            w *= 1.0 - lr * wd
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_grad_norm(grads, max_norm):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= s
    return total


# ----------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Schedule:
    """Cosine interpolation from ``start`` (step 0) to ``end`` (step ``total``).

    ``kind`` is ``"cosine-annealing"`` (typically decreasing, learning rates)
    or ``"cosine-ramp"`` (typically increasing, the EMA momentum); the formula
    is shared. An optional linear warmup from 0 precedes the cosine part.
    """

    kind: str
    start: float
    end: float
    total: int
    warmup: int = 0

    def __post_init__(self):
        if self.kind not in ("cosine-annealing", "cosine-ramp"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.total < 0 or not 0 <= self.warmup <= self.total:
            raise ConfigError(f"bad schedule lengths total={self.total} warmup={self.warmup}")


def schedule_value(s, step):
    if not 0 <= step <= s.total:
        raise RangeError(f"step {step} outside [0, {s.total}]")
    if step < s.warmup:
        return s.start * step / s.warmup
    span = s.total - s.warmup
    if span == 0:
        return s.end
    frac = (step - s.warmup) / span
    return s.end + (s.start - s.end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ------------------------------------------------------------- gradient check


def grad_check(fn, point, eps=1e-6, coords=None, rng=None, elementwise=False):
    """Relative error between an analytic gradient and central differences.

    ``fn(x) -> (scalar, grad)`` must work in float64. ``coords`` limits the
    check to that many randomly chosen coordinates (all by default). The
    default measure is ``|a - n| / max(|a|, |n|)`` over the vector of checked
    coordinates; ``elementwise=True`` returns the worst per-coordinate ratio
    instead, which is dominated by difference noise on near-zero entries.
    """
    x = np.array(point, dtype=np.float64)
    f0, g = fn(x.copy())
    g = np.asarray(g, dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} != point shape {x.shape}")
    if not (np.isfinite(f0) and np.all(np.isfinite(g))):
        raise NumericError("non-finite value or gradient")
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(flat.size, size=coords, replace=False)
    ana = g.reshape(-1)[idx]
    num = np.empty(len(idx))
    for n, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + eps
        fp, _ = fn(x.copy())
        flat[i] = keep - eps
        fm, _ = fn(x.copy())
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite output at coordinate {i}")
        num[n] = (fp - fm) / (2.0 * eps)
    if elementwise:
        den = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        return float((np.abs(ana - num) / den).max())
    den = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
    return float(np.linalg.norm(ana - num) / den)


def scalarize(forward, backward, out_shape, rng):
    """Wrap a vector op as ``x -> (sum(r*op(x)), grad)`` with fixed random ``r``."""
    r = rng.standard_normal(out_shape)

    def fn(x):
        y, cache = forward(x)
        return float((r * y).sum()), backward(r, cache)

    return fn
