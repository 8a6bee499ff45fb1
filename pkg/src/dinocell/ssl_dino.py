"""DINO self-distillation: multi-crop views, projection head, loss, EMA teacher.

The student sees all views, the teacher only the two global ones. The
student minimizes the summed cross-entropy between teacher and student
distributions over every (global, other view) pair; the teacher follows the
student by an exponential moving average whose momentum ramps to 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as K
from .backbone import (
    BackboneConfig,
    init_params,
    no_decay_names,
    preset,
    trunc_normal,
    vit_backward,
    vit_forward,
)
from .channel_adapt import channel_map_apply
from .checkpoint import ModelState, register_config
from .errors import ConfigError, ContractError, DataError, NumericError, RangeError, ShapeError
from .numerics import (
    DEFAULT_DTYPE,
    OptimizerState,
    Schedule,
    adamw_step,
    clip_grad_norm,
    gelu_backward,
    gelu_forward,
    linear_backward,
    linear_forward,
    log_softmax_temp,
    schedule_value,
    softmax_temp,
)

log = logging.getLogger(__name__)

PAPER_GLOBAL_SIZE = 224
PAPER_LOCAL_SIZE = 96


@dataclass
class DinoConfig:
    backbone: BackboneConfig = field(default_factory=lambda: preset("vit-tiny/4", 2))
    tau_s: float = 0.1
    tau_t: float = 0.04
    out_dim: int = 1024
    head_hidden: tuple = (256, 256)
    head_bottleneck: int = 256
    n_local_crops: int = 8
    global_size: int = 64
    global_scale: tuple = (0.4, 1.0)
    local_size: int = 32
    local_scale: tuple = (0.05, 0.4)
    flip_prob: float = 0.5
    warp: bool = False
    warp_max_disp: float = 4.0
    centering: bool = True
    center_momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    lambda_base: float = 0.996
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    clip_grad: float | None = 3.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        self.head_hidden = tuple(self.head_hidden)
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        if not 0 < self.tau_t <= self.tau_s:
            raise ConfigError(f"need 0 < tau_t <= tau_s, got {self.tau_t}, {self.tau_s}")
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"scale range ({lo}, {hi}) not inside (0, 1]")
        if not self.local_size < self.global_size:
            raise ConfigError("local crops must be smaller than global crops")
        if self.global_size != self.backbone.image_size:
            raise ConfigError(
                f"global_size {self.global_size} != backbone image_size {self.backbone.image_size}")
        if self.local_size % self.backbone.patch_size:
            raise ConfigError("local_size must be a multiple of the patch size")
        if self.n_local_crops < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad n_local_crops / epochs / batch_size")
        if not 0 <= self.lambda_base <= 1:
            raise ConfigError("lambda_base must lie in [0, 1]")

    @classmethod
    def paper(cls, **kw):
        """Full-scale crop geometry (224 / 96 px) on a 4-channel ViT-base/8."""
        kw.setdefault("backbone", preset("vit-base/8", 4))
        return cls(global_size=PAPER_GLOBAL_SIZE, local_size=PAPER_LOCAL_SIZE, **kw)

    @property
    def n_views(self):
        return 2 + self.n_local_crops

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DinoConfig fields {sorted(unknown)}")
        return cls(**d)


# -------------------------------------------------------------------- views


@dataclass
class ViewSet:
    globals: list
    locals: list
    source_id: str = ""

    def __post_init__(self):
        if len(self.globals) != 2:
            raise ContractError("a view set holds exactly two global views")

    @property
    def views(self):
        return list(self.globals) + list(self.locals)

    def __len__(self):
        return 2 + len(self.locals)


def random_resized_crop(planes, out_size, scale, rng, ratio=(3 / 4, 4 / 3), tries=10):
    """Crop a random region covering a ``scale`` fraction of the area, resize to ``out_size``."""
    _, h, w = planes.shape
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(tries):
        target = area * rng.uniform(*scale)
        r = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * r)))
        ch = int(round(math.sqrt(target / r)))
        if 0 < cw <= w and 0 < ch <= h:
            i = int(rng.integers(0, h - ch + 1))
            j = int(rng.integers(0, w - cw + 1))
            break
    else:
        # central crop at the nearest admissible aspect ratio
        r = w / h
        if r < ratio[0]:
            cw, ch = w, int(round(w / ratio[0]))
        elif r > ratio[1]:
            ch, cw = h, int(round(h * ratio[1]))
        else:
            cw, ch = w, h
        if cw < 1 or ch < 1:
            raise DataError(f"degenerate crop on a {h}x{w} image")
        i, j = (h - ch) // 2, (w - cw) // 2
    crop = np.ascontiguousarray(planes[:, i:i + ch, j:j + cw])
    return K.resize_bilinear(crop, out_size, out_size)


def elastic_warp(planes, rng, max_disp=4.0, grid=4):
    """Smooth random displacement from a coarse control grid, bilinear resampling."""
    from scipy.ndimage import map_coordinates

    _, h, w = planes.shape
    ctrl = rng.uniform(-max_disp, max_disp, size=(2, grid, grid))
    disp = K.resize_bilinear(ctrl, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + disp[0], xx + disp[1]])
    return np.stack([map_coordinates(p, coords, order=1, mode="nearest") for p in planes]).astype(
        planes.dtype)


def _augment(planes, size, scale, cfg, rng):
    v = random_resized_crop(planes, size, scale, rng)
    if cfg.warp:
        v = elastic_warp(v, rng, cfg.warp_max_disp)
    if rng.random() < cfg.flip_prob:
        v = v[:, :, ::-1]
    if rng.random() < cfg.flip_prob:
        v = v[:, ::-1, :]
    return np.ascontiguousarray(v)


def make_views(image, cfg, seed):
    """Two global and ``cfg.n_local_crops`` local augmented views of one sample."""
    planes = image.planes if hasattr(image, "planes") else np.asarray(image)
    sid = getattr(image, "id", "")
    if planes.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got {planes.shape}")
    if min(planes.shape[1:]) < cfg.local_size:
        raise ShapeError(f"image {planes.shape[1:]} smaller than local crop {cfg.local_size}")
    rng = np.random.default_rng(seed)
    g = [_augment(planes, cfg.global_size, cfg.global_scale, cfg, rng) for _ in range(2)]
    loc = [_augment(planes, cfg.local_size, cfg.local_scale, cfg, rng)
           for _ in range(cfg.n_local_crops)]
    return ViewSet(g, loc, sid)


# ---------------------------------------------------------- projection head


@register_config("dino_head")
@dataclass(frozen=True)
class DinoHeadConfig:
    """GELU MLP ``in_dim -> hidden... -> bottleneck``, L2 normalization, then a
    weight-normalized prototype layer ``bottleneck -> out_dim``.

    The prototype columns have unit norm, so logits are cosines in [-1, 1].
    """

    in_dim: int
    hidden: tuple = (256, 256)
    out_dim: int = 1024
    bottleneck: int = 256

    def to_dict(self):
        return {"in_dim": self.in_dim, "hidden": list(self.hidden), "out_dim": self.out_dim,
                "bottleneck": self.bottleneck}

    @classmethod
    def from_dict(cls, d):
        return cls(d["in_dim"], tuple(d["hidden"]), d["out_dim"], d.get("bottleneck", 256))

    @property
    def dims(self):
        return (self.in_dim,) + tuple(self.hidden) + (self.bottleneck,)


NORM_EPS = 1e-12


def init_dino_head(cfg, seed=0, dtype=DEFAULT_DTYPE):
    rng = np.random.default_rng(seed)
    p = {}
    d = cfg.dims
    for i in range(len(d) - 1):
        p[f"layers.{i}.weight"] = trunc_normal(rng, (d[i], d[i + 1]), dtype=dtype)
        p[f"layers.{i}.bias"] = np.zeros(d[i + 1], dtype=dtype)
    p["last_layer.weight"] = trunc_normal(rng, (cfg.bottleneck, cfg.out_dim), dtype=dtype)
    return ModelState(cfg, p)


def _l2n(x, axis):
    n = np.maximum(np.sqrt((x * x).sum(axis=axis, keepdims=True)), NORM_EPS)
    return x / n, n


def _l2n_backward(dy, y, n, axis):
    return (dy - y * (y * dy).sum(axis=axis, keepdims=True)) / n


def dino_head_forward(head, x, train=False):
    """Projection head; returns ``(logits, cache or None)``."""
    n = len(head.config.dims) - 1
    if x.shape[-1] != head.config.in_dim:
        raise ShapeError(f"head expects {head.config.in_dim}-dim input, got {x.shape[-1]}")
    p = head.params
    acts = []
    h = x
    for i in range(n):
        z = linear_forward(h, p[f"layers.{i}.weight"], p[f"layers.{i}.bias"])
        acts.append((h, z))
        h = gelu_forward(z) if i < n - 1 else z
    u, un = _l2n(h, -1)
    w, wn = _l2n(p["last_layer.weight"], 0)
    logits = u @ w
    return logits, ((acts, u, un, w, wn) if train else None)


def dino_head_backward(head, cache, dy):
    """Gradients for the head parameters and its input."""
    p = head.params
    acts, u, un, w, wn = cache
    grads = {}
    dw = _rows(u).T @ _rows(dy)
    grads["last_layer.weight"] = _l2n_backward(dw, w, wn, 0)
    g = _l2n_backward(dy @ w.T, u, un, -1)
    n = len(acts)
    for i in reversed(range(n)):
        h, z = acts[i]
        if i < n - 1:
            g = gelu_backward(g, z)
        g, grads[f"layers.{i}.weight"], grads[f"layers.{i}.bias"] = linear_backward(
            g, h, p[f"layers.{i}.weight"], need_dx=True)
    return grads, g


def _rows(x):
    return x.reshape(-1, x.shape[-1])


# --------------------------------------------------------------------- loss


def loss_pairs(n_views):
    """(teacher global index, student view index) pairs entering the loss."""
    return [(i, j) for i in range(2) for j in range(n_views) if j != i]


def teacher_probs(teacher_logits, tau_t, center=None):
    t = teacher_logits if center is None else teacher_logits - center
    return softmax_temp(t, tau_t)


def dino_loss(teacher_logits, student_logits, tau_s, tau_t, center=None):
    """Summed pairwise cross-entropy, averaged over the batch.

    ``teacher_logits``: ``(2, B, K)`` for the two global views;
    ``student_logits``: ``(V, B, K)`` with views 0 and 1 the same globals.
    Returns ``(loss, d loss / d student_logits)``; the teacher gets no gradient.
    """
    teacher_logits = np.asarray(teacher_logits)
    student_logits = np.asarray(student_logits)
    if teacher_logits.ndim == 2:
        teacher_logits = teacher_logits[:, None]
        student_logits = student_logits[:, None]
        squeeze = True
    else:
        squeeze = False
    if teacher_logits.shape[0] != 2:
        raise ContractError(f"need teacher logits for exactly 2 global views, got {teacher_logits.shape[0]}")
    v, b, k = student_logits.shape
    if v < 2 or teacher_logits.shape[1:] != (b, k):
        raise ContractError("student logits must cover both global views with matching batch/K")
    pt = teacher_probs(teacher_logits, tau_t, center)
    logq = log_softmax_temp(student_logits, tau_s)
    q = np.exp(logq)
    total = 0.0
    for i, j in loss_pairs(v):
        total += float(-(pt[i] * logq[j]).sum())
    loss = total / b
    n_teach = np.full(v, 2.0, dtype=q.dtype)
    n_teach[:2] = 1.0
    psum = np.zeros_like(q)
    psum[0] = pt[1]
    psum[1] = pt[0]
    psum[2:] = pt[0] + pt[1]
    grad = (n_teach[:, None, None] * q - psum) / (tau_s * b)
    grad = grad.astype(student_logits.dtype, copy=False)
    return loss, (grad[:, 0] if squeeze else grad)


def update_center(center, teacher_logits, momentum):
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean


# ---------------------------------------------------------------------- EMA


def ema_update(teacher, student, lam):
    """In place: every teacher tensor becomes ``lam*teacher + (1-lam)*student``."""
    if not 0.0 <= lam <= 1.0:
        raise RangeError(f"lambda must lie in [0, 1], got {lam}")
    tp = teacher.params if hasattr(teacher, "params") else teacher
    sp = student.params if hasattr(student, "params") else student
    if set(tp) != set(sp):
        raise ContractError(f"parameter names differ: {sorted(set(tp) ^ set(sp))}")
    for name, t in tp.items():
        s = sp[name]
        if t.shape != s.shape:
            raise ContractError(f"{name}: teacher {t.shape} vs student {s.shape}")
        tp[name] = (lam * t + (1.0 - lam) * s).astype(t.dtype, copy=False)
    return teacher


# ----------------------------------------------------------------- training


@dataclass
class SSLResult:
    teacher: ModelState
    student: ModelState
    trace: list
    teacher_head: ModelState | None = None

    def epoch_losses(self):
        by = {}
        for row in self.trace:
            by.setdefault(row["epoch"], []).append(row["loss"])
        return [float(np.mean(by[e])) for e in sorted(by)]


def _split(params):
    bb = {k[9:]: v for k, v in params.items() if k.startswith("backbone.")}
    hd = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
    return bb, hd


def _stack_views(view_sets):
    g = np.stack([np.stack([vs.globals[i] for vs in view_sets]) for i in range(2)])
    n_loc = len(view_sets[0].locals)
    loc = (np.stack([np.stack([vs.locals[i] for vs in view_sets]) for i in range(n_loc)])
           if n_loc else None)
    return g, loc


def lr_schedule(cfg, total_steps):
    warm = int(round(cfg.warmup_frac * total_steps))
    return Schedule("cosine-annealing", cfg.lr, cfg.min_lr, total_steps, warmup=warm)


def lambda_schedule(cfg, total_steps):
    return Schedule("cosine-ramp", cfg.lambda_base, 1.0, total_steps)


def ssl_train(images, cfg, init=None, adapter=None, channels=None, seed=0, ids=None,
              on_step=None, on_update=None):
    """Run DINO on an image stack ``(n, C, H, W)`` (intensities normalized).

    ``init`` (a backbone ModelState) switches to fine-tuning: student and
    teacher both start from it. ``adapter`` is a ChannelMap applied to every
    sample before view generation (``channels`` names the stack's planes).
    ``on_step(row)`` receives each trace row; ``on_update(step, student,
    teacher, lam)`` sees the live parameter dicts right after the EMA update.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("ssl_train needs a non-empty (n, C, H, W) stack")
    if adapter is not None:
        images = channel_map_apply(images, adapter, channels)
    bcfg = cfg.backbone
    if images.shape[1] != bcfg.input_channels:
        raise ConfigError(
            f"samples have {images.shape[1]} channels, backbone expects {bcfg.input_channels}")
    if init is not None and init.config != bcfg:
        raise ConfigError(f"init checkpoint config {init.config} != {bcfg}")
    ss = np.random.SeedSequence(seed)
    init_seed, head_seed, order_seed, view_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    rng = np.random.default_rng(init_seed)
    bb = ({k: v.astype(DEFAULT_DTYPE, copy=True) for k, v in init.params.items()}
          if init is not None else init_params(bcfg, rng))
    head = init_dino_head(
        DinoHeadConfig(bcfg.embed_dim, cfg.head_hidden, cfg.out_dim, cfg.head_bottleneck), head_seed)
    student = {**{"backbone." + k: v for k, v in bb.items()},
               **{"head." + k: v for k, v in head.params.items()}}
    teacher = {k: v.copy() for k, v in student.items()}
    no_decay = {"backbone." + n for n in no_decay_names(bb)} | {
        "head." + n for n, v in head.params.items() if v.ndim == 1} | {"head.last_layer.weight"}
    opt = OptimizerState.for_params(student, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                    beta1=cfg.beta1, beta2=cfg.beta2)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    lr_s, lam_s = lr_schedule(cfg, max(total, 1)), lambda_schedule(cfg, max(total, 1))
    center = np.zeros(cfg.out_dim, dtype=DEFAULT_DTYPE)
    order_rng = np.random.default_rng(order_seed)
    trace = []
    step = 0
    hcfg = head.config
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            vsets = [make_views(images[i], cfg, (view_seed, epoch, int(i))) for i in idx]
            g, loc = _stack_views(vsets)
            b = len(idx)
            s_bb, s_hd = _split(student)
            t_bb, t_hd = _split(teacher)
            s_bb, s_hd = ModelState(bcfg, s_bb), ModelState(hcfg, s_hd)
            t_bb, t_hd = ModelState(bcfg, t_bb), ModelState(hcfg, t_hd)
            g_flat = g.reshape((2 * b,) + g.shape[2:])
            temb, _ = vit_forward(t_bb, g_flat)
            tlog, _ = dino_head_forward(t_hd, temb)
            tlog = tlog.reshape(2, b, -1)
            emb_g, cache_g = vit_forward(s_bb, g_flat, train=True)
            out_g, hc_g = dino_head_forward(s_hd, emb_g, train=True)
            slog = [out_g.reshape(2, b, -1)]
            if loc is not None:
                l_flat = loc.reshape((-1,) + loc.shape[2:])
                emb_l, cache_l = vit_forward(s_bb, l_flat, train=True, allow_smaller=True)
                out_l, hc_l = dino_head_forward(s_hd, emb_l, train=True)
                slog.append(out_l.reshape(cfg.n_local_crops, b, -1))
            slog = np.concatenate(slog, axis=0)
            lr = schedule_value(lr_s, step)
            lam = schedule_value(lam_s, step)
            loss, dlog = dino_loss(tlog, slog, cfg.tau_s, cfg.tau_t,
                                   center if cfg.centering else None)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite DINO loss at epoch {epoch} step {step} (lambda={lam:.6f}, lr={lr:.3g})")
            grads = {}
            hg, dx = dino_head_backward(s_hd, hc_g, dlog[:2].reshape(2 * b, -1))
            bg = vit_backward(s_bb, cache_g, dx)
            if loc is not None:
                hg2, dx2 = dino_head_backward(s_hd, hc_l, dlog[2:].reshape(-1, dlog.shape[-1]))
                bg2 = vit_backward(s_bb, cache_l, dx2)
                for k in hg:
                    hg[k] = hg[k] + hg2[k]
                for k in bg:
                    bg[k] = bg[k] + bg2[k]
            grads.update({"backbone." + k: v for k, v in bg.items()})
            grads.update({"head." + k: v for k, v in hg.items()})
            if cfg.clip_grad:
                clip_grad_norm(grads, cfg.clip_grad)
            adamw_step(opt, student, grads, lr=lr, no_decay=no_decay)
            ema_update(teacher, student, lam)
            if on_update is not None:
                on_update(step, student, teacher, lam)
            if cfg.centering:
                center = update_center(center, tlog, cfg.center_momentum).astype(DEFAULT_DTYPE)
            row = {"epoch": epoch, "step": step, "loss": loss, "lr": lr, "lambda": lam}
            trace.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        if trace:
            log.info("epoch %d loss %.4f", epoch, np.mean([r["loss"] for r in trace[-steps_per_epoch:]]))
    s_bb, s_hd = _split(student)
    t_bb, t_hd = _split(teacher)
    return SSLResult(ModelState(bcfg, t_bb), ModelState(bcfg, s_bb), trace, ModelState(hcfg, t_hd))
