"""Small Vision Transformer encoder with a hand-written backward pass.

Pre-norm blocks, learnable 1-D positional embeddings (class token included)
and the final-layer class token as the image embedding. Images are
``(B, C, H, W)`` float arrays; parameters live in a :class:`ModelState`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from . import kernels as K
from .checkpoint import ModelState, register_config
from .errors import ConfigError, ShapeError
from .numerics import (
    DEFAULT_DTYPE,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    softmax_backward,
    softmax_forward,
)


@register_config("backbone")
@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 2
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    preset: str = "custom"

    def __post_init__(self):
        if min(self.input_channels, self.image_size, self.patch_size, self.embed_dim,
               self.depth, self.heads) < 1:
            raise ConfigError(f"non-positive dimension in {self}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "vit-tiny/4": dict(image_size=64, patch_size=4, embed_dim=64, depth=3, heads=4),
    "vit-small/8": dict(image_size=224, patch_size=8, embed_dim=384, depth=12, heads=6),
    "vit-base/8": dict(image_size=224, patch_size=8, embed_dim=768, depth=12, heads=12),
    "vit-base/16": dict(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12),
}


def preset(name, input_channels=3, **overrides):
    try:
        dims = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; known: {sorted(PRESETS)}") from None
    dims.update(overrides)
    return BackboneConfig(input_channels=input_channels, preset=name, **dims)


def param_shapes(cfg):
    D, H = cfg.embed_dim, cfg.hidden_dim
    shapes = {
        "patch_embed.weight": (cfg.input_channels * cfg.patch_size**2, D),
        "patch_embed.bias": (D,),
        "cls_token": (1, D),
        "pos_embed": (cfg.n_patches + 1, D),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "norm1.weight": (D,), b + "norm1.bias": (D,),
            b + "attn.qkv.weight": (D, 3 * D), b + "attn.qkv.bias": (3 * D,),
            b + "attn.proj.weight": (D, D), b + "attn.proj.bias": (D,),
            b + "norm2.weight": (D,), b + "norm2.bias": (D,),
            b + "mlp.fc1.weight": (D, H), b + "mlp.fc1.bias": (H,),
            b + "mlp.fc2.weight": (H, D), b + "mlp.fc2.bias": (D,),
        })
    shapes["norm.weight"] = (D,)
    shapes["norm.bias"] = (D,)
    return shapes


def count_params(cfg):
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def trunc_normal(rng, shape, std=0.02, dtype=DEFAULT_DTYPE):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(cfg, rng, dtype=DEFAULT_DTYPE):
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = trunc_normal(rng, shape, dtype=dtype)
    return params


def init_backbone(cfg, seed=0, dtype=DEFAULT_DTYPE):
    return ModelState(cfg, init_params(cfg, np.random.default_rng(seed), dtype))


def no_decay_names(params):
    """Biases, norm parameters and token embeddings are excluded from weight decay."""
    return {n for n, p in params.items() if p.ndim == 1 or n in ("cls_token", "pos_embed")}


# ------------------------------------------------------------------ patches


def patchify(images, patch):
    """``(B, C, H, W)`` -> ``(B, N, C*P*P)`` in row-major patch order.

    A single ``(C, H, W)`` image gives ``(N, C*P*P)``.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    t = t.reshape(b, gh * gw, c * patch * patch)
    return t[0] if single else t


def unpatchify(tokens, channels, patch, grid):
    b = tokens.shape[0]
    t = tokens.reshape(b, grid, grid, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(b, channels, grid * patch, grid * patch)


@lru_cache(maxsize=16)
def _pos_resample_matrix(g_from, g_to):
    eye = np.eye(g_from * g_from).reshape(-1, g_from, g_from)
    res = K.resize_bilinear(eye, g_to, g_to)
    return np.ascontiguousarray(res.reshape(g_from * g_from, g_to * g_to).T)


# --------------------------------------------------------------- attention


def attention_forward(p, prefix, x, heads):
    b, t, d = x.shape
    hd = d // heads
    qkv = linear_forward(x, p[prefix + "qkv.weight"], p[prefix + "qkv.bias"])
    qkv = qkv.reshape(b, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = x.dtype.type(hd**-0.5)
    a = softmax_forward((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = linear_forward(o, p[prefix + "proj.weight"], p[prefix + "proj.bias"])
    return out, (x, q, k, v, a, o, scale)


def attention_backward(p, prefix, dout, cache, grads):
    x, q, k, v, a, o, scale = cache
    b, h, t, hd = q.shape
    do, gw, gb = linear_backward(dout, o, p[prefix + "proj.weight"])
    grads[prefix + "proj.weight"] = gw
    grads[prefix + "proj.bias"] = gb
    do = do.reshape(b, t, h, hd).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(da, a) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * h * hd)
    dx, gw, gb = linear_backward(dqkv, x, p[prefix + "qkv.weight"])
    grads[prefix + "qkv.weight"] = gw
    grads[prefix + "qkv.bias"] = gb
    return dx


def _mlp_forward(p, prefix, x):
    h = linear_forward(x, p[prefix + "fc1.weight"], p[prefix + "fc1.bias"])
    g = gelu_forward(h)
    return linear_forward(g, p[prefix + "fc2.weight"], p[prefix + "fc2.bias"]), (x, h, g)


def _mlp_backward(p, prefix, dy, cache, grads):
    x, h, g = cache
    dg, grads[prefix + "fc2.weight"], grads[prefix + "fc2.bias"] = linear_backward(
        dy, g, p[prefix + "fc2.weight"])
    dh = gelu_backward(dg, h)
    dx, grads[prefix + "fc1.weight"], grads[prefix + "fc1.bias"] = linear_backward(
        dh, x, p[prefix + "fc1.weight"])
    return dx


def block_forward(p, i, x, heads):
    b = f"blocks.{i}."
    h1, c1 = layer_norm_forward(x, p[b + "norm1.weight"], p[b + "norm1.bias"])
    a, ca = attention_forward(p, b + "attn.", h1, heads)
    x = x + a
    h2, c2 = layer_norm_forward(x, p[b + "norm2.weight"], p[b + "norm2.bias"])
    m, cm = _mlp_forward(p, b + "mlp.", h2)
    return x + m, (c1, ca, c2, cm)


def block_backward(p, i, dy, cache, grads):
    b = f"blocks.{i}."
    c1, ca, c2, cm = cache
    dh2 = _mlp_backward(p, b + "mlp.", dy, cm, grads)
    dx2, grads[b + "norm2.weight"], grads[b + "norm2.bias"] = layer_norm_backward(
        dh2, c2, p[b + "norm2.weight"])
    dx = dy + dx2
    dh1 = attention_backward(p, b + "attn.", dx, ca, grads)
    dx1, grads[b + "norm1.weight"], grads[b + "norm1.bias"] = layer_norm_backward(
        dh1, c1, p[b + "norm1.weight"])
    return dx + dx1


# ------------------------------------------------------------------- model


def _check_input(cfg, images, allow_smaller):
    if images.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got shape {images.shape}")
    _, c, h, w = images.shape
    if c != cfg.input_channels:
        raise ShapeError(f"backbone expects {cfg.input_channels} channels, got {c}")
    if h != w:
        raise ShapeError(f"square images required, got {h}x{w}")
    if h != cfg.image_size:
        if not allow_smaller or h > cfg.image_size or h % cfg.patch_size:
            raise ShapeError(f"backbone expects {cfg.image_size}px images, got {h}px")


def vit_forward(state, images, train=False, allow_smaller=False):
    """Class-token embedding ``(B, D)`` for a batch of images.

    With ``train=True`` the activation cache needed by :func:`vit_backward` is
    returned as the second element, otherwise ``None``. ``allow_smaller``
    admits square inputs below the configured size (multi-crop local views);
    the patch part of the positional table is then bilinearly resampled.
    """
    cfg, p = state.config, state.params
    single = images.ndim == 3
    if single:
        images = images[None]
    _check_input(cfg, images, allow_smaller)
    dtype = p["patch_embed.weight"].dtype
    images = images.astype(dtype, copy=False)
    b = images.shape[0]
    grid = images.shape[2] // cfg.patch_size
    tokens = patchify(images, cfg.patch_size)
    x = linear_forward(tokens, p["patch_embed.weight"], p["patch_embed.bias"])
    cls = np.broadcast_to(p["cls_token"], (b, 1, cfg.embed_dim))
    x = np.concatenate([cls, x], axis=1)
    pos = p["pos_embed"]
    resample = None
    if grid != cfg.grid:
        resample = _pos_resample_matrix(cfg.grid, grid).astype(dtype)
        pos = np.concatenate([pos[:1], resample @ pos[1:]], axis=0)
    x = x + pos
    caches = []
    for i in range(cfg.depth):
        x, c = block_forward(p, i, x, cfg.heads)
        if train:
            caches.append(c)
    emb, cn = layer_norm_forward(x[:, 0], p["norm.weight"], p["norm.bias"])
    if single:
        emb = emb[0]
    if not train:
        return emb, None
    return emb, (tokens, caches, cn, resample, x.shape, single, images.shape)


def vit_backward(state, cache, demb, input_grad=False):
    """Parameter gradients (and optionally the image gradient) for ``demb``."""
    cfg, p = state.config, state.params
    tokens, caches, cn, resample, xshape, single, img_shape = cache
    if single:
        demb = demb[None]
    grads = {}
    dcls, grads["norm.weight"], grads["norm.bias"] = layer_norm_backward(
        demb, cn, p["norm.weight"])
    dx = np.zeros(xshape, dtype=demb.dtype)
    dx[:, 0] = dcls
    for i in reversed(range(cfg.depth)):
        dx = block_backward(p, i, dx, caches[i], grads)
    dpos = dx.sum(axis=0)
    if resample is not None:
        dpos = np.concatenate([dpos[:1], resample.T @ dpos[1:]], axis=0)
    grads["pos_embed"] = dpos
    grads["cls_token"] = dx[:, :1].sum(axis=0)
    dtok, grads["patch_embed.weight"], grads["patch_embed.bias"] = linear_backward(
        dx[:, 1:], tokens, p["patch_embed.weight"], need_dx=input_grad)
    if not input_grad:
        return grads
    grid = img_shape[2] // cfg.patch_size
    dimg = unpatchify(dtok, cfg.input_channels, cfg.patch_size, grid)
    return grads, (dimg[0] if single else dimg)


def embed_images(state, images, batch_size=64):
    """Eval-mode embeddings for an image stack, processed in batches."""
    out = []
    for s in range(0, len(images), batch_size):
        emb, _ = vit_forward(state, images[s:s + batch_size])
        out.append(emb)
    if not out:
        return np.zeros((0, state.config.embed_dim), dtype=DEFAULT_DTYPE)
    return np.concatenate(out, axis=0)


def with_channels(cfg, channels):
    return replace(cfg, input_channels=channels)
