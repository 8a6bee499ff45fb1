"""Finite-difference checks of every hand-written backward pass.

Each case builds ``fn(x) -> (scalar, grad)`` in float64 at a random point;
vector-valued ops are reduced to a scalar with a fixed random projection.
"""

from __future__ import annotations

import numpy as np

from . import numerics as N
from .backbone import (
    attention_backward,
    attention_forward,
    block_backward,
    block_forward,
    init_backbone,
    patchify,
    preset,
    unpatchify,
    vit_backward,
    vit_forward,
)
from .checkpoint import ModelState
from .head_classifier import HeadConfig, head_backward, head_forward, init_head
from .ssl_dino import (
    DinoHeadConfig,
    _l2n,
    _l2n_backward,
    dino_head_backward,
    dino_head_forward,
    dino_loss,
    init_dino_head,
)


def _proj(fwd, bwd, shape, rng):
    r = rng.standard_normal(shape)

    def fn(x):
        y, cache = fwd(x)
        return float((r * y).sum()), bwd(r, cache)

    return fn


def _param_fn(state, name, run):
    """Differentiate ``run(state) -> (scalar, grads)`` with respect to one parameter."""

    def fn(x):
        st = ModelState(state.config, {**state.params, name: x})
        val, grads = run(st)
        return val, grads[name]

    return fn


# ----------------------------------------------------------------- cases


def case_linear(rng):
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    fn = _proj(lambda x: (N.linear_forward(x, w, b), x),
               lambda r, x: N.linear_backward(r, x, w)[0], (3, 4), rng)
    return fn, rng.standard_normal((3, 5))


def case_linear_weight(rng):
    x = rng.standard_normal((3, 5))
    fn = _proj(lambda w: (N.linear_forward(x, w), w),
               lambda r, w: N.linear_backward(r, x, w)[1], (3, 4), rng)
    return fn, rng.standard_normal((5, 4))


def case_layer_norm(rng):
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    fn = _proj(lambda x: N.layer_norm_forward(x, g, b),
               lambda r, c: N.layer_norm_backward(r, c, g)[0], (4, 6), rng)
    return fn, rng.standard_normal((4, 6))


def case_layer_norm_gamma(rng):
    x = rng.standard_normal((4, 6))
    b = rng.standard_normal(6)
    fn = _proj(lambda g: (N.layer_norm_forward(x, g, b)[0], g),
               lambda r, g: N.layer_norm_backward(r, N.layer_norm_forward(x, g, b)[1], g)[1],
               (4, 6), rng)
    return fn, rng.standard_normal(6)


def case_gelu(rng):
    fn = _proj(lambda x: (N.gelu_forward(x), x), lambda r, x: N.gelu_backward(r, x), (4, 7), rng)
    return fn, 2 * rng.standard_normal((4, 7))


def case_relu(rng):
    x = rng.standard_normal((4, 7))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    fn = _proj(lambda x: (N.relu_forward(x), x), lambda r, x: N.relu_backward(r, x), (4, 7), rng)
    return fn, x


def case_dropout(rng):
    seed = int(rng.integers(1 << 31))

    def fwd(x):
        return N.dropout_forward(x, 0.5, np.random.default_rng(seed), train=True)

    fn = _proj(fwd, lambda r, m: N.dropout_backward(r, m), (4, 7), rng)
    return fn, rng.standard_normal((4, 7))


def case_softmax(rng):
    fn = _proj(lambda x: (lambda y: (y, y))(N.softmax_forward(x)),
               lambda r, y: N.softmax_backward(r, y), (3, 6), rng)
    return fn, rng.standard_normal((3, 6))


def case_softmax_temp(rng):
    fn = _proj(lambda x: (lambda y: (y, y))(N.softmax_temp(x, 0.1)),
               lambda r, y: N.softmax_temp_backward(r, y, 0.1), (3, 6), rng)
    return fn, 0.1 * rng.standard_normal((3, 6))


def case_cross_entropy(rng):
    t = N.softmax_forward(rng.standard_normal((3, 6)))

    def fn(x):
        p = N.softmax_forward(x)
        val = float(N.cross_entropy_soft(t, p).sum())
        dp = N.cross_entropy_soft_backward(np.ones(3), t, p)
        return val, N.softmax_backward(dp, p)

    return fn, rng.standard_normal((3, 6))


def case_bce(rng):
    t = (rng.random((5, 3)) < 0.5).astype(np.float64)

    def fn(x):
        return N.bce_with_logits(x, t)

    return fn, 3 * rng.standard_normal((5, 3))


def case_l2_norm(rng):
    fn = _proj(lambda x: (lambda y, n: (y, (y, n)))(*_l2n(x, -1)),
               lambda r, c: _l2n_backward(r, *c, -1), (3, 5), rng)
    return fn, rng.standard_normal((3, 5))


def _tiny_vit(rng, channels=2):
    cfg = preset("vit-tiny/4", channels, image_size=16, embed_dim=16, depth=2, heads=2)
    st = init_backbone(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    # larger-than-init weights exercise every path more strongly
    st.params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in st.params.items()}
    return st


def case_attention(rng):
    st = _tiny_vit(rng)
    p = st.params
    fn = _proj(lambda x: attention_forward(p, "blocks.0.attn.", x, 2),
               lambda r, c: attention_backward(p, "blocks.0.attn.", r, c, {}), (2, 5, 16), rng)
    return fn, rng.standard_normal((2, 5, 16))


def case_block(rng):
    st = _tiny_vit(rng)
    p = st.params
    fn = _proj(lambda x: block_forward(p, 0, x, 2),
               lambda r, c: block_backward(p, 0, r, c, {}), (2, 5, 16), rng)
    return fn, rng.standard_normal((2, 5, 16))


def case_patch_embed(rng):
    st = _tiny_vit(rng)
    w, b = st.params["patch_embed.weight"], st.params["patch_embed.bias"]

    def fwd(img):
        tok = patchify(img, 4)
        return N.linear_forward(tok, w, b), img

    def bwd(r, img):
        dtok = N.linear_backward(r, patchify(img, 4), w)[0]
        return unpatchify(dtok, 2, 4, 4)

    fn = _proj(fwd, bwd, (1, 16, 16), rng)
    return fn, rng.standard_normal((1, 2, 16, 16))


def case_vit_input(rng):
    st = _tiny_vit(rng)
    r = rng.standard_normal((2, 16))

    def fn(x):
        emb, cache = vit_forward(st, x, train=True)
        _, dimg = vit_backward(st, cache, r, input_grad=True)
        return float((r * emb).sum()), dimg

    return fn, rng.standard_normal((2, 2, 16, 16))


def case_vit_params(rng, name=None, small=False):
    st = _tiny_vit(rng)
    size = 8 if small else 16
    img = rng.standard_normal((2, 2, size, size))
    r = rng.standard_normal((2, 16))
    name = name or sorted(st.params)[int(rng.integers(len(st.params)))]

    def run(s):
        emb, cache = vit_forward(s, img, train=True, allow_smaller=small)
        return float((r * emb).sum()), vit_backward(s, cache, r)

    return _param_fn(st, name, run), st.params[name].copy()


def case_vit_tiny_full(rng):
    """The real vit-tiny/4 geometry (64 px, D=64, depth 3) on one random parameter tensor."""
    cfg = preset("vit-tiny/4", 2)
    st = init_backbone(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    img = rng.random((1, 2, 64, 64))
    r = rng.standard_normal((1, 64))
    names = sorted(st.params)
    name = names[int(rng.integers(len(names)))]

    def run(s):
        emb, cache = vit_forward(s, img, train=True)
        return float((r * emb).sum()), vit_backward(s, cache, r)

    return _param_fn(st, name, run), st.params[name].copy()


def case_dino_head(rng):
    cfg = DinoHeadConfig(8, (12, 10), 20, 6)
    head = init_dino_head(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    r = rng.standard_normal((3, 20))

    def fn(x):
        y, c = dino_head_forward(head, x, train=True)
        return float((r * y).sum()), dino_head_backward(head, c, r)[1]

    return fn, rng.standard_normal((3, 8))


def case_dino_head_params(rng):
    cfg = DinoHeadConfig(8, (12, 10), 20, 6)
    head = init_dino_head(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    head.params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in head.params.items()}
    x = rng.standard_normal((3, 8))
    r = rng.standard_normal((3, 20))
    name = sorted(head.params)[int(rng.integers(len(head.params)))]

    def run(h):
        y, c = dino_head_forward(h, x, train=True)
        return float((r * y).sum()), dino_head_backward(h, c, r)[0]

    return _param_fn(head, name, run), head.params[name].copy()


def case_dino_loss(rng):
    t = rng.standard_normal((2, 3, 7))
    c = 0.1 * rng.standard_normal(7)

    def fn(x):
        return dino_loss(t, x, 0.1, 0.04, c)

    return fn, rng.standard_normal((5, 3, 7))


def case_mlp_head(rng):
    head = init_head(HeadConfig(in_dim=6, n_classes=3, hidden=(9, 5)), int(rng.integers(1 << 31)),
                     dtype=np.float64)
    r = rng.standard_normal((4, 3))
    seed = int(rng.integers(1 << 31))

    def fn(x):
        y, c = head_forward(head, x, train=True, rng=np.random.default_rng(seed))
        return float((r * y).sum()), head_backward(head, c, r)[1]

    return fn, rng.standard_normal((4, 6))


def case_mlp_head_params(rng):
    head = init_head(HeadConfig(in_dim=6, n_classes=3, hidden=(9, 5)), int(rng.integers(1 << 31)),
                     dtype=np.float64)
    x = rng.standard_normal((4, 6))
    t = (rng.random((4, 3)) < 0.5).astype(np.float64)
    name = sorted(head.params)[int(rng.integers(len(head.params)))]
    seed = int(rng.integers(1 << 31))

    def run(h):
        y, c = head_forward(h, x, train=True, rng=np.random.default_rng(seed))
        loss, dy = N.bce_with_logits(y, t)
        return loss, head_backward(h, c, dy)[0]

    return _param_fn(head, name, run), head.params[name].copy()


CASES = {
    "linear": case_linear,
    "linear.weight": case_linear_weight,
    "layer_norm": case_layer_norm,
    "layer_norm.gamma": case_layer_norm_gamma,
    "gelu": case_gelu,
    "relu": case_relu,
    "dropout": case_dropout,
    "softmax": case_softmax,
    "softmax_temp": case_softmax_temp,
    "cross_entropy_soft": case_cross_entropy,
    "bce_with_logits": case_bce,
    "l2_normalize": case_l2_norm,
    "attention": case_attention,
    "transformer_block": case_block,
    "patch_embed": case_patch_embed,
    "vit.input": case_vit_input,
    "vit.params": case_vit_params,
    "vit.params.local_crop": lambda rng: case_vit_params(rng, "pos_embed", small=True),
    "vit_tiny.params": case_vit_tiny_full,
    "dino_head.input": case_dino_head,
    "dino_head.params": case_dino_head_params,
    "dino_loss": case_dino_loss,
    "mlp_head.input": case_mlp_head,
    "mlp_head.params": case_mlp_head_params,
}

# big cases check a random coordinate subset per point
_COORDS = {"vit_tiny.params": 12, "vit.input": 24, "vit.params": 24, "patch_embed": 24}


def check_case(name, points=10, seed=0):
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(points):
        fn, x = CASES[name](rng)
        worst = max(worst, N.grad_check(fn, x, coords=_COORDS.get(name), rng=rng))
    return worst


def run_suite(points=10, seed=0, names=None):
    return [{"name": n, "max_rel_err": check_case(n, points, seed)} for n in (names or CASES)]
