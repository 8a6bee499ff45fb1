import numpy as np
import pytest

from dinocell.backbone import (
    PRESETS,
    BackboneConfig,
    count_params,
    embed_images,
    init_backbone,
    patchify,
    preset,
    unpatchify,
    vit_backward,
    vit_forward,
)
from dinocell.errors import ConfigError, ShapeError


def test_patchify_counts():
    assert patchify(np.zeros((2, 64, 64)), 8).shape == (64, 128)
    assert patchify(np.zeros((1, 4, 224, 224)), 8).shape == (1, 784, 256)
    tok = patchify(np.full((3, 16, 16), 0.3), 4)
    assert np.all(tok == tok[0])
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 10, 12)), 4)


def test_patchify_token_layout(rng):
    img = rng.random((2, 8, 8))
    tok = patchify(img, 4)
    # second token is the top-right patch, channel-major
    np.testing.assert_array_equal(tok[1], img[:, 0:4, 4:8].reshape(-1))
    np.testing.assert_array_equal(unpatchify(tok[None], 2, 4, 2)[0], img)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(input_channels=2, image_size=30, patch_size=4, embed_dim=64, depth=1, heads=4)
    with pytest.raises(ConfigError):
        BackboneConfig(input_channels=2, image_size=32, patch_size=4, embed_dim=66, depth=1, heads=4)
    with pytest.raises(ConfigError):
        preset("vit-huge/2")


def test_preset_param_counts_locked():
    # regression lock: counts are a pure function of the config
    assert count_params(preset("vit-tiny/4", 2)) == 168704
    assert count_params(preset("vit-small/8", 3)) == 21_670_272
    assert count_params(preset("vit-base/16", 3)) == 85_798_656
    assert count_params(preset("vit-base/8", 4)) == 85_857_024
    assert set(PRESETS) >= {"vit-tiny/4", "vit-small/8", "vit-base/8", "vit-base/16"}


def test_forward_shapes_and_sequence_length(rng):
    st = init_backbone(preset("vit-tiny/4", 2), 0)
    emb, _ = vit_forward(st, rng.random((3, 2, 64, 64)).astype(np.float32))
    assert emb.shape == (3, 64)
    cfg8 = preset("vit-tiny/4", 2, patch_size=8)
    assert cfg8.n_patches + 1 == 65
    with pytest.raises(ShapeError):
        vit_forward(st, np.zeros((1, 3, 64, 64), np.float32))
    with pytest.raises(ShapeError):
        vit_forward(st, np.zeros((1, 2, 32, 32), np.float32))


def test_forward_deterministic(rng):
    st = init_backbone(preset("vit-tiny/4", 2), 5)
    x = rng.random((4, 2, 64, 64)).astype(np.float32)
    a, _ = vit_forward(st, x)
    b, _ = vit_forward(init_backbone(preset("vit-tiny/4", 2), 5), x)
    assert a.tobytes() == b.tobytes()
    assert embed_images(st, x, batch_size=3).shape == (4, 64)


def test_patch_permutation_with_positions_is_invariant(rng):
    cfg = preset("vit-tiny/4", 2, image_size=16, embed_dim=16, depth=2, heads=2)
    st = init_backbone(cfg, 1, dtype=np.float64)
    img = rng.random((2, 16, 16))
    perm = rng.permutation(16)
    tok = patchify(img, 4)
    img_p = unpatchify(tok[perm][None], 2, 4, 4)[0]
    st_p = st.copy()
    st_p.params["pos_embed"] = np.concatenate([st.params["pos_embed"][:1], st.params["pos_embed"][1:][perm]])
    a, _ = vit_forward(st, img)
    b, _ = vit_forward(st_p, img_p)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_weighted_channel_is_ignored(rng):
    cfg = preset("vit-tiny/4", 2, image_size=16, embed_dim=16, depth=1, heads=2)
    st = init_backbone(cfg, 2)
    st.params["patch_embed.weight"][16:] = 0  # channel 1 rows
    img = rng.random((2, 16, 16)).astype(np.float32)
    other = img.copy()
    other[1] = rng.random((16, 16))
    a, _ = vit_forward(st, img)
    b, _ = vit_forward(st, other)
    assert a.tobytes() == b.tobytes()


def test_local_crop_forward_and_backward(rng):
    st = init_backbone(preset("vit-tiny/4", 2), 0)
    x = rng.random((2, 2, 32, 32)).astype(np.float32)
    emb, cache = vit_forward(st, x, train=True, allow_smaller=True)
    grads = vit_backward(st, cache, np.ones_like(emb))
    assert set(grads) == set(st.params)
    assert all(grads[k].shape == v.shape for k, v in st.params.items())


def test_single_image_forward(rng):
    st = init_backbone(preset("vit-tiny/4", 2), 0)
    x = rng.random((2, 64, 64)).astype(np.float32)
    single, _ = vit_forward(st, x)
    batch, _ = vit_forward(st, x[None])
    assert single.shape == (64,)
    np.testing.assert_allclose(single, batch[0], rtol=1e-6, atol=1e-6)
