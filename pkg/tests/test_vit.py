import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import erf

from prepretrain import tensor as T
from prepretrain.rng import Stream
from prepretrain.vit import (DESK_CONFIGS, NAMED_CONFIGS, PAPER_CONFIGS, ViTConfig, ViTEncoder, droppath,
                             get_config, group_index, layerwise_lr_multipliers, param_count, param_shapes,
                             patchify, sincos_2d, unpatchify)

TINY = ViTConfig(2, 16, 32, 2, 4, 8, name="tiny")


def test_patchify_examples():
    img = np.arange(16.0).reshape(1, 4, 4)
    rows = patchify(img, 2)
    assert rows.shape == (4, 4)
    assert np.array_equal(rows[0], [0, 1, 4, 5])      # top-left patch, row-major
    assert np.array_equal(rows[1], [2, 3, 6, 7])
    const = patchify(np.full((3, 8, 8), 0.25), 4)
    assert np.all(const == const[0])
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 6, 6)), 4)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_patchify_round_trip(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).standard_normal((c, gh * p, gw * p))
    assert np.array_equal(unpatchify(patchify(img, p), p, c, gh * p, gw * p), img)


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_forward(image, params, cfg):
    """Unbatched straight-line evaluation of one image in float64."""
    p = {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    P, E, H = cfg.patch, cfg.embed, cfg.heads
    g = cfg.grid
    tokens = []
    for i in range(g):
        for j in range(g):
            patch = image[:, i * P:(i + 1) * P, j * P:(j + 1) * P].transpose(1, 2, 0).reshape(-1)
            tokens.append(patch @ p["patch_embed.w"] + p["patch_embed.b"])
    x = np.stack(tokens) + sincos_2d(E, g)
    x = np.concatenate([p["cls_token"], x], axis=0)
    d = E // H
    for l in range(cfg.layers):
        pre = f"blocks.{l}"
        h = _ln(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        qkv = h @ p[f"{pre}.attn.qkv.w"] + p[f"{pre}.attn.qkv.b"]
        heads = []
        for k in range(H):
            q = qkv[:, k * d:(k + 1) * d]
            kk = qkv[:, E + k * d:E + (k + 1) * d]
            v = qkv[:, 2 * E + k * d:2 * E + (k + 1) * d]
            s = q @ kk.T / math.sqrt(d)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v)
        x = x + np.concatenate(heads, 1) @ p[f"{pre}.attn.proj.w"] + p[f"{pre}.attn.proj.b"]
        h = _ln(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        u = h @ p[f"{pre}.mlp.fc1.w"] + p[f"{pre}.mlp.fc1.b"]
        u = 0.5 * u * (1 + erf(u / math.sqrt(2)))
        x = x + u @ p[f"{pre}.mlp.fc2.w"] + p[f"{pre}.mlp.fc2.b"]
    x = _ln(x, p["norm.g"], p["norm.b"])
    return x[0]


def test_forward_matches_reference():
    with T.oracle_mode():
        enc = ViTEncoder(TINY, stream=Stream(3))
        imgs = np.random.default_rng(0).standard_normal((3, 3, 8, 8))
        pooled, seq = enc(imgs)
    for b in range(3):
        assert np.allclose(pooled.data[b], reference_forward(imgs[b], enc.params, TINY), atol=1e-5)
    assert seq.tokens.shape == (3, 1 + TINY.num_patches, 16)


def test_full_visible_equals_unmasked():
    enc = ViTEncoder(TINY, stream=Stream(1))
    imgs = np.random.default_rng(1).standard_normal((2, 3, 8, 8)).astype(np.float32)
    a, _ = enc(imgs)
    b, _ = enc(imgs, visible=np.arange(TINY.num_patches))
    assert a.data.tobytes() == b.data.tobytes()


def test_visible_permutation_equivariance():
    with T.oracle_mode():
        enc = ViTEncoder(TINY, stream=Stream(1))
        imgs = np.random.default_rng(2).standard_normal((1, 3, 8, 8))
        vis = np.array([[0, 2, 3]])
        perm = np.array([2, 0, 1])
        a, sa = enc(imgs, visible=vis)
        b, sb = enc(imgs, visible=vis[:, perm])
    assert np.allclose(a.data, b.data, atol=1e-10)
    assert np.allclose(sa.tokens.data[:, 1:][:, perm], sb.tokens.data[:, 1:], atol=1e-10)
    assert sa.tokens.shape[1] == 1 + 3


def test_identical_images_identical_rows():
    enc = ViTEncoder(TINY, stream=Stream(0))
    img = np.random.default_rng(5).standard_normal((1, 3, 8, 8)).astype(np.float32)
    pooled, _ = enc(np.repeat(img, 4, axis=0))
    assert all(pooled.data[i].tobytes() == pooled.data[0].tobytes() for i in range(4))


def test_visible_errors():
    enc = ViTEncoder(TINY, stream=Stream(0))
    imgs = np.zeros((1, 3, 8, 8), np.float32)
    with pytest.raises(IndexError):
        enc(imgs, visible=np.array([[0, 4]]))
    with pytest.raises(ValueError):
        enc(imgs, visible=np.array([[1, 1]]))


def test_prompt_shape_errors():
    enc = ViTEncoder(TINY, stream=Stream(0))
    imgs = np.zeros((1, 3, 8, 8), np.float32)
    with pytest.raises(ValueError):
        enc(imgs, prompts=[T.Tensor(np.zeros((2, 16)))])
    with pytest.raises(ValueError):
        enc(imgs, prompts=[T.Tensor(np.zeros((2, 8)))] * 2)


def test_no_nan_on_bounded_inputs():
    for name in DESK_CONFIGS:
        cfg = get_config(name)
        enc = ViTEncoder(cfg, stream=Stream(0))
        x = np.random.default_rng(0).uniform(-10, 10, (2, 3, cfg.image_size, cfg.image_size))
        pooled, _ = enc(x.astype(np.float32))
        assert np.all(np.isfinite(pooled.data))


def test_droppath_modes():
    x = T.Tensor(np.ones((4, 3)))
    r = T.Tensor(np.full((4, 3), 2.0))
    assert np.array_equal(droppath(x, r, 0.5, 1, 2, training=False).data, np.full((4, 3), 3.0))
    assert np.array_equal(droppath(x, r, 0.0, 1, 2, training=True, rng=np.random.default_rng(0)).data,
                          np.full((4, 3), 3.0))
    with pytest.raises(ValueError):
        droppath(x, r, 1.0, 1, 2, training=True, rng=np.random.default_rng(0))


def test_droppath_keep_frequency():
    n = 10_000
    x = T.Tensor(np.zeros((n, 1)))
    r = T.Tensor(np.ones((n, 1)))
    out = droppath(x, r, 0.5, 1, 2, training=True, rng=np.random.default_rng(0)).data
    kept = np.mean(out[:, 0] > 0)
    assert abs(kept - 0.5) < 0.02
    assert np.allclose(out[out > 0], 2.0)      # survivors scaled by 1/(1-0.5)


def enumerate_params(cfg):
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@pytest.mark.parametrize("name", list(NAMED_CONFIGS))
def test_param_count_matches_enumeration(name):
    cfg = get_config(name)
    assert param_count(cfg) == enumerate_params(cfg)


def test_param_counts_against_table():
    table = {"ViT-B": 86e6, "ViT-L": 307e6, "ViT-H": 632e6, "ViT-2B": 1.89e9, "ViT-6.5B": 6.44e9}
    for name in PAPER_CONFIGS:
        assert abs(param_count(get_config(name)) / table[name] - 1) < 0.015, name


def test_param_count_quadratic_in_embed():
    a = ViTConfig(1, 64, 256, 4, 4, 32)
    b = ViTConfig(1, 128, 512, 4, 4, 32)
    assert 3.0 < param_count(b) / param_count(a) < 4.0


def test_paper_table_rows():
    b = get_config("ViT-B")
    assert (b.layers, b.embed, b.mlp, b.heads) == (12, 768, 3072, 12)


def test_layerwise_multipliers_examples():
    assert layerwise_lr_multipliers(2, 0.5) == pytest.approx([0.125, 0.25, 0.5, 1.0])
    assert layerwise_lr_multipliers(5, 1.0) == [1.0] * 7
    assert layerwise_lr_multipliers(2, 0.5, 0.2) == pytest.approx([0.2, 0.25, 0.5, 1.0])
    with pytest.raises(ValueError):
        layerwise_lr_multipliers(2, 0.0)


def test_every_parameter_in_one_group():
    cfg = get_config("ViT-Tiny-Desk")
    groups = {name: group_index(name, cfg.layers) for name in param_shapes(cfg)}
    assert set(groups.values()) <= set(range(cfg.layers + 2))
    assert groups["patch_embed.w"] == 0 and groups["cls_token"] == 0
    assert groups["blocks.0.attn.qkv.w"] == 1 and groups["blocks.3.mlp.fc2.b"] == 4
    assert groups["norm.g"] == cfg.layers + 1
