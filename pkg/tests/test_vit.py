import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitlab import tensor as T
from vitlab.gradcheck import relative_error, numeric_gradient
from vitlab.tensor import Tensor
from vitlab.vit import (PatchSpec, ViT, ViTConfig, canonical_names, check_weights, expected_shapes,
                        extract_attention_map, init_weights, multi_head_attention, patchify, patchify_2d,
                        patchify_3d, unpatchify, vit_forward, vit_micro, vit_small)

DIVISORS = [1, 2, 4, 7, 14, 28]


def tiny(p=7, dims=2, K=3, L=2, d=8, h=2):
    spec = PatchSpec(p, D=28 if dims == 3 else None)
    return ViTConfig(L, d, h, spec, K)


# -- patchification ------------------------------------------------------------

@pytest.mark.parametrize("p, count, width", [(14, 4, 588), (28, 1, 2352), (7, 16, 147)])
def test_patchify_2d_counts(p, count, width):
    x = np.zeros((28, 28, 3))
    assert patchify_2d(x, PatchSpec(p)).shape == (count, width)


@pytest.mark.parametrize("p, count, width", [(14, 8, 8232), (28, 1, 65856), (1, 21952, 3)])
def test_patchify_3d_counts(p, count, width):
    x = np.zeros((28, 28, 28, 3), dtype=np.float32)
    assert patchify_3d(x, PatchSpec(p, D=28)).shape == (count, width)


def test_patchify_raster_order_channel_last():
    x = np.arange(4 * 4 * 2).reshape(4, 4, 2)
    patches = patchify_2d(x, PatchSpec(2, 4, 4, C=2))
    # second patch is the top-right 2x2 block, flattened row by row, channels innermost
    assert patches[1].tolist() == x[0:2, 2:4].reshape(-1).tolist()
    vol = np.arange(4 ** 3).reshape(4, 4, 4, 1)
    cubes = patchify_3d(vol, PatchSpec(2, 4, 4, D=4, C=1))
    assert cubes[4].tolist() == vol[2:4, 0:2, 0:2].reshape(-1).tolist()  # depth-major


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(DIVISORS), st.booleans(), st.integers(0, 1000))
def test_patchify_round_trip(p, three_d, seed):
    if three_d and p == 1:
        p = 2
    spec = PatchSpec(p, D=28 if three_d else None)
    x = np.random.default_rng(seed).random((2,) + spec.image_shape).astype(np.float32)
    assert np.array_equal(unpatchify(patchify(x, spec), spec), x)


def test_non_divisible_patch_names_extents():
    with pytest.raises(ValueError, match=r"p=5.*H=28.*W=28"):
        PatchSpec(5)
    with pytest.raises(ValueError):
        PatchSpec(3, 24, 24, D=28)


def test_token_counts():
    assert [PatchSpec(p).num_tokens for p in DIVISORS] == [785, 197, 50, 17, 5, 2]


def test_presets_and_head_divisibility():
    s, m = vit_small(PatchSpec(2), 8), vit_micro(PatchSpec(2), 2)
    assert (s.L, s.d, s.h) == (12, 384, 6)
    assert (m.L, m.d, m.h) == (4, 64, 4)
    with pytest.raises(ValueError, match="divisible"):
        ViTConfig(2, 10, 3, PatchSpec(7), 2)


def test_meta_round_trip():
    for cfg in (tiny(7), tiny(4, dims=3)):
        assert ViTConfig.from_meta(cfg.to_meta()) == cfg


# -- weights -----------------------------------------------------------------------

def test_expected_shapes_vit_small():
    shapes = expected_shapes(vit_small(PatchSpec(2), 8).to_meta())
    assert shapes["patch_embed.weight"] == (2, 2, 3, 384)
    assert shapes["pos_embed"] == (197, 384)
    assert shapes["head.weight"] == (384, 8)
    assert shapes["blocks.11.mlp.fc1.weight"] == (384, 1536)
    assert list(shapes) == canonical_names(12)


def test_check_weights_lists_every_problem():
    cfg = tiny()
    w = init_weights(cfg)
    del w["patch_embed.weight"]
    w["head.weight"] = np.zeros((8, 5))
    w["extra"] = np.zeros(1)
    with pytest.raises(ValueError) as info:
        check_weights(cfg.to_meta(), w)
    msg = str(info.value)
    assert "missing tensor patch_embed.weight" in msg
    assert "unexpected tensor extra" in msg
    assert "shape mismatch for head.weight: expected (8, 3), got (8, 5)" in msg


def test_init_is_seeded_and_follows_conventions():
    cfg = tiny()
    a, b, c = init_weights(cfg, 1), init_weights(cfg, 1), init_weights(cfg, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["pos_embed"], c["pos_embed"])
    assert not a["cls_token"].any() and not a["head.bias"].any()
    assert np.all(a["norm.gamma"] == 1)
    assert np.abs(a["pos_embed"]).max() <= 0.04


# -- attention -----------------------------------------------------------------

def _attn_params(rng, d):
    return [Tensor(rng.standard_normal(s) * 0.3) for s in [(d, 3 * d), (3 * d,), (d, d), (d,)]]


def test_attention_single_token_and_identical_tokens():
    rng = np.random.default_rng(0)
    d = 8
    qkv_w, qkv_b, proj_w, proj_b = _attn_params(rng, d)
    x = rng.standard_normal((1, 1, d))
    out, attn = multi_head_attention(Tensor(x), qkv_w, qkv_b, proj_w, proj_b, 2)
    assert np.all(attn == 1.0)
    v = (x @ qkv_w.data + qkv_b.data)[..., 2 * d:]
    np.testing.assert_allclose(out.data, v @ proj_w.data + proj_b.data, rtol=1e-12)
    x2 = np.repeat(x, 2, axis=1)
    _, attn2 = multi_head_attention(Tensor(x2), qkv_w, qkv_b, proj_w, proj_b, 2)
    assert np.allclose(attn2, 0.5)


def test_attention_rows_are_stochastic():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 9, 12))
    _, attn = multi_head_attention(Tensor(x), *_attn_params(rng, 12), 3)
    assert attn.shape == (3, 3, 9, 9)
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)


def test_forward_shape_and_determinism():
    cfg = tiny(4, K=5)
    w = init_weights(cfg, 3)
    x = np.random.default_rng(2).random((4, 28, 28, 3))
    a = vit_forward(x, cfg, w)
    assert a.shape == (4, 5)
    assert np.array_equal(a, vit_forward(x, cfg, w))


def test_forward_3d_shape():
    cfg = tiny(14, dims=3)
    x = np.random.default_rng(3).random((2, 28, 28, 28, 3)).astype(np.float32)
    assert vit_forward(x, cfg, init_weights(cfg)).shape == (2, 3)


def test_forward_rejects_mismatched_weights():
    cfg = tiny()
    w = init_weights(cfg)
    del w["blocks.1.attn.proj.bias"]
    with pytest.raises(ValueError, match="blocks.1.attn.proj.bias"):
        vit_forward(np.zeros((1, 28, 28, 3)), cfg, w)


def test_constant_image_keeps_patch_tokens_identical():
    cfg = tiny(7)
    w = init_weights(cfg, 4, np.float64)
    w["pos_embed"][:] = 0.0
    model = ViT(cfg, w, dtype=np.float64)
    tokens = model.embed_patches(np.full((1, 28, 28, 3), 0.3))
    P = model.params
    x = T.concat([P["cls_token"].reshape(1, 1, -1), tokens], axis=1)
    for i in range(cfg.L):
        b = f"blocks.{i}."
        y = T.layer_norm(x, P[b + "norm1.gamma"], P[b + "norm1.beta"], model.ln_eps)
        y, _ = multi_head_attention(y, P[b + "attn.qkv.weight"], P[b + "attn.qkv.bias"],
                                    P[b + "attn.proj.weight"], P[b + "attn.proj.bias"], cfg.h)
        x = x + y
        y = T.layer_norm(x, P[b + "norm2.gamma"], P[b + "norm2.beta"], model.ln_eps)
        x = x + T.linear(T.gelu(T.linear(y, P[b + "mlp.fc1.weight"], P[b + "mlp.fc1.bias"])),
                         P[b + "mlp.fc2.weight"], P[b + "mlp.fc2.bias"])
        patch_tokens = x.data[0, 1:]
        np.testing.assert_allclose(patch_tokens, np.broadcast_to(patch_tokens[0], patch_tokens.shape), atol=1e-12)


def test_token_permutation_leaves_logits_unchanged():
    cfg = tiny(7)
    w = init_weights(cfg, 5, np.float64)
    model = ViT(cfg, w, dtype=np.float64)
    x = np.random.default_rng(6).random((2, 28, 28, 3))
    tokens = model.embed_patches(x)
    perm = np.random.default_rng(7).permutation(tokens.shape[1])
    pos = model.params["pos_embed"].data
    pos_perm = np.concatenate([pos[:1], pos[1:][perm]])
    a = model.forward_tokens(tokens).data
    b = model.forward_tokens(Tensor(tokens.data[:, perm]), pos_embed=Tensor(pos_perm)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_dropout_only_in_training():
    cfg = ViTConfig(1, 8, 2, PatchSpec(14), 2, drop_rate=0.5)
    model = ViT(cfg, seed=0, dtype=np.float64)
    x = np.random.default_rng(8).random((2, 28, 28, 3))
    assert np.array_equal(model(x).data, model(x).data)
    a = model(x, train=True, rng=np.random.default_rng(1)).data
    assert not np.allclose(a, model(x).data)


def test_vit_micro_full_gradcheck():
    """Finite differences over a sample of coordinates of every parameter tensor."""
    cfg = vit_micro(PatchSpec(7), 2)
    model = ViT(cfg, init_weights(cfg, 9, np.float64), dtype=np.float64)
    rng = np.random.default_rng(10)
    for t in model.params.values():  # perturb zero/one inits so every path carries signal
        t.data += rng.standard_normal(t.data.shape) * 0.05
    x = rng.random((2, 28, 28, 3))
    y = np.array([0, 1])
    loss = T.cross_entropy(model(x), y)
    loss.backward()

    def f():
        with T.no_grad():
            return float(T.cross_entropy(model(x), y).data)

    ana, num = [], []
    for name, t in model.params.items():
        coords = rng.choice(t.data.size, size=min(3, t.data.size), replace=False)
        ana.append(t.grad.reshape(-1)[coords])
        num.append(numeric_gradient(f, t.data, coords))
    assert relative_error(np.concatenate(ana), np.concatenate(num)) < 1e-4


# -- attention maps --------------------------------------------------------------

def test_attention_map_p2():
    cfg = tiny(2, L=1)
    w = init_weights(cfg, 11)
    img = np.random.default_rng(12).random((28, 28, 3)).astype(np.float32)
    amap = extract_attention_map(img, cfg, w)
    assert amap.heatmap.shape == (28, 28) and amap.grid.shape == (14, 14)
    assert amap.heatmap.min() == 0.0 and amap.heatmap.max() == 1.0
    _, maps = vit_forward(img[None], cfg, w, return_attention=True)
    np.testing.assert_allclose(amap.grid.sum(), maps[-1][0, :, 0, 1:].astype(np.float64).mean(0).sum(), rtol=1e-6)
    assert np.isclose(amap.probabilities.sum(), 1.0)


def test_attention_map_single_patch_is_constant():
    cfg = tiny(28)
    amap = extract_attention_map(np.random.default_rng(13).random((28, 28, 3)), cfg, init_weights(cfg))
    assert np.all(amap.heatmap == amap.heatmap.flat[0])


def test_attention_map_rejects_volumes():
    cfg = tiny(14, dims=3)
    with pytest.raises(ValueError):
        extract_attention_map(np.zeros((28, 28, 28, 3)), cfg, init_weights(cfg))
