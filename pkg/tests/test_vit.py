import numpy as np
import pytest

from dfkd.engine import Rng, Tensor
from dfkd.engine import functional as F
from dfkd.engine.nn import Linear
from dfkd.errors import ConfigError, ShapeError
from dfkd.vit import (AttentionMap, ViT, ViTConfig, attention_maps, mhsa_forward, param_count,
                      param_count_report, patchify, vit_forward)

from oracles import attention_steps

TINY = ViTConfig(image_size=8, patch_size=4, in_channels=1, embed_dim=8, depth=1,
                 num_heads=2, num_classes=2, mlp_ratio=2.0)

# logits of ViT(TINY, Rng(2024)) on Rng(99).normal((1, 8, 8)), recorded after the
# attention/patchify/layernorm pieces were verified against their oracles
GOLDEN_LOGITS = np.array([0.044122532443287434, 0.03753365518185256])


class TestConfig:
    def test_rejects_indivisible_patch(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=10, patch_size=4)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=10, num_heads=3)

    def test_num_patches(self):
        assert ViTConfig(image_size=28, patch_size=7).num_patches == 16


class TestPatchify:
    def test_single_pixels_in_row_major_order(self):
        img = np.arange(4.0).reshape(1, 2, 2)
        np.testing.assert_array_equal(patchify(img, 1), [[0], [1], [2], [3]])

    def test_whole_image_patch(self):
        img = np.random.default_rng(0).normal(size=(3, 4, 4))
        np.testing.assert_array_equal(patchify(img, 4), img.reshape(1, -1))

    def test_two_by_two_blocks(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        expected = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
        np.testing.assert_array_equal(patchify(img, 2), expected)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 5, 4)), 2)


def _attn_weights(rng, d):
    return {"qkv.weight": rng.normal(size=(3 * d, d)), "qkv.bias": np.zeros(3 * d),
            "proj.weight": rng.normal(size=(d, d)), "proj.bias": np.zeros(d)}


class TestMhsa:
    def test_saturation_picks_dominant_value(self):
        d = 2
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        # q = 60 * x[:, 0] on dim 0; k = x[:, 1] on dim 0 -> token 1 dominates every row
        wq = np.array([[60.0, 0.0], [0.0, 0.0]])
        wk = np.array([[0.0, 1.0], [0.0, 0.0]])
        weights = {"qkv.weight": np.vstack([wq, wk, np.eye(d)]), "qkv.bias": np.zeros(3 * d),
                   "proj.weight": np.eye(d), "proj.bias": np.zeros(d)}
        out, maps = mhsa_forward(x, weights, 1)
        np.testing.assert_allclose(out.data[0], x[1], atol=1e-12)
        assert maps[0].matrix[0, 1] > 1 - 1e-12

    def test_equal_logits_are_uniform(self):
        rng = np.random.default_rng(0)
        w = _attn_weights(rng, 4)
        w["qkv.weight"][:8] = 0.0  # q = k = 0
        _, maps = mhsa_forward(rng.normal(size=(5, 4)), w, 2)
        for m in maps:
            np.testing.assert_allclose(m.matrix, 1 / 5, atol=1e-15)

    def test_matches_step_by_step_oracle(self):
        rng = np.random.default_rng(11)
        d = 4
        w = _attn_weights(rng, d)
        x = rng.normal(size=(3, d))
        out, maps = mhsa_forward(x, w, 2)
        wq, wk, wv = np.split(w["qkv.weight"], 3)
        ref, ref_maps = attention_steps(x, wq, wk, wv, w["proj.weight"], 2)
        np.testing.assert_allclose(out.data, ref, atol=1e-10)
        for m, r in zip(maps, ref_maps):
            np.testing.assert_allclose(m.matrix, r, atol=1e-10)

    def test_head_mismatch(self):
        with pytest.raises(ConfigError):
            mhsa_forward(np.zeros((3, 5)), _attn_weights(np.random.default_rng(0), 5), 2)


class TestViT:
    def test_zero_weights_give_bias(self):
        model = ViT(TINY, Rng(0))
        state = {k: np.zeros_like(v) for k, v in model.state_dict().items()}
        state["head.bias"] = np.array([0.7, -1.3])
        logits, _ = vit_forward(np.random.default_rng(1).normal(size=(1, 8, 8)), TINY, state)
        np.testing.assert_array_equal(logits.data, [0.7, -1.3])

    @pytest.mark.parametrize("seed", range(3))
    def test_shape_contract(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ViTConfig(image_size=8, patch_size=int(rng.choice([2, 4])), in_channels=int(rng.integers(1, 4)),
                        embed_dim=12, depth=int(rng.integers(1, 4)), num_heads=int(rng.choice([1, 2, 3])),
                        num_classes=int(rng.integers(2, 6)))
        model = ViT(cfg, Rng(seed))
        logits, maps = vit_forward(rng.normal(size=(cfg.in_channels, 8, 8)), cfg, model.state_dict())
        assert logits.shape == (cfg.num_classes,)
        assert len(maps) == cfg.depth * cfg.num_heads
        for m in maps:
            assert m.matrix.shape == (cfg.num_patches + 1,) * 2
            np.testing.assert_allclose(m.matrix.sum(axis=1), 1.0, atol=1e-6)
            assert m.matrix.min() >= 0.0

    def test_golden_logits(self):
        model = ViT(TINY, Rng(2024))
        logits, _ = vit_forward(Rng(99).normal((1, 8, 8)), TINY, model.state_dict())
        np.testing.assert_allclose(logits.data, GOLDEN_LOGITS, atol=1e-12)

    def test_wrong_image_shape_names_layer(self):
        with pytest.raises(ShapeError, match="patch_embed"):
            ViT(TINY, Rng(0)).forward(np.zeros((2, 1, 6, 6)))

    def test_permutation_covariance(self):
        cfg = ViTConfig(image_size=8, patch_size=2, embed_dim=8, depth=2, num_heads=2, num_classes=3)
        model = ViT(cfg, Rng(5))
        model.pos_embed.data = Rng(6).normal(model.pos_embed.shape) * 0.5
        rng = np.random.default_rng(3)
        patches = rng.normal(size=(2, cfg.num_patches, 4))
        ref, _ = model.forward_patches(Tensor(patches))
        perm = rng.permutation(cfg.num_patches)
        pos = model.pos_embed.data.copy()
        model.pos_embed.data = np.concatenate([pos[:, :1], pos[:, 1:][:, perm]], axis=1)
        out, _ = model.forward_patches(Tensor(patches[:, perm]))
        np.testing.assert_allclose(out.data, ref.data, atol=1e-9)

    def test_gradient_reaches_every_parameter(self):
        model = ViT(ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_classes=3), Rng(1))
        logits, _ = model.forward(np.random.default_rng(2).normal(size=(3, 1, 8, 8)))
        F.sum(F.mul(logits, np.random.default_rng(3).normal(size=logits.shape))).backward()
        for name, p in model.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0.0), name

    def test_attention_maps_flatten(self):
        model = ViT(TINY, Rng(0))
        _, atts = model.forward(np.zeros((2, 1, 8, 8)))
        maps = attention_maps(atts, 1)
        assert [(m.layer, m.head) for m in maps] == [(0, 0), (0, 1)]
        assert all(isinstance(m, AttentionMap) for m in maps)

    def test_weight_keys_fixed_by_config(self):
        keys = set(ViT(TINY, Rng(0)).state_dict())
        assert keys == set(ViT(TINY, Rng(1)).state_dict())
        assert "blocks.0.attn.qkv.weight" in keys and "blocks.1.attn.qkv.weight" not in keys


class TestParamCount:
    def test_linear_layer(self):
        assert Linear(7, 5, Rng(0)).num_parameters() == 7 * 5 + 5

    def test_tiny_config_by_hand(self):
        patch_embed = 16 * 8 + 8
        cls, pos = 8, 5 * 8
        block = 16 + (8 * 24 + 24) + (64 + 8) + 16 + (8 * 16 + 16) + (16 * 8 + 8)
        total = patch_embed + cls + pos + block + 16 + (8 * 2 + 2)
        assert total == 818
        assert param_count(TINY) == total
        assert ViT(TINY, Rng(0)).num_parameters() == total

    @pytest.mark.parametrize("cfg", [TINY, ViTConfig(), ViTConfig(embed_dim=32, depth=1, num_heads=2)])
    def test_matches_allocation(self, cfg):
        assert param_count(cfg) == ViT(cfg, Rng(0)).num_parameters()

    def test_reference_count_report(self):
        rows = {r["model"]: r for r in param_count_report()}
        assert rows["mnist-teacher"]["counted"] == 9_498_122
        assert set(rows) == {"mnist-teacher", "mnist-student", "cifar10-teacher", "cifar10-student"}
