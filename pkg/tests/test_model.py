"""Forward-pass contracts: init, shapes, token plumbing, attention."""

import numpy as np
import pytest

from caltok.errors import InvalidConfigError, ShapeMismatchError
from caltok.images import ImageBuffer
from caltok.model import (
    ModelConfig,
    TokenSet,
    export_embeddings,
    forward,
    init_model,
    init_tokens,
    zero_tokens,
)

CFG = ModelConfig()


@pytest.fixture(scope="module")
def model():
    return init_model(CFG, seed=0)


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(8)
    return ImageBuffer(rng.uniform(0, 1, (64, 64, 3)).astype(np.float32))


class TestInit:
    def test_seed_determinism(self):
        a = init_model(CFG, seed=0)
        b = init_model(CFG, seed=0)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_different_seeds_differ(self):
        a = init_model(CFG, seed=0)
        b = init_model(CFG, seed=1)
        assert not np.array_equal(a.params["patch_embed.w"], b.params["patch_embed.w"])

    def test_invalid_config_heads(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(embed_dim=64, heads=5)

    def test_invalid_config_patch(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(image_size=64, patch_size=7)

    def test_large_tensor_means_near_zero(self, model):
        for name in ("patch_embed.w", "blocks.0.attn.qkv.w", "blocks.0.mlp.fc1.w"):
            t = model.params[name]
            assert t.size >= 10_000
            assert abs(t.mean()) < 3 * 0.02 / np.sqrt(t.size)

    def test_norm_init(self, model):
        assert (model.params["blocks.0.ln1.g"] == 1.0).all()
        assert (model.params["blocks.0.ln1.b"] == 0.0).all()


class TestForward:
    def test_output_shape_and_positivity(self, model, image):
        d = forward(model, image)
        assert d.depth.shape == (64, 64)
        assert (d.depth > 0).all()
        assert d.mask.all()

    def test_bit_identical_across_runs(self, model, image):
        a = forward(model, image).depth
        b = forward(model, image).depth
        np.testing.assert_array_equal(a, b)

    def test_output_shape_independent_of_tokens(self, model, image):
        for mode in ("layerwise", "single", "shared"):
            for m in (3, 8, 11):
                tokens = init_tokens(CFG, m, mode, seed=1)
                d = forward(model, image, tokens)
                assert d.depth.shape == (64, 64)
                assert (d.depth > 0).all()

    def test_wrong_image_size_raises(self, model):
        img = ImageBuffer(np.zeros((32, 32, 3), dtype=np.float32))
        with pytest.raises(ShapeMismatchError):
            forward(model, img)

    def test_wrong_token_shape_raises(self, model, image):
        bad = TokenSet(np.zeros((CFG.layers + 1, 8, CFG.embed_dim)), "layerwise")
        with pytest.raises(ShapeMismatchError):
            forward(model, image, bad)

    def test_modes_change_output(self, model, image):
        tokens = init_tokens(CFG, 8, "layerwise", seed=3)
        outs = {}
        for mode in ("layerwise", "single", "shared"):
            t = TokenSet(tokens.tokens, mode)
            outs[mode] = forward(model, image, t).depth
        assert not np.array_equal(outs["layerwise"], outs["single"])
        assert not np.array_equal(outs["layerwise"], outs["shared"])
        assert not np.array_equal(outs["single"], outs["shared"])

    def test_attention_rows_sum_to_one(self, model, image):
        tokens = init_tokens(CFG, 8, "layerwise", seed=2)
        for t in (None, tokens):
            _, record = forward(model, image, t, record_attention=True)
            assert len(record.layers) == CFG.layers
            for layer in record.layers:
                sums = layer.rows.sum(axis=-1)
                assert np.abs(sums - 1.0).max() < 1e-5

    def test_attention_maps_shapes(self, model, image):
        tokens = init_tokens(CFG, 8, "layerwise", seed=2)
        _, record = forward(model, image, tokens, record_attention=True)
        for layer in record.layers:
            assert layer.token_to_patch().shape == (CFG.n_patches,)
            assert layer.patch_to_token().shape == (CFG.n_patches,)


class TestMaskedTokenEquivalence:
    def test_doubled_zero_tokens_with_masked_keys_change_nothing(self, model, image):
        n = CFG.n_patches
        for mode in ("layerwise", "single", "shared"):
            base = init_tokens(CFG, 8, mode, seed=4)
            doubled = np.concatenate(
                [base.tokens, np.zeros((CFG.layers, 8, CFG.embed_dim))], axis=1
            )
            key_mask = np.ones(n + 16, dtype=bool)
            key_mask[n + 8 :] = False
            d_base = forward(model, image, base)
            d_doubled = forward(
                model, image, TokenSet(doubled, mode), attn_key_mask=key_mask
            )
            assert np.abs(d_doubled.depth - d_base.depth).max() < 1e-9


class TestEmbeddings:
    def test_row_count(self, model, image):
        emb = export_embeddings(model, image)
        assert emb.shape == (CFG.n_patches, CFG.embed_dim)

    def test_no_token_path_unique(self, model, image):
        a = export_embeddings(model, image)
        b = export_embeddings(model, image, None)
        np.testing.assert_array_equal(a, b)

    def test_csv_write(self, model, image, tmp_path):
        path = tmp_path / "emb.csv"
        emb = export_embeddings(model, image, csv_path=path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == CFG.n_patches
        first = np.array([float(v) for v in lines[0].split(",")])
        np.testing.assert_allclose(first, emb[0], rtol=0, atol=0)


def test_zero_tokens_helper():
    t = zero_tokens(CFG, 8, "layerwise")
    assert t.tokens.shape == (CFG.layers, 8, CFG.embed_dim)
    assert (t.tokens == 0).all()
