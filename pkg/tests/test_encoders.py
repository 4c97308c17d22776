"""Tests for the vision/text encoders and complexity-routed encoding."""

import numpy as np
import pytest

from icar.encoders import blocks
from icar.encoders.routing import encode_image_routed
from icar.encoders.text import TextEncoder, TextEncoderConfig, encode_text, pad_tokens
from icar.encoders.vit import (
    MiniViT,
    VisionEncoderConfig,
    encode_image_at_exit,
    encode_image_full,
)
from icar.errors import ContractError
from icar.numerics import Tensor, finite_diff_check, ops
from icar.synthdata import scenes

TINY = VisionEncoderConfig(image_size=8, patch_size=4, depth=3, width=8,
                           heads=2, embed_dim=4, exit_layers=(1, 2, 3))


def rand_images(n, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size))


class TestConfig:
    def test_defaults_mirror_fractional_depths(self):
        c = VisionEncoderConfig()
        assert c.depth == 12
        assert c.exit_layers == (4, 6, 8, 10, 12)
        # same depth fractions as exiting a 24-layer stack at 8/12/16/20/24
        assert [k / c.depth for k in c.exit_layers] == \
            [k / 24 for k in (8, 12, 16, 20, 24)]

    def test_validation(self):
        with pytest.raises(ContractError, match="divide"):
            VisionEncoderConfig(image_size=30)
        with pytest.raises(ContractError, match="heads"):
            VisionEncoderConfig(heads=5)
        with pytest.raises(ContractError, match="final layer"):
            VisionEncoderConfig(exit_layers=(4, 6))
        with pytest.raises(ContractError, match="ascending"):
            VisionEncoderConfig(exit_layers=(6, 4, 12))
        with pytest.raises(ContractError, match="outside"):
            VisionEncoderConfig(exit_layers=(0, 12))


class TestVisionEncoder:
    def test_unit_norm_at_every_exit(self):
        model = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=1)[0]
        for k in TINY.exit_layers:
            emb = encode_image_at_exit(model, img, k)
            assert abs(np.linalg.norm(emb) - 1.0) <= 1e-12

    def test_exit_at_depth_equals_full_bitwise(self):
        model = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=2)[0]
        a = encode_image_at_exit(model, img, TINY.depth)
        b = encode_image_full(model, img)
        assert np.array_equal(a, b)

    def test_full_encode_deterministic(self):
        model = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=3)[0]
        assert np.array_equal(encode_image_full(model, img),
                              encode_image_full(model, img))

    def test_attention_call_counter(self):
        model = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=4)[0]
        for k in TINY.exit_layers:
            model.attention_calls = 0
            encode_image_at_exit(model, img, k)
            assert model.attention_calls == k

    def test_invalid_exit_rejected(self):
        model = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=5)[0]
        with pytest.raises(ContractError, match="exit layer"):
            encode_image_at_exit(model, img, 17)

    def test_random_pairs_not_degenerate(self):
        model = MiniViT(seed=0)  # default desk config, e=32
        images = rand_images(100, 32, seed=6)
        embs = model.encode(images, 12).data
        sims = embs @ embs.T
        np.fill_diagonal(sims, -1.0)
        assert sims.max() < 0.999

    def test_mixed_batch_matches_uniform_batch_bitwise(self):
        model = MiniViT(TINY, seed=0)
        images = rand_images(5, 8, seed=7)
        uniform = model.encode(images, 2).data
        mixed = model.encode_mixed(images, [2] * 5).data
        assert np.array_equal(uniform, mixed)

    def test_mixed_batch_matches_per_sample_encodes(self):
        model = MiniViT(TINY, seed=0)
        images = rand_images(6, 8, seed=8)
        exits = [1, 3, 2, 3, 1, 2]
        mixed = model.encode_mixed(images, exits).data
        for i, k in enumerate(exits):
            single = encode_image_at_exit(model, images[i], k)
            assert np.allclose(mixed[i], single, atol=1e-10)

    def test_mixed_batch_validates_exits(self):
        model = MiniViT(TINY, seed=0)
        images = rand_images(2, 8, seed=9)
        with pytest.raises(ContractError, match="exit"):
            model.encode_mixed(images, [1, 5])
        with pytest.raises(ContractError, match="one exit per sample"):
            model.encode_mixed(images, [1])

    def test_save_load_round_trip(self, tmp_path):
        model = MiniViT(TINY, seed=3)
        img = rand_images(1, 8, seed=10)[0]
        before = encode_image_full(model, img)
        model.save(tmp_path / "vit.ckpt")
        loaded = MiniViT.load(tmp_path / "vit.ckpt")
        assert loaded.config == TINY
        assert np.array_equal(encode_image_full(loaded, img), before)

    def test_gradients_flow_through_mixed_taps(self):
        model = MiniViT(TINY, seed=0)
        images = rand_images(4, 8, seed=11)
        exits = [1, 3, 2, 3]
        rng = np.random.default_rng(12)
        target = rng.normal(size=(4, TINY.embed_dim))

        for name in ("proj.w", "blk0.attn.wq", "cls", "patch.w"):
            param = model.params[name]

            def f(x):
                model.params[name] = x
                out = model.encode_mixed(images, exits)
                return ops.sum_all(ops.mul(out, Tensor(target)))

            err = finite_diff_check(f, Tensor(param.data.copy()), eps=1e-5)
            assert err < 1e-4, f"{name}: {err}"
            model.params[name] = param


class TestTextEncoder:
    def test_unit_norm_and_determinism(self):
        model = TextEncoder(TextEncoderConfig(depth=2), seed=0)
        tokens = scenes.tokenize("one red circle and two blue squares")
        a = encode_text(model, tokens)
        b = encode_text(model, tokens)
        assert abs(np.linalg.norm(a) - 1.0) <= 1e-12
        assert np.array_equal(a, b)

    def test_distinct_captions_distinct_embeddings(self):
        model = TextEncoder(TextEncoderConfig(depth=2), seed=0)
        specs = scenes.sample_scene_specs(21, 30, 6)
        embs = model.encode([scenes.tokenize(scenes.render_caption(s))
                             for s in specs]).data
        sims = embs @ embs.T
        np.fill_diagonal(sims, -1.0)
        assert sims.max() < 0.999

    def test_out_of_vocabulary_rejected(self):
        model = TextEncoder(TextEncoderConfig(depth=1), seed=0)
        with pytest.raises(ContractError, match="vocabulary"):
            model.encode([(2, 3, 999)])

    def test_forward_call_counter(self):
        model = TextEncoder(TextEncoderConfig(depth=1), seed=0)
        model.encode([(2, 3), (4, 5)])
        model.encode([(2,)])
        assert model.forward_calls == 2

    def test_save_load_round_trip(self, tmp_path):
        cfg = TextEncoderConfig(depth=2)
        model = TextEncoder(cfg, seed=4)
        tokens = scenes.tokenize("one large green cross")
        before = encode_text(model, tokens)
        model.save(tmp_path / "text.ckpt")
        loaded = TextEncoder.load(tmp_path / "text.ckpt")
        assert loaded.config == cfg
        assert np.array_equal(encode_text(loaded, tokens), before)


class TestPadTokens:
    CFG = TextEncoderConfig(max_len=8, depth=1)

    def test_pads_after_eos(self):
        ids, eos_pos = pad_tokens((5, 6, 1), self.CFG)
        assert list(ids) == [5, 6, 1, 0, 0, 0, 0, 0]
        assert eos_pos == 2

    def test_appends_missing_eos(self):
        ids, eos_pos = pad_tokens((5, 6), self.CFG)
        assert list(ids) == [5, 6, 1, 0, 0, 0, 0, 0]
        assert eos_pos == 2

    def test_drops_tail_after_first_eos(self):
        ids, eos_pos = pad_tokens((5, 1, 6, 7), self.CFG)
        assert list(ids) == [5, 1, 0, 0, 0, 0, 0, 0]
        assert eos_pos == 1

    def test_truncates_long_sequences(self):
        ids, eos_pos = pad_tokens(tuple(range(2, 22)), self.CFG)
        assert list(ids) == [2, 3, 4, 5, 6, 7, 8, 1]
        assert eos_pos == 7

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError, match="outside vocabulary"):
            pad_tokens((0, 1, len(scenes.VOCAB)), self.CFG)


class _StubClassifier:
    """Minimal stand-in: fixed probability of class complex."""

    head = "binary"

    def __init__(self, p_complex):
        self.p = p_complex

    def forward(self, images):
        logit = np.log(self.p / (1 - self.p))
        return Tensor(np.tile([0.0, logit], (len(images), 1)))


class TestRoutedEncoding:
    def test_threshold_zero_forces_full_depth(self):
        vit = MiniViT(TINY, seed=0)
        clf = _StubClassifier(0.01)  # would look simple at threshold 0.5
        for i in range(3):
            img = rand_images(1, 8, seed=20 + i)[0]
            emb, decision, layers = encode_image_routed(
                vit, clf, img, exit_layer_for_simple=1, threshold=0.0)
            assert layers == TINY.depth
            assert not decision.is_simple
            assert np.array_equal(emb, encode_image_full(vit, img))

    def test_simple_routes_to_early_exit(self):
        vit = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=30)[0]
        emb, decision, layers = encode_image_routed(
            vit, _StubClassifier(0.1), img, exit_layer_for_simple=2)
        assert decision.is_simple and layers == 2
        assert np.array_equal(emb, encode_image_at_exit(vit, img, 2))

    def test_complex_routes_to_full(self):
        vit = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=31)[0]
        emb, decision, layers = encode_image_routed(
            vit, _StubClassifier(0.9), img, exit_layer_for_simple=2)
        assert not decision.is_simple and layers == TINY.depth

    def test_layers_used_always_in_pair(self):
        vit = MiniViT(TINY, seed=0)
        for p in (0.1, 0.5, 0.9):
            img = rand_images(1, 8, seed=32)[0]
            _, _, layers = encode_image_routed(
                vit, _StubClassifier(p), img, exit_layer_for_simple=1)
            assert layers in (1, TINY.depth)

    def test_invalid_simple_exit_rejected(self):
        vit = MiniViT(TINY, seed=0)
        img = rand_images(1, 8, seed=33)[0]
        with pytest.raises(ContractError, match="not in exit_layers"):
            encode_image_routed(vit, _StubClassifier(0.1), img,
                                exit_layer_for_simple=7)


class TestBlocks:
    def test_residual_identity_at_zero_weights(self):
        # zeroed attention+mlp outputs leave the stream untouched
        params = {}
        rng = np.random.default_rng(0)
        blocks.init_block_params(params, "b", rng, 8, 1)
        params["b.attn.wo"] = Tensor(np.zeros((8, 8)), requires_grad=True)
        params["b.mlp.w2"] = Tensor(np.zeros((32, 8)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3, 8)))
        out = blocks.block_forward(params, "b", x, heads=2)
        assert np.array_equal(out.data, x.data)

    def test_attention_mixes_tokens(self):
        params = {}
        rng = np.random.default_rng(1)
        blocks.init_block_params(params, "b", rng, 8, 1)
        x = rng.normal(size=(1, 4, 8))
        y = blocks.block_forward(params, "b", Tensor(x), 2).data
        x2 = x.copy()
        # single-coordinate bump: an all-coordinate shift of a token would
        # sit in layer_norm's null space and never reach the attention
        x2[0, 3, 1] += 1.0
        y2 = blocks.block_forward(params, "b", Tensor(x2), 2).data
        assert not np.array_equal(y[0, 0], y2[0, 0])  # other tokens see it
