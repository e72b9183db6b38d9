"""Fusion model contracts: routing, masking, variants, gradient flow."""

import numpy as np
import pytest

from trimf import tensor as T
from trimf.attention import CrossAttentionBlockParams, SAUnitParams
from trimf.config import ConfigError, validate_run_config
from trimf.losses import LossWeights, combined_loss
from trimf.model import (
    ModalityMask,
    ModelConfig,
    TabularEmbedderParams,
    TriMFParams,
    UnsupportedMaskError,
    build_model,
    count_sa_units,
    embed_tabular,
    expected_parameter_count,
    forward_batch,
    make_variant,
    parameter_count,
    pair_key,
)
from trimf.tensor import Tensor, backward

SHAPES = {"image": (3, 5), "text": (4, 6), "tabular": (4, 1)}
CONFIG = ModelConfig(d_model=8, head_count=2, layer_count=1, d_ff=16, lmf_rank=2, fusion_dim=6, tabular_embed_dim=4)


def random_batch(rng, n=2, shapes=SHAPES):
    return {name: rng.standard_normal((n,) + s) for name, s in shapes.items()}


class TestTabularEmbedder:
    def test_zero_feature_zero_bias_gives_zero_row(self):
        p = TabularEmbedderParams(4, np.random.default_rng(0))
        p.bias.data = np.zeros(4)
        out = embed_tabular([0.0, 1.0], p)
        np.testing.assert_array_equal(out.data[0], np.zeros(4))

    def test_affine_by_hand(self):
        p = TabularEmbedderParams(2, np.random.default_rng(0))
        p.weight.data = np.array([1.0, 1.0])
        p.bias.data = np.array([0.0, 1.0])
        out = embed_tabular([2.0], p)
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_paper_scale_shape(self):
        p = TabularEmbedderParams(256, np.random.default_rng(0))
        out = embed_tabular(np.random.default_rng(1).standard_normal(51), p)
        assert out.shape == (51, 256)


class TestRouting:
    def test_all_present_three_pairs_and_exact_sum(self):
        rng = np.random.default_rng(1)
        params = build_model(CONFIG, SHAPES, seed=5)
        out = forward_batch(params, random_batch(rng))
        assert len(out.bimf) == 3
        total = sum(v.data for v in out.bimf.values())
        assert np.abs(out.tri.data - total).max() == 0.0

    def test_masked_tri_is_surviving_pair_bitwise(self):
        rng = np.random.default_rng(2)
        params = build_model(CONFIG, SHAPES, seed=5)
        batch = random_batch(rng)
        out = forward_batch(params, batch, ModalityMask.missing("tabular"))
        assert list(out.bimf) == ["image+text"]
        assert out.tri is out.bimf["image+text"]
        np.testing.assert_array_equal(out.tri.data, out.bimf["image+text"].data)
        # logits equal a direct classifier application to the surviving vector
        direct = params.classifier.apply(out.bimf["image+text"])
        np.testing.assert_array_equal(out.logits.data, direct.data)

    def test_unaffected_pair_identical_under_masking(self):
        rng = np.random.default_rng(3)
        params = build_model(CONFIG, SHAPES, seed=6)
        batch = random_batch(rng)
        full = forward_batch(params, batch)
        masked = forward_batch(params, batch, ModalityMask.missing("tabular"))
        np.testing.assert_array_equal(full.bimf["image+text"].data, masked.bimf["image+text"].data)

    @pytest.mark.parametrize("missing", [("image", "text"), ("image", "tabular"), ("text", "tabular")])
    def test_single_modality_rejected(self, missing):
        rng = np.random.default_rng(4)
        params = build_model(CONFIG, SHAPES, seed=5)
        with pytest.raises(UnsupportedMaskError, match="at least two"):
            forward_batch(params, random_batch(rng), ModalityMask.missing(*missing))

    def test_shape_mismatch_names_modality(self):
        params = build_model(CONFIG, SHAPES, seed=5)
        batch = random_batch(np.random.default_rng(5))
        batch["text"] = batch["text"][:, :, :3]
        with pytest.raises(T.ShapeError, match="text"):
            forward_batch(params, batch)

    def test_determinism_same_seed_bitwise(self):
        batch = random_batch(np.random.default_rng(6))

        def run():
            params = build_model(CONFIG, SHAPES, seed=7)
            return forward_batch(params, batch).logits.data

        np.testing.assert_array_equal(run(), run())

    def test_pair_model_routes_single_pair(self):
        cfg = ModelConfig(
            d_model=8, head_count=2, layer_count=1, d_ff=16, lmf_rank=2, fusion_dim=6,
            tabular_embed_dim=4, modalities=("image", "text"),
        )
        params = build_model(cfg, SHAPES, seed=8)
        out = forward_batch(params, random_batch(np.random.default_rng(7)))
        assert list(out.bimf) == ["image+text"]
        assert out.tri is out.bimf["image+text"]


class TestGradientFlow:
    def test_every_encoder_and_fuser_parameter_receives_gradient(self):
        rng = np.random.default_rng(8)
        params = build_model(CONFIG, SHAPES, seed=9)
        batch = random_batch(rng)
        labels = rng.integers(0, 2, (2, 14)).astype(float)
        out = forward_batch(params, batch)
        backward(combined_loss(out, labels, LossWeights()))
        for name, t in params.named_parameters():
            if name.startswith(("encoders.", "fusers.")):
                assert t.grad is not None and np.any(t.grad != 0.0), f"dead parameter {name}"


class TestVariants:
    def run_config(self):
        return validate_run_config(
            {
                "model": {
                    "d_model": 8, "head_count": 2, "layer_count": 1, "d_ff": 16,
                    "lmf_rank": 2, "fusion_dim": 6, "tabular_embed_dim": 4,
                },
            }
        )

    def test_full_round_trips_structure(self):
        params, weights = make_variant(self.run_config(), "full", SHAPES, seed=3)
        base = build_model(ModelConfig.from_run_config(self.run_config()), SHAPES, seed=3)
        a = [(n, t.shape) for n, t in params.named_parameters()]
        b = [(n, t.shape) for n, t in base.named_parameters()]
        assert a == b
        assert weights == LossWeights(1.0, 3.0, 3.0, 3.0)

    def test_no_lmf_classifier_width(self):
        params, _ = make_variant(self.run_config(), "no_lmf", SHAPES, seed=3)
        assert params.classifier.w.shape == (6 * 8, 14)
        assert not params.fusers
        out = forward_batch(params, random_batch(np.random.default_rng(9)))
        assert out.tri.shape == (2, 48)
        assert out.logits.shape == (2, 14)

    def test_no_lmf_rejects_masks(self):
        params, _ = make_variant(self.run_config(), "no_lmf", SHAPES, seed=3)
        with pytest.raises(UnsupportedMaskError, match="no_lmf"):
            forward_batch(params, random_batch(np.random.default_rng(10)), ModalityMask.missing("text"))

    def test_no_sa_has_zero_sa_units(self):
        params, _ = make_variant(self.run_config(), "no_sa", SHAPES, seed=3)
        assert count_sa_units(params) == 0
        units = [
            layer.stream_a
            for enc in params.encoders.values()
            for layer in enc.layers
        ]
        assert all(isinstance(u, CrossAttentionBlockParams) for u in units)
        full, _ = make_variant(self.run_config(), "full", SHAPES, seed=3)
        assert count_sa_units(full) == 6  # 3 encoders x 1 layer x 2 streams

    def test_no_frcl_zeroes_contrast_weights(self):
        _, weights = make_variant(self.run_config(), "no_frcl", SHAPES, seed=3)
        assert (weights.lambda2, weights.lambda3, weights.lambda4) == (0.0, 0.0, 0.0)
        assert weights.lambda1 == 1.0

    def test_pair_model_gets_classification_only_plan(self):
        cfg = self.run_config()
        cfg["modalities"] = ["image", "text"]
        _, weights = make_variant(cfg, "full", SHAPES, seed=3)
        assert (weights.lambda2, weights.lambda3, weights.lambda4) == (0.0, 0.0, 0.0)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            make_variant(self.run_config(), "no_everything", SHAPES, seed=3)


class TestParameterCount:
    def test_closed_form_matches_actual(self):
        for variant in ("full", "no_sa", "no_lmf"):
            cfg = ModelConfig(
                d_model=8, head_count=2, layer_count=2, d_ff=16, lmf_rank=3,
                fusion_dim=6, tabular_embed_dim=4, variant=variant,
            )
            params = build_model(cfg, SHAPES, seed=1)
            assert parameter_count(params) == expected_parameter_count(cfg, SHAPES), variant

    def test_bias_augment_counted(self):
        cfg = ModelConfig(
            d_model=8, head_count=2, layer_count=1, d_ff=16, lmf_rank=2,
            fusion_dim=6, tabular_embed_dim=4, lmf_bias_augment=True,
        )
        params = build_model(cfg, SHAPES, seed=1)
        assert parameter_count(params) == expected_parameter_count(cfg, SHAPES)
