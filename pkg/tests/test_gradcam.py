"""Heatmap pipeline tests.

The averaging-collapse oracle is evaluated in exact rational arithmetic
(fractions.Fraction) because the identity being asserted is algebraic;
a floating-point sum of K*K equal terms would itself round and could
not certify bitwise equality.
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from attnpop import gradcam as G
from attnpop import model as M
from attnpop import tensor as T
from attnpop.errors import ShapeError
from attnpop.layers import AttentionBlock, DenseLayer
from attnpop.tensor import Parameter, Tensor


def small_config(modality, **overrides):
    base = dict(modality=modality, feature_dim=12, embed_dim=6,
                attention_hidden=4, lstm_hidden=3, fusion_hidden=5,
                word_dim=7, seed=42)
    base.update(overrides)
    return M.ModelConfig(**base)


def _frames(rng, n, dim=12):
    return [Tensor(rng.standard_normal(dim)) for _ in range(n)]


def _dense(w, b, activation):
    return DenseLayer(Parameter("x.weight", Tensor(w)),
                      Parameter("x.bias", Tensor(b)), activation)


class TestPooledFeatureGradient:
    def test_constant_logit_gives_zero_gradient(self):
        model = M.PopularityModel.create(small_config("video"))
        proj = model.video.frame_projection
        proj.weight.value = T.zeros(proj.weight.value.shape)
        for layer in (model.head.hidden, model.head.output):
            layer.weight.value = T.zeros(layer.weight.value.shape)
            layer.bias.value = T.zeros(layer.bias.value.shape)
        frames = _frames(np.random.default_rng(0), 3)
        for i in range(3):
            grad = G.pooled_feature_gradient(model, frames, None, i)
            assert grad.tolist() == [0.0] * 12

    def test_identity_pipeline_hand_chain_rule(self):
        # projection = identity relu, single frame (attention weight is
        # the constant 1), head hidden = identity relu, output w2.
        # For a positive feature vector the relus are transparent, so
        # logit = w2 . q + b2 and d logit / d q = w2.
        config = small_config("video", feature_dim=2, embed_dim=2,
                              attention_hidden=2, fusion_hidden=2)
        model = M.PopularityModel.create(config)
        model.video.frame_projection = _dense(np.eye(2), np.zeros(2), "relu")
        model.head = M.FusionHead(_dense(np.eye(2), np.zeros(2), "relu"),
                                  _dense([[0.7, -0.3]], [0.1], "identity"))
        frame = Tensor([0.5, 0.4])
        out = model.predict(frames=[frame])
        assert out.logit == pytest.approx(0.7 * 0.5 - 0.3 * 0.4 + 0.1, abs=1e-15)
        grad = G.pooled_feature_gradient(model, [frame], None, 0)
        assert grad.data == pytest.approx([0.7, -0.3], abs=1e-10)

    def test_matches_finite_differences_on_inputs(self):
        model = M.PopularityModel.create(small_config("video", seed=3))
        rng = np.random.default_rng(4)
        frames = _frames(rng, 3)
        eps = 1e-5
        worst = 0.0
        for idx in range(3):
            analytic = G.pooled_feature_gradient(model, frames, None, idx).data
            for c in range(12):
                bumped = [f.data.copy() for f in frames]
                bumped[idx][c] += eps
                up = model.predict(frames=[Tensor(b) for b in bumped]).logit
                bumped[idx][c] -= 2 * eps
                down = model.predict(frames=[Tensor(b) for b in bumped]).logit
                numeric = (up - down) / (2 * eps)
                rel = abs(analytic[c] - numeric) / max(
                    abs(analytic[c]), abs(numeric), 1e-12)
                worst = max(worst, rel)
        assert worst < 1e-6

    def test_gradient_reaches_unattended_frames_through_attention(self):
        # alpha couples every frame: even a frame with tiny weight gets
        # gradient because its score shifts the whole softmax
        model = M.PopularityModel.create(small_config("video", seed=8))
        frames = _frames(np.random.default_rng(9), 4)
        for i in range(4):
            grad = G.pooled_feature_gradient(model, frames, None, i)
            assert np.any(grad.data != 0.0)

    def test_dead_projection_frame_gets_exactly_zero_gradient(self):
        # every pre-activation of frame 2's projection is negative at
        # this seed, so the relu blocks all paths back to the input
        model = M.PopularityModel.create(small_config("video", seed=5))
        frames = _frames(np.random.default_rng(6), 4)
        proj = model.video.frame_projection
        pre = proj.weight.value.data @ frames[2].data + proj.bias.value.data
        assert np.all(pre < 0.0)
        grad = G.pooled_feature_gradient(model, frames, None, 2)
        assert grad.tolist() == [0.0] * 12

    def test_frame_index_out_of_range(self):
        model = M.PopularityModel.create(small_config("video"))
        frames = _frames(np.random.default_rng(7), 2)
        with pytest.raises(ValueError):
            G.pooled_feature_gradient(model, frames, None, 2)

    def test_text_only_model_rejected(self):
        model = M.PopularityModel.create(small_config("text"))
        with pytest.raises(ValueError):
            G.feature_gradients(model, [])


class TestChannelWeights:
    def test_uniform_gradient_closed_form(self):
        grad = Tensor(np.full(5, 3.0))
        gamma = G.channel_weights(grad, 7)
        assert np.array_equal(gamma.data, np.full(5, 3.0 / 49.0))

    def test_no_pooling_is_identity(self):
        grad = Tensor([0.1, -2.5, 7.0])
        assert np.array_equal(G.channel_weights(grad, 1).data, grad.data)

    def test_invalid_spatial_size(self):
        with pytest.raises(ValueError):
            G.channel_weights(Tensor([1.0]), 0)

    @pytest.mark.parametrize("k", [1, 3, 7])
    @pytest.mark.parametrize("f", [1, 4, 16])
    def test_collapse_identity_is_bitwise(self, k, f):
        # oracle: expand the gradient uniformly over k*k cells, then
        # apply the spatial averaging verbatim in exact rational
        # arithmetic; the result must equal the implementation's single
        # division bit for bit
        rng = np.random.default_rng(100 * k + f)
        grad = rng.standard_normal(f) * rng.choice([1e-8, 1.0, 1e8], size=f)
        gamma = G.channel_weights(Tensor(grad), k)
        cells = k * k
        for ch in range(f):
            expanded = [Fraction(grad[ch]) / cells] * cells
            oracle = float(Fraction(1, cells) * sum(expanded))
            assert gamma.data[ch] == oracle


class TestClassActivationMap:
    def test_hand_case(self):
        acts = Tensor(np.array([[1.0, -1.0], [2.0, 0.0]]).reshape(2, 2, 1))
        raw = G.class_activation_map(Tensor([1.0]), acts)
        assert raw.tolist() == [[1.0, 0.0], [2.0, 0.0]]

    def test_zero_weights_zero_map(self):
        acts = Tensor(np.random.default_rng(8).standard_normal((3, 3, 4)))
        raw = G.class_activation_map(T.zeros(4), acts)
        assert np.array_equal(raw.data, np.zeros((3, 3)))

    def test_full_rectification(self):
        acts = Tensor(np.abs(np.random.default_rng(9).standard_normal((2, 2, 3))))
        raw = G.class_activation_map(Tensor([-1.0, -2.0, -0.5]), acts)
        assert np.array_equal(raw.data, np.zeros((2, 2)))

    def test_channel_mismatch(self):
        acts = Tensor(np.zeros((2, 2, 3)))
        with pytest.raises(ShapeError):
            G.class_activation_map(Tensor([1.0, 2.0]), acts)

    def test_constant_cells_give_constant_map(self):
        # cells all equal to the pooled vector: every spatial position
        # computes the same dot product
        rng = np.random.default_rng(10)
        q = rng.standard_normal(6)
        gamma = Tensor(rng.standard_normal(6))
        acts = Tensor(np.broadcast_to(q, (4, 4, 6)).copy())
        raw = G.class_activation_map(gamma, acts)
        expected = max(0.0, float(q @ gamma.data))
        assert np.all(raw.data == raw.data[0, 0])
        assert raw.data[0, 0] == expected


class TestScaleHeatmaps:
    def _maps(self, values):
        return [Tensor(np.array(v, dtype=float)) for v in values]

    def test_single_frame_full_scale(self):
        viz = G.scale_heatmaps(self._maps([[[1.0, 2.0], [0.5, 0.0]]]),
                               Tensor([1.0]))
        hm = viz.heatmaps[0]
        assert hm.scale == 1.0
        assert hm.normalized.tolist() == [[0.5, 1.0], [0.25, 0.0]]

    def test_direct_ratio_scales(self):
        maps = self._maps([[[1.0]], [[1.0]], [[1.0]]])
        viz = G.scale_heatmaps(maps, Tensor([0.5, 0.25, 0.25]))
        assert [h.scale for h in viz.heatmaps] == [1.0, 0.5, 0.5]

    def test_zero_map_stays_zero_with_scale(self):
        maps = self._maps([[[2.0]], [[0.0]]])
        viz = G.scale_heatmaps(maps, Tensor([0.75, 0.25]))
        assert viz.heatmaps[1].normalized.tolist() == [[0.0]]
        assert viz.heatmaps[1].scale == pytest.approx(0.25 / 0.75, abs=1e-15)

    def test_attention_tie_keeps_exactly_one_full_scale(self):
        maps = self._maps([[[1.0]], [[1.0]], [[1.0]]])
        viz = G.scale_heatmaps(maps, Tensor([1 / 3, 1 / 3, 1 / 3]))
        scales = [h.scale for h in viz.heatmaps]
        assert scales[0] == 1.0
        assert scales.count(1.0) == 1
        assert scales[1] == scales[2] == math.nextafter(1.0, 0.0)

    def test_displayed_intensities_in_unit_interval(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            maps = [Tensor(np.maximum(rng.standard_normal((3, 3)), 0.0))
                    for _ in range(n)]
            scores = rng.standard_normal(n)
            alpha = Tensor(np.exp(scores) / np.exp(scores).sum())
            viz = G.scale_heatmaps(maps, alpha)
            for hm in viz.heatmaps:
                assert np.all(hm.normalized.data >= 0.0)
                assert np.all(hm.normalized.data <= 1.0)
                disp = hm.displayed.data
                assert np.all(disp >= 0.0) and np.all(disp <= 1.0)
            assert sum(1 for h in viz.heatmaps if h.scale == 1.0) == 1

    def test_sequence_normalization_uses_global_max(self):
        maps = self._maps([[[4.0, 0.0]], [[1.0, 2.0]]])
        viz = G.scale_heatmaps(maps, Tensor([0.5, 0.5]), normalize="sequence")
        assert viz.heatmaps[0].normalized.tolist() == [[1.0, 0.0]]
        assert viz.heatmaps[1].normalized.tolist() == [[0.25, 0.5]]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            G.scale_heatmaps(self._maps([[[1.0]]]), Tensor([0.5, 0.5]))

    def test_negative_raw_rejected(self):
        with pytest.raises(ValueError):
            G.scale_heatmaps(self._maps([[[-0.1]]]), Tensor([1.0]))


class TestTextAttentionReport:
    def test_single_token(self):
        report = G.text_attention_report(Tensor([1.0]), ["hello"])
        assert report.tokens == ["hello"]
        assert report.beta.tolist() == [1.0]
        assert report.relative.tolist() == [1.0]

    def test_uniform_weights_all_relative_one(self):
        report = G.text_attention_report(Tensor([0.25] * 4), list("abcd"))
        assert report.relative.tolist() == [1.0] * 4

    def test_direct_ratios(self):
        report = G.text_attention_report(Tensor([0.6, 0.3, 0.1]), ["a", "b", "c"])
        assert report.relative.data[0] == 1.0
        assert report.relative.data[1] == 0.5
        assert report.relative.data[2] == pytest.approx(1 / 6, rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            G.text_attention_report(Tensor([0.5, 0.5]), ["only"])


class TestVisualizeSequence:
    def test_multimodal_end_to_end(self):
        model = M.PopularityModel.create(small_config("multimodal", seed=12))
        rng = np.random.default_rng(13)
        frames = _frames(rng, 3)
        words = [Tensor(rng.standard_normal(7)) for _ in range(4)]
        acts = [Tensor(rng.standard_normal((5, 5, 12))) for _ in range(3)]
        viz, report, out = G.visualize_sequence(
            model, frames, acts, words=words, tokens=list("wxyz"))
        assert len(viz.heatmaps) == 3
        assert np.array_equal(viz.alpha.data, out.alpha.data)
        assert all(h.normalized.shape == (5, 5) for h in viz.heatmaps)
        assert report is not None and len(report.tokens) == 4
        assert sum(1 for h in viz.heatmaps if h.scale == 1.0) == 1

    def test_video_only_has_no_report(self):
        model = M.PopularityModel.create(small_config("video", seed=14))
        rng = np.random.default_rng(15)
        frames = _frames(rng, 2)
        acts = [Tensor(rng.standard_normal((3, 3, 12))) for _ in range(2)]
        viz, report, _ = G.visualize_sequence(model, frames, acts)
        assert report is None
        assert len(viz.heatmaps) == 2

    def test_activation_count_must_match(self):
        model = M.PopularityModel.create(small_config("video", seed=16))
        rng = np.random.default_rng(17)
        frames = _frames(rng, 2)
        acts = [Tensor(rng.standard_normal((3, 3, 12)))]
        with pytest.raises(ValueError):
            G.visualize_sequence(model, frames, acts)
