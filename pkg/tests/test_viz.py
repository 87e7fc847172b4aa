import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import topq_set
from softattn import nn
from softattn import tensor as T
from softattn.attention import SoftAttentionConfig
from softattn.errors import ContractError, ParameterError, ShapeError
from softattn.model import ModelGraph, build_mininet
from softattn.tensor import Tape, Tensor, seeded_rng
from softattn.viz import (box_mass_fraction, colorize, default_gradcam_layer, gradcam, overlap_topq,
                          render_heatmap, top_mass_cells)


class TestRenderHeatmap:
    def image(self):
        return seeded_rng(0).random((16, 12, 3))

    def test_dimensions_match_input(self):
        heat, overlay = render_heatmap(seeded_rng(1).random((4, 3)), self.image())
        assert heat.shape == overlay.shape == (16, 12, 3)
        assert heat.min() >= 0 and heat.max() <= 255

    def test_constant_alpha_is_uniform_and_warns(self):
        with pytest.warns(UserWarning, match="constant"):
            heat, _ = render_heatmap(np.full((4, 4), 0.25), self.image())
        assert np.all(heat == heat[0, 0])

    def test_blend_zero_is_input(self):
        img = self.image()
        _, overlay = render_heatmap(seeded_rng(2).random((4, 4)), img, blend=0.0)
        np.testing.assert_array_equal(overlay, img * 255.0)

    def test_blend_one_is_heatmap(self):
        heat, overlay = render_heatmap(seeded_rng(2).random((4, 4)), self.image(), blend=1.0)
        np.testing.assert_array_equal(overlay, heat)

    def test_blend_range(self):
        with pytest.raises(ParameterError):
            render_heatmap(np.ones((2, 2)), self.image(), blend=1.5)

    def test_high_attention_is_red(self):
        alpha = np.zeros((4, 4))
        alpha[0, 0] = 1.0
        heat, _ = render_heatmap(alpha, np.zeros((4, 4, 3)))
        r, g, b = heat[0, 0]
        assert r > 100 and r > g and r > b
        lo = heat[3, 3]
        assert lo[2] > lo[0]

    def test_colorize_range(self):
        out = colorize(np.linspace(0, 1, 11))
        assert out.shape == (11, 3) and out.min() >= 0 and out.max() <= 255


def channel_probe_model(h=4, w=4, channel=0):
    """conv -> flatten -> dense whose class-0 score is the mean of one conv channel."""
    conv = nn.Conv2dLayer(3, 2, (3, 3), rng=seeded_rng(0))
    dense = nn.DenseLayer(h * w * 2, 2)
    idx = np.arange(h * w * 2).reshape(h, w, 2)[:, :, channel].reshape(-1)
    dense.weight.data[idx, 0] = 1.0 / (h * w)
    return ModelGraph([conv, nn.FlattenLayer(), dense], 2, (h, w, 3))


class TestGradCam:
    def test_single_channel_closed_form(self):
        model = channel_probe_model()
        image = seeded_rng(1).normal(size=(4, 4, 3))
        cam = gradcam(model, image, target_layer=0, target_class=0)
        feature = model.layers[0].forward(Tensor(image[None])).data[0, :, :, 0]
        np.testing.assert_allclose(cam, np.maximum(feature, 0) / 16, atol=1e-15)

    def test_zero_gradient_gives_zero_map(self):
        model = channel_probe_model()
        model.layers[-1].weight.data[...] = 0.0
        cam = gradcam(model, seeded_rng(1).normal(size=(4, 4, 3)), 0, 1)
        assert not cam.any()

    def test_matches_channel_loop(self):
        model = build_mininet(2, SoftAttentionConfig(k=2), seeded_rng(4), 16)
        image = seeded_rng(5).random((16, 16, 3))
        layer = default_gradcam_layer(model)
        cam = gradcam(model, image, layer, 1)
        trace = {}
        with Tape() as tape:
            logits = model.forward(image[None], nn.INFER, dropout=False, trace=trace)
            score = T.reduce_sum(T.mul(logits, Tensor([[0.0, 1.0]])))
        tape.backward(score)
        feature, grad = trace[layer].data[0], tape.grad(trace[layer])[0]
        ref = np.zeros(feature.shape[:2])
        for c in range(feature.shape[-1]):
            ref += grad[:, :, c].mean() * feature[:, :, c]
        np.testing.assert_allclose(cam, np.maximum(ref, 0), atol=1e-12)

    def test_default_layer_is_last_spatial(self):
        model = build_mininet(2, SoftAttentionConfig(k=2), seeded_rng(0), 16)
        assert default_gradcam_layer(model) == model.sa_index

    def test_non_spatial_layer(self):
        model = build_mininet(2, None, seeded_rng(0), 16)
        with pytest.raises(ParameterError):
            gradcam(model, np.zeros((16, 16, 3)), target_layer=len(model.layers) - 1)

    def test_leaves_parameter_grads_alone(self):
        model = build_mininet(2, None, seeded_rng(0), 16)
        model.parameters()[0].grad[...] = 3.0
        gradcam(model, np.ones((16, 16, 3)))
        assert np.all(model.parameters()[0].grad == 3.0)


class TestOverlap:
    def test_identity(self):
        a = seeded_rng(0).random((5, 5))
        assert overlap_topq(a, a).iou == 1.0

    def test_disjoint_one_hot(self):
        a, b = np.zeros((3, 3)), np.zeros((3, 3))
        a[0, 0] = b[2, 2] = 1.0
        assert overlap_topq(a, b, 0.5).iou == 0.0

    def test_against_full_sort(self):
        rng = seeded_rng(7)
        for _ in range(100):
            a, b = rng.random((4, 4)), rng.random((4, 4))
            q = float(rng.uniform(0.05, 0.95))
            sa, sb = topq_set(a, q), topq_set(b, q)
            assert overlap_topq(a, b, q).iou == pytest.approx(len(sa & sb) / len(sa | sb), abs=1e-15)
            assert set(np.flatnonzero(top_mass_cells(a, q))) == sa

    def test_ties_in_row_major_order(self):
        mask = top_mass_cells(np.ones((2, 2)), 0.5)
        np.testing.assert_array_equal(mask, [[True, True], [False, False]])

    def test_errors(self):
        with pytest.raises(ShapeError):
            overlap_topq(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(ParameterError):
            overlap_topq(np.ones((2, 2)), np.ones((2, 2)), q=1.0)
        with pytest.raises(ContractError):
            overlap_topq(np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(ContractError):
            overlap_topq(-np.ones((2, 2)), np.ones((2, 2)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(0.01, 10)),
           arrays(np.float64, (3, 4), elements=st.floats(0.01, 10)),
           st.floats(0.05, 0.95))
    def test_symmetric(self, a, b, q):
        assert overlap_topq(a, b, q).iou == overlap_topq(b, a, q).iou


def test_box_mass_fraction():
    m = np.ones((4, 4))
    assert box_mass_fraction(m, 1, 1, 2) == 0.25
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert box_mass_fraction(m, 0, 0, 4) == 1.0
