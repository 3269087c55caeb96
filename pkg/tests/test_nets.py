"""Architecture conformance, receptive fields, and whole-volume inference."""

import numpy as np
import pytest

from hseg.errors import DataError
from hseg.nets import (LayerSpec, Network, NetworkSpec, PathwaySpec,
                       build_dual_pathway_net, build_liver_net, build_network,
                       build_single_pathway_net, concat_channels, conv_layer_count,
                       describe, forward_volume, receptive_field, restore_network,
                       save_network)
from hseg.volume import Volume


class TestLiverNet:
    def test_receptive_field_is_67(self):
        assert receptive_field(build_liver_net()) == (67, 67)

    def test_nine_conv_layers(self):
        assert conv_layer_count(build_liver_net()) == 9

    def test_dilation_schedule_sums_to_rf(self):
        spec = build_liver_net()
        convs = [l for l in spec.pathways[0].layers if l.kind == "conv"]
        dil_sum = sum((l.kernel[0] - 1) * l.dilation for l in convs)
        assert 1 + dil_sum == 67
        assert [l.dilation for l in convs if l.kernel == (3, 3)] == [1, 1, 2, 4, 8, 16, 1]

    def test_input_channels_and_dropout(self):
        spec = build_liver_net()
        assert spec.in_channels == 6
        drops = [l for l in spec.pathways[0].layers if l.kind == "dropout"]
        assert len(drops) == 1 and drops[0].rate == 0.5
        assert spec.pathways[0].layers[-1].kind == "softmax"
        assert spec.pathways[0].layers[-2].out_channels == 2


class TestDetectNets:
    def test_dual_concat_width_640(self):
        assert concat_channels(build_dual_pathway_net()) == 640

    def test_single_concat_width_320(self):
        assert concat_channels(build_single_pathway_net(6)) == 320
        assert concat_channels(build_single_pathway_net(9)) == 320

    def test_thirteen_convs_per_pathway(self):
        spec = build_dual_pathway_net()
        for p in spec.pathways:
            assert sum(1 for l in p.layers if l.kind == "conv") == 13

    def test_pathway_receptive_field(self):
        spec = build_dual_pathway_net()
        assert receptive_field(spec.pathways[0]) == (133, 133)
        assert receptive_field(spec) == (133, 133)  # 1x1 head adds nothing

    def test_block_structure(self):
        from hseg.nets import PATHWAY_BLOCK_DILATIONS, PATHWAY_BLOCK_SIZES
        assert PATHWAY_BLOCK_SIZES == (2, 2, 3, 3, 3)
        assert PATHWAY_BLOCK_DILATIONS == (1, 2, 4, 8, 8)
        spec = build_single_pathway_net(6)
        assert len(spec.pathways[0].collect_after) == 5

    def test_input_channel_validation(self):
        with pytest.raises(DataError):
            build_single_pathway_net(4)
        assert build_single_pathway_net(9).in_channels == 9

    def test_fusion_head_layout(self):
        head = build_dual_pathway_net().head
        kinds = [l.kind for l in head]
        assert kinds == ["dropout", "conv", "bn", "relu", "dropout", "conv", "softmax"]
        convs = [l for l in head if l.kind == "conv"]
        assert [c.out_channels for c in convs] == [128, 2]
        assert all(l.rate == 0.2 for l in head if l.kind == "dropout")

    def test_dual_parameter_count_about_twice_single(self):
        dual = Network(build_dual_pathway_net())
        single = Network(build_single_pathway_net(6))
        ratio = dual.param_count(pathways_only=True) / single.param_count(pathways_only=True)
        assert 1.8 <= ratio <= 2.2
        assert dual.param_count() > single.param_count()


class TestReceptiveFieldCalculator:
    def test_single_3x3(self):
        p = PathwaySpec(1, 0, (LayerSpec("conv", (3, 3), 4, 1),))
        assert receptive_field(p) == (3, 3)

    def test_stacked_dilations(self):
        p = PathwaySpec(1, 0, (LayerSpec("conv", (3, 3), 4, 1),
                               LayerSpec("conv", (3, 3), 4, 2)))
        assert receptive_field(p) == (7, 7)

    def test_impulse_response_brute_force(self, rng):
        """Empirical influence region of a 2-conv stack matches the formula."""
        spec = NetworkSpec("liver", 1, (PathwaySpec(1, 0, (
            LayerSpec("conv", (3, 3), 3, 1), LayerSpec("relu"),
            LayerSpec("conv", (3, 3), 1, 2), LayerSpec("softmax"))),))
        # softmax needs 2 channels; rebuild with a valid tail
        spec = NetworkSpec("liver", 1, (PathwaySpec(1, 0, (
            LayerSpec("conv", (3, 3), 3, 1), LayerSpec("relu"),
            LayerSpec("conv", (3, 3), 2, 2), LayerSpec("softmax"))),))
        net = Network(spec)
        net.initialize(rng, "glorot")
        rf = receptive_field(spec)
        assert rf == (7, 7)
        h = w = 19
        x0 = rng.standard_normal((1, h, w, 1)).astype(np.float32)
        base = net.forward(x0, training=False)
        x1 = x0.copy()
        cy = cx = h // 2
        x1[0, cy, cx, 0] += 3.0
        diff = np.abs(net.forward(x1, training=False) - base).sum(axis=-1)[0]
        ys, xs = np.nonzero(diff > 1e-7)
        assert ys.size  # the perturbation must reach the output
        half = rf[0] // 2
        assert ys.min() >= cy - half and ys.max() <= cy + half
        assert xs.min() >= cx - half and xs.max() <= cx + half


def _mark_bn_identity(net):
    for layer in net.layers_flat():
        if layer.kind == "bn":
            layer.n_updates = 1


class TestForwardVolume:
    def test_zero_final_layer_gives_half_probability(self, rng):
        net = build_network("liver")
        net.initialize(rng, "glorot")
        _mark_bn_identity(net)
        final_conv = [l for l in net.layers_flat() if l.kind == "conv"][-1]
        final_conv.w[:] = 0
        final_conv.b[:] = 0
        v = Volume.from_array(rng.standard_normal((6, 3, 20, 20)).astype(np.float32))
        prob = forward_volume(net, v)
        assert prob.channels == 1
        assert np.allclose(prob.data, 0.5, atol=1e-6)

    def test_output_in_unit_interval(self, rng):
        net = build_network("liver")
        net.initialize(rng, "glorot")
        _mark_bn_identity(net)
        v = Volume.from_array(rng.standard_normal((6, 2, 24, 24)).astype(np.float32))
        prob = forward_volume(net, v)
        assert prob.data.min() >= 0.0 and prob.data.max() <= 1.0

    def test_batched_forward_equals_per_slice(self, rng):
        from hseg.volume import extract_slice
        net = build_network("liver")
        net.initialize(rng, "glorot")
        _mark_bn_identity(net)
        v = Volume.from_array(rng.standard_normal((6, 5, 16, 16)).astype(np.float32))
        prob = forward_volume(net, v, batch_slices=3)
        for z in range(5):
            x = extract_slice(v, z).data[None]
            single = net.forward(x, training=False)[0, :, :, 1]
            assert np.allclose(prob.data[0, z], single, atol=1e-6)

    def test_channel_mismatch(self, rng):
        net = build_network("liver")
        net.initialize(rng, "glorot")
        v = Volume.from_array(rng.standard_normal((5, 2, 8, 8)).astype(np.float32))
        with pytest.raises(DataError):
            forward_volume(net, v)


class TestPathwayIsolation:
    def test_dce_features_ignore_dw_input(self, rng):
        net = build_network("dual")
        net.initialize(rng, "he")
        _mark_bn_identity(net)
        x1 = rng.standard_normal((1, 24, 24, 9)).astype(np.float32)
        x2 = x1.copy()
        x2[..., 6:] = rng.standard_normal((1, 24, 24, 3)).astype(np.float32)
        _, feats1 = net.forward(x1, training=False, return_features=True)
        _, feats2 = net.forward(x2, training=False, return_features=True)
        for a, b in zip(feats1[:5], feats2[:5]):  # DCE pathway block-ends
            assert np.array_equal(a, b)
        assert any(not np.array_equal(a, b) for a, b in zip(feats1[5:], feats2[5:]))


class TestDescribe:
    def test_one_line_per_layer(self):
        text = describe(build_dual_pathway_net())
        lines = text.splitlines()
        assert lines[0] == "net dual: input 9ch"
        assert sum("conv 3x3x64" in l for l in lines) == 26
        assert sum("-> collect" in l for l in lines) == 10
        assert any("head: input 640ch" in l for l in lines)

    def test_liver_text(self):
        text = describe(build_liver_net())
        assert "conv 3x3x32 d16" in text
        assert "dropout 0.5" in text


class TestSaveRestore:
    def test_roundtrip_preserves_inference(self, tmp_path, rng):
        net = build_network("single6")
        net.initialize(rng, "he")
        for layer in net.layers_flat():
            if layer.kind == "bn":
                layer.n_updates = 3
                layer.running_mean[:] = rng.standard_normal(layer.channels) * 0.1
                layer.running_var[:] = 1 + 0.1 * rng.random(layer.channels)
        path = tmp_path / "net.hwgt"
        save_network(path, net, trained_steps=3)
        net2, steps, adam = restore_network(path)
        assert steps == 3 and adam is None
        x = rng.standard_normal((1, 16, 16, 6)).astype(np.float32)
        assert np.array_equal(net.forward(x, training=False),
                              net2.forward(x, training=False))
