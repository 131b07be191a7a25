import math

import numpy as np
import pytest
from PIL import Image

from herbid.nnrt import (
    GraphError,
    LayerSpec,
    ModelGraph,
    batchnorm_forward,
    build_tiny_densenet,
    concat_channels,
    conv2d_forward,
    dense_forward,
    dump_activations,
    extract_features,
    forward,
    forward_with_activations,
    global_avg_pool,
    infer_shapes,
    pool_forward,
    softmax,
)


def toy_graph():
    """conv(1->2, 3x3 valid, all-ones kernels) -> gap -> dense(identity) -> softmax."""
    layers = [
        LayerSpec("conv2d", "c1", ["input"], {"filters": 2, "kernel": [3, 3], "stride": [1, 1], "padding": "valid"}),
        LayerSpec("global_avg_pool", "gap", ["c1"]),
        LayerSpec("dense", "logits", ["gap"], {"units": 2}, trainable=True),
        LayerSpec("softmax", "probs", ["logits"]),
    ]
    graph = ModelGraph("toy", (1, 4, 4), layers, head_boundary="gap")
    graph.validate()
    weights = {
        "c1": {"kernel": np.ones((2, 1, 3, 3), dtype=np.float32),
               "bias": np.array([0.5, -0.5], dtype=np.float32)},
        "logits": {"weight": np.eye(2, dtype=np.float32), "bias": np.zeros(2, dtype=np.float32)},
    }
    return graph, weights


class TestConv:
    def test_one_by_one_scaling(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        k = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        out = conv2d_forward(x, k)
        assert np.all(out == 2.0)

    def test_identity_kernel_same_padding(self):
        rng = np.random.default_rng(0)
        x = rng.random((2, 3, 8, 8), dtype=np.float32)
        k = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = conv2d_forward(x, k, padding="same")
        assert np.array_equal(out, x)

    def test_valid_dot_product(self):
        x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
        k = np.ones((1, 1, 2, 2), dtype=np.float32)
        out = conv2d_forward(x, k, padding="valid")
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 10.0

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 3, 4, 4), dtype=np.float32)
        k = np.zeros((2, 5, 3, 3), dtype=np.float32)
        with pytest.raises(GraphError, match=r"\(1, 3, 4, 4\).*\(2, 5, 3, 3\)"):
            conv2d_forward(x, k)


class TestBatchnorm:
    def test_near_identity(self):
        x = np.random.default_rng(1).random((1, 4, 5, 5), dtype=np.float32)
        ones, zeros = np.ones(4, np.float32), np.zeros(4, np.float32)
        out = batchnorm_forward(x, ones, zeros, zeros, ones)
        assert out == pytest.approx(x / math.sqrt(1 + 1e-5), rel=1e-6)

    def test_gamma_zero_collapses_to_beta(self):
        x = np.random.default_rng(2).random((2, 3, 4, 4), dtype=np.float32)
        beta = np.array([1.0, -2.0, 0.5], dtype=np.float32)
        out = batchnorm_forward(x, np.zeros(3, np.float32), beta, np.zeros(3, np.float32), np.ones(3, np.float32))
        for c, b in enumerate(beta):
            assert np.allclose(out[:, c], b)

    def test_closed_form_value(self):
        x = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        out = batchnorm_forward(
            x,
            np.array([3.0], np.float32), np.array([1.0], np.float32),
            np.array([1.0], np.float32), np.array([4.0], np.float32),
        )
        assert out[0, 0, 0, 0] == pytest.approx(2.4999981, rel=1e-6)

    def test_negative_variance_rejected(self):
        x = np.zeros((1, 1, 2, 2), np.float32)
        one = np.ones(1, np.float32)
        with pytest.raises(GraphError):
            batchnorm_forward(x, one, one, one, np.array([-1.0], np.float32))


class TestPooling:
    def test_avg_and_max(self):
        x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
        assert pool_forward(x, "avg", (2, 2), (2, 2))[0, 0, 0, 0] == 2.5
        assert pool_forward(x, "max", (2, 2), (2, 2))[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = np.full((1, 2, 6, 6), 0.3, dtype=np.float32)
        for kind in ("avg", "max"):
            out = pool_forward(x, kind, (2, 2), (2, 2))
            assert np.allclose(out, 0.3)

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            pool_forward(np.zeros((1, 1, 2, 2), np.float32), "max", (3, 3), (1, 1))


class TestConcatAndGap:
    def test_single_input_identity(self):
        x = np.random.default_rng(3).random((1, 4, 3, 3), dtype=np.float32)
        assert concat_channels([x]) is x

    def test_channel_layout(self):
        rng = np.random.default_rng(4)
        a = rng.random((2, 16, 5, 5), dtype=np.float32)
        b = rng.random((2, 8, 5, 5), dtype=np.float32)
        out = concat_channels([a, b])
        assert out.shape == (2, 24, 5, 5)
        assert np.array_equal(out[:, :16], a)
        assert np.array_equal(out[:, 16:], b)

    def test_spatial_mismatch(self):
        a = np.zeros((1, 2, 4, 4), np.float32)
        b = np.zeros((1, 2, 5, 5), np.float32)
        with pytest.raises(GraphError):
            concat_channels([a, b])

    def test_dense_block_channel_arithmetic(self):
        graph, _ = build_tiny_densenet(num_classes=5, input_size=32)
        shapes = infer_shapes(graph)
        assert shapes["b1x4"][0] == 16 + 4 * 8
        assert shapes["b2x4"][0] == 16 + 4 * 8

    def test_gap_values(self):
        x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
        assert global_avg_pool(x)[0, 0] == 2.5
        const = np.full((2, 3, 4, 4), 0.7, dtype=np.float32)
        assert np.allclose(global_avg_pool(const), 0.7)

    def test_gap_linearity(self):
        x = np.random.default_rng(5).random((1, 6, 7, 7), dtype=np.float32)
        assert global_avg_pool(3.0 * x) == pytest.approx(3.0 * global_avg_pool(x), rel=1e-6)


class TestDenseSoftmax:
    def test_uniform_for_zero_logits(self):
        p = softmax(np.zeros((1, 60), dtype=np.float32))
        assert np.all(p == np.float32(1.0 / 60.0))

    def test_shift_invariance_bitwise_on_exact_logits(self):
        z = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        assert np.array_equal(softmax(z), softmax(z + 10.0))

    def test_reference_values(self):
        p = softmax(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
        assert p[0] == pytest.approx([0.09003057, 0.24472847, 0.66524096], abs=1e-7)

    def test_row_sums_and_open_interval(self):
        rng = np.random.default_rng(6)
        z = rng.normal(0, 10, (500, 60)).astype(np.float32)
        p = softmax(z)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6
        assert np.all(p > 0) and np.all(p < 1)

    def test_dense_shape_mismatch(self):
        with pytest.raises(GraphError):
            dense_forward(np.zeros((1, 3), np.float32), np.zeros((2, 4), np.float32), np.zeros(2, np.float32))


class TestForward:
    def test_zero_head_uniform(self):
        graph, weights = build_tiny_densenet(num_classes=7, input_size=32)
        x = np.random.default_rng(7).random((2, 3, 32, 32), dtype=np.float32)
        p = forward(graph, weights, x)
        assert p.shape == (2, 7)
        assert np.all(p == np.float32(1.0 / 7.0))

    def test_infer_deterministic(self):
        graph, weights = build_tiny_densenet(num_classes=4, input_size=32, head_init="random")
        x = np.random.default_rng(8).random((1, 3, 32, 32), dtype=np.float32)
        assert forward(graph, weights, x).tobytes() == forward(graph, weights, x).tobytes()

    def test_toy_graph_hand_computed(self):
        graph, weights = toy_graph()
        x = np.full((1, 1, 4, 4), 0.5, dtype=np.float32)
        # conv: 9 taps * 0.5 = 4.5 (+bias 0.5 / -0.5) -> gap same -> logits (5.0, 4.0)
        z1, z2 = 5.0, 4.0
        e1, e2 = math.exp(z1 - z1), math.exp(z2 - z1)
        expected = np.array([e1 / (e1 + e2), e2 / (e1 + e2)])
        p = forward(graph, weights, x)
        assert p[0] == pytest.approx(expected, rel=1e-6)

    def test_missing_weight_names_layer(self):
        graph, weights = toy_graph()
        del weights["logits"]
        with pytest.raises(GraphError, match="logits"):
            forward(graph, weights, np.zeros((1, 1, 4, 4), np.float32))

    def test_dropout_train_vs_infer(self):
        graph, weights = build_tiny_densenet(num_classes=3, input_size=16, head_init="random", dropout_p=0.5)
        x = np.random.default_rng(9).random((4, 3, 16, 16), dtype=np.float32)
        infer = forward(graph, weights, x, mode="infer")
        t1 = forward(graph, weights, x, mode="train", rng=np.random.default_rng(1))
        t2 = forward(graph, weights, x, mode="train", rng=np.random.default_rng(1))
        assert np.array_equal(t1, t2)
        assert not np.array_equal(infer, t1)
        with pytest.raises(GraphError):
            forward(graph, weights, x, mode="train")


class TestExtractFeatures:
    def test_feature_width_48(self):
        graph, weights = build_tiny_densenet(num_classes=10, input_size=32)
        x = np.random.default_rng(10).random((3, 3, 32, 32), dtype=np.float32)
        feats = extract_features(graph, weights, x)
        assert feats.shape == (3, 48)

    def test_different_images_different_features(self):
        graph, weights = build_tiny_densenet(num_classes=3, input_size=32)
        rng = np.random.default_rng(11)
        a = rng.random((1, 3, 32, 32), dtype=np.float32)
        b = rng.random((1, 3, 32, 32), dtype=np.float32)
        fa = extract_features(graph, weights, a)
        fb = extract_features(graph, weights, b)
        assert not np.array_equal(fa, fb)

    def test_repeatable(self):
        graph, weights = build_tiny_densenet(num_classes=3, input_size=32)
        x = np.random.default_rng(12).random((1, 3, 32, 32), dtype=np.float32)
        assert np.array_equal(extract_features(graph, weights, x), extract_features(graph, weights, x))

    def test_unknown_boundary(self):
        graph, weights = toy_graph()
        graph.head_boundary = "nope"
        with pytest.raises(GraphError):
            extract_features(graph, weights, np.zeros((1, 1, 4, 4), np.float32))


class TestDumpActivations:
    def test_one_png_per_layer(self, tmp_path):
        graph, weights = toy_graph()
        x = np.random.default_rng(13).random((1, 1, 4, 4), dtype=np.float32)
        files = dump_activations(graph, weights, x, tmp_path / "acts")
        assert len(files) == len(graph.layers)
        for f in files:
            assert f.endswith(".png")

    def test_constant_map_mid_gray(self, tmp_path):
        graph, weights = toy_graph()
        weights["c1"]["kernel"][:] = 0.0  # constant activations per channel
        x = np.random.default_rng(14).random((1, 1, 4, 4), dtype=np.float32)
        files = dump_activations(graph, weights, x, tmp_path / "acts")
        img = np.asarray(Image.open(files[0]))
        assert np.all(img == 128)

    def test_sixteen_channel_grid_geometry(self, tmp_path):
        layers = [
            LayerSpec("conv2d", "c", ["input"], {"filters": 16, "kernel": [3, 3], "stride": [1, 1], "padding": "same"}),
            LayerSpec("global_avg_pool", "g", ["c"]),
            LayerSpec("dense", "d", ["g"], {"units": 2}),
            LayerSpec("softmax", "p", ["d"]),
        ]
        graph = ModelGraph("g16", (3, 8, 8), layers, head_boundary="g")
        rng = np.random.default_rng(15)
        weights = {
            "c": {"kernel": rng.standard_normal((16, 3, 3, 3)).astype(np.float32),
                  "bias": np.zeros(16, np.float32)},
            "d": {"weight": rng.standard_normal((2, 16)).astype(np.float32), "bias": np.zeros(2, np.float32)},
        }
        files = dump_activations(graph, weights, rng.random((1, 3, 8, 8), dtype=np.float32), tmp_path / "a")
        grid = np.asarray(Image.open([f for f in files if "c.png" in f][0]))
        assert grid.shape == (4 * 8, 4 * 8)  # 16 tiles in a 4x4 grid


class TestGraphStructure:
    def test_shape_propagation_random_graphs(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            size = int(rng.integers(8, 20))
            layers = []
            cur, c, h, w = "input", 3, size, size
            for i in range(int(rng.integers(1, 4))):
                choice = rng.integers(0, 3)
                if choice == 0:
                    f = int(rng.integers(1, 6))
                    pad = "same" if rng.random() < 0.5 else "valid"
                    layers.append(LayerSpec("conv2d", f"l{i}", [cur],
                                            {"filters": f, "kernel": [3, 3], "stride": [1, 1], "padding": pad}))
                    c = f
                    if pad == "valid":
                        h, w = h - 2, w - 2
                elif choice == 1 and h >= 2 and w >= 2:
                    layers.append(LayerSpec("maxpool", f"l{i}", [cur], {"window": [2, 2], "stride": [2, 2]}))
                    h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
                else:
                    layers.append(LayerSpec("relu", f"l{i}", [cur]))
                cur = f"l{i}"
            layers.append(LayerSpec("global_avg_pool", "gap", [cur]))
            layers.append(LayerSpec("dense", "dn", ["gap"], {"units": 4}))
            layers.append(LayerSpec("softmax", "sm", ["dn"]))
            graph = ModelGraph("rand", (3, size, size), layers, head_boundary="gap")
            graph.validate()
            weights = {}
            gen = np.random.default_rng(17)
            shapes = infer_shapes(graph)
            for layer in graph.layers:
                if layer.kind == "conv2d":
                    cin = shapes[layer.inputs[0]][0]
                    weights[layer.name] = {
                        "kernel": gen.standard_normal((layer.params["filters"], cin, 3, 3)).astype(np.float32),
                        "bias": np.zeros(layer.params["filters"], np.float32),
                    }
                elif layer.kind == "dense":
                    din = shapes[layer.inputs[0]][0]
                    weights[layer.name] = {
                        "weight": gen.standard_normal((layer.params["units"], din)).astype(np.float32),
                        "bias": np.zeros(layer.params["units"], np.float32),
                    }
            x = gen.random((2, 3, size, size), dtype=np.float32)
            _, acts = forward_with_activations(graph, weights, x)
            for name, shape in shapes.items():
                if name == "input":
                    continue
                assert acts[name].shape[1:] == shape, f"{name}: {acts[name].shape[1:]} != {shape}"

    def test_forward_finite_on_fuzzed_inputs(self):
        graph, weights = build_tiny_densenet(num_classes=6, input_size=24, head_init="random")
        rng = np.random.default_rng(18)
        for _ in range(5):
            x = rng.random((2, 3, 24, 24), dtype=np.float32)
            probs, acts = forward_with_activations(graph, weights, x)
            assert np.all(np.isfinite(probs))
            for a in acts.values():
                assert np.all(np.isfinite(a))

    def test_graph_validation_errors(self):
        layers = [LayerSpec("relu", "r", ["ghost"]), LayerSpec("softmax", "s", ["r"])]
        with pytest.raises(GraphError):
            ModelGraph("bad", (3, 8, 8), layers, head_boundary="r").validate()
        layers = [LayerSpec("relu", "r", ["input"])]
        with pytest.raises(GraphError, match="softmax"):
            ModelGraph("bad", (3, 8, 8), layers, head_boundary="r").validate()

    def test_graph_json_round_trip(self):
        graph, _ = build_tiny_densenet(num_classes=3, input_size=16)
        again = ModelGraph.from_dict(graph.to_dict())
        assert again.to_dict() == graph.to_dict()

    def test_only_head_trainable(self):
        graph, _ = build_tiny_densenet(num_classes=3)
        trainable = [l.name for l in graph.layers if l.trainable]
        assert trainable == ["head"]
