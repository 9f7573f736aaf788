import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import emocam.attribution as attribution
from conftest import bilinear_map_oracle, build_model, identity_conv
from emocam.attribution import (
    ActivationMap,
    DegenerateScoreError,
    NumericError,
    ablation_cam_raw,
    ablation_weights,
    decode_map,
    encode_map,
    grad_cam_raw,
    normalize_map,
    occlusion_grid_raw,
    read_map,
    write_map,
)
from emocam.engine import forward, forward_split, model_from_descriptor
from emocam.synthetic import small_model

HAND_A = np.array([[[1, 0], [0, 0]], [[0, 0], [0, 1]]], np.float32)


def hand_model(head_weight, relu=False, bias=0.0):
    """Identity 1x1 conv target over a (C, 2, 2) input, then (relu,) flatten, linear -> 1."""
    c = len(head_weight) // 4
    layers = [{"name": "target", "kind": "conv2d", "out_channels": c, "kernel": 1}]
    if relu:
        layers.append({"name": "r", "kind": "relu"})
    layers += [{"name": "f", "kind": "flatten"}, {"name": "fc", "kind": "linear", "out_features": 1}]
    w = identity_conv(c)
    w["fc.weight"] = np.asarray([head_weight], np.float32)
    w["fc.bias"] = np.asarray([bias], np.float32)
    return build_model(layers, (c, 2, 2), 1, weights=w)


class TestGradCam:
    def test_hand_case(self):
        model = hand_model([0.5] * 4 + [-0.5] * 4)
        raw = grad_cam_raw(model, HAND_A, 0, "target")
        assert raw.tolist() == [[0.5, 0.0], [0.0, -0.5]]
        m = normalize_map(raw, 2, 2)
        assert m.values.tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_closed_relu_gives_zero_map(self):
        model = hand_model([1.0] * 4, relu=True)
        raw = grad_cam_raw(model, -np.ones((1, 2, 2), np.float32), 0, "target")
        assert np.all(raw == 0)

    def test_unit_gradient_returns_activation(self):
        model = hand_model([1.0] * 4)
        a = np.array([[[0.25, -1.5], [3.0, 0.125]]], np.float32)
        np.testing.assert_array_equal(grad_cam_raw(model, a, 0, "target"), a[0])

    @pytest.mark.parametrize("scale", [0.5, 3.0, 1e3])
    def test_gradient_scaling(self, scale):
        base = small_model(seed=4)
        x = np.random.default_rng(4).standard_normal(base.input_shape).astype(np.float32)
        w = dict(base.weights)
        w["fc5.weight"] = w["fc5.weight"] * np.float32(scale)
        w["fc5.bias"] = w["fc5.bias"] * np.float32(scale)
        scaled = model_from_descriptor(base.descriptor(), w)
        r1 = grad_cam_raw(base, x, 1, "conv3")
        r2 = grad_cam_raw(scaled, x, 1, "conv3")
        np.testing.assert_allclose(r2, scale * r1, rtol=1e-5, atol=1e-7 * scale * np.abs(r1).max())
        np.testing.assert_allclose(normalize_map(r1, 40, 30).values, normalize_map(r2, 40, 30).values, atol=1e-6)

    def test_shape_is_feature_resolution(self):
        model = small_model()
        x = np.zeros(model.input_shape, np.float32)
        acts, _ = forward_split(model, x, "conv3")
        assert grad_cam_raw(model, x, 0, "conv3").shape == acts.shape[1:]


class TestAblationCam:
    def test_half_drop(self):
        model = hand_model([1.0] * 8)
        a = np.zeros((2, 2, 2), np.float32)
        a[0, 0, 0] = 1.0
        a[1, 1, 1] = 1.0
        acts, _ = forward_split(model, a, "target")
        weights, y_c = ablation_weights(model, "target", acts, 0)
        assert y_c == 2.0
        assert weights.tolist() == [0.5, 0.5]
        assert ablation_cam_raw(model, a, 0, "target").tolist() == [[0.5, 0.0], [0.0, 0.5]]

    def test_unused_channel_weight_zero(self):
        model = hand_model([1.0] * 4 + [0.0] * 4)
        a = np.random.default_rng(0).uniform(0.5, 1, (2, 2, 2)).astype(np.float32)
        weights, _ = ablation_weights(model, "target", a, 0)
        assert weights[1] == 0.0
        assert weights[0] == 1.0

    def test_zero_channel_weight_zero(self):
        model = small_model(seed=1)
        x = np.random.default_rng(1).standard_normal(model.input_shape).astype(np.float32)
        acts, _ = forward_split(model, x, "conv3")
        acts[3] = 0
        weights, _ = ablation_weights(model, "conv3", acts, 2)
        assert weights[3] == 0.0

    def test_degenerate_score(self):
        model = hand_model([1.0] * 4)
        with pytest.raises(DegenerateScoreError):
            ablation_cam_raw(model, np.zeros((1, 2, 2), np.float32), 0, "target")

    def test_exactly_k_plus_one_tail_evaluations(self, monkeypatch):
        model = small_model(seed=2)
        x = np.random.default_rng(2).standard_normal(model.input_shape).astype(np.float32)
        calls = []
        real = attribution.tail_forward
        monkeypatch.setattr(attribution, "tail_forward", lambda *a: calls.append(1) or real(*a))
        ablation_cam_raw(model, x, 0, "conv3")
        assert len(calls) == 16 + 1

    def test_ablated_scores_equal_zeroed_network(self):
        model = small_model(seed=3)
        x = np.random.default_rng(3).standard_normal(model.input_shape).astype(np.float32)
        cls = forward(model, x).predicted_index
        acts, _ = forward_split(model, x, "conv3")
        weights, y_c = ablation_weights(model, "conv3", acts, cls)
        for k in range(acts.shape[0]):
            w = {n: v.copy() for n, v in model.weights.items()}
            w["conv3.weight"][k] = 0
            w["conv3.bias"][k] = 0
            y_k = float(forward(model_from_descriptor(model.descriptor(), w), x).logits[cls])
            assert abs((y_c - y_k) / y_c - weights[k]) * abs(y_c) <= 1e-5


class TestOcclusion:
    def test_input_ignored(self):
        model = small_model(seed=5)
        w = dict(model.weights)
        w["conv1.weight"] = np.zeros_like(w["conv1.weight"])
        blind = model_from_descriptor(model.descriptor(), w)
        x = np.random.default_rng(5).standard_normal(model.input_shape).astype(np.float32)
        assert np.all(occlusion_grid_raw(blind, x, 0, grid_n=4) == 0)

    def test_whole_image(self):
        model = small_model(seed=6)
        x = np.random.default_rng(6).standard_normal(model.input_shape).astype(np.float32)
        raw = occlusion_grid_raw(model, x, 2, grid_n=1, baseline_value=0.0)
        expected = float(forward(model, x).logits[2]) - float(forward(model, np.zeros_like(x)).logits[2])
        assert raw.shape == (1, 1)
        assert raw[0, 0] == expected

    def test_grid_2_brute_force(self):
        model = small_model(seed=7)
        x = np.random.default_rng(7).standard_normal(model.input_shape).astype(np.float32)
        raw = occlusion_grid_raw(model, x, 1, grid_n=2, baseline_value=-0.3)
        y = float(forward(model, x).logits[1])
        for i, rows in enumerate((slice(0, 32), slice(32, 64))):
            for j, cols in enumerate((slice(0, 32), slice(32, 64))):
                occ = x.copy()
                occ[:, rows, cols] = -0.3
                assert abs(raw[i, j] - (y - float(forward(model, occ).logits[1]))) <= 1e-6

    def test_baseline_equal_to_input_gives_zero(self):
        model = small_model(seed=8)
        x = np.full(model.input_shape, 0.25, np.float32)
        x[:, :32, :32] = np.random.default_rng(8).standard_normal((3, 32, 32))
        raw = occlusion_grid_raw(model, x, 0, grid_n=2, baseline_value=0.25)
        assert raw[1, 1] == 0.0 and raw[0, 1] == 0.0 and raw[1, 0] == 0.0

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            occlusion_grid_raw(small_model(), np.zeros((3, 64, 64), np.float32), 0, grid_n=0)


class TestNormalize:
    def test_all_negative(self):
        m = normalize_map(-np.ones((3, 3)), 10, 8)
        assert m.values.shape == (8, 10)
        assert np.all(m.values == 0)

    def test_max_two_halved(self):
        raw = np.array([[2.0, 1.0], [0.5, 0.0]])
        m = normalize_map(raw, 2, 2)
        assert m.values.max() == 1.0
        np.testing.assert_array_equal(m.values, np.float32(raw / 2))

    def test_matches_resize_oracle(self):
        raw = np.array([[0.5, 0.0], [0.0, 0.0]])
        up = bilinear_map_oracle(raw, 4, 4)
        np.testing.assert_allclose(normalize_map(raw, 4, 4).values, up / up.max(), atol=1e-6)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(NumericError):
            normalize_map(np.array([[0.0, bad]]), 2, 2)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), w=st.integers(1, 30), h=st.integers(1, 30))
    def test_invariants(self, seed, w, h):
        r = np.random.default_rng(seed)
        raw = r.normal(size=(int(r.integers(1, 8)), int(r.integers(1, 8))))
        v = normalize_map(raw, w, h).values
        assert v.min() >= 0 and v.max() <= 1
        assert (v.max() == 1.0) != bool(np.all(v == 0))


def test_methods_deterministic():
    model = small_model(seed=9)
    x = np.random.default_rng(9).standard_normal(model.input_shape).astype(np.float32)
    for fn in (lambda: grad_cam_raw(model, x, 0, "conv3"),
               lambda: ablation_cam_raw(model, x, 0, "conv3"),
               lambda: occlusion_grid_raw(model, x, 0, 3)):
        assert fn().tobytes() == fn().tobytes()


class TestMapFile:
    def test_round_trip(self, tmp_path):
        m = ActivationMap(np.random.default_rng(0).random((5, 7)).astype(np.float32))
        write_map(tmp_path / "m.map", m)
        back = read_map(tmp_path / "m.map")
        np.testing.assert_array_equal(back.values, m.values)

    def test_layout(self):
        m = ActivationMap(np.array([[0.0, 1.0, 0.5]], np.float32))
        data = encode_map(m)
        assert data.startswith(b"EMOCAM-MAP v1 3 1\n")
        assert data[len(b"EMOCAM-MAP v1 3 1\n"):] == np.array([0, 1, 0.5], "<f4").tobytes()

    @pytest.mark.parametrize("data", [b"no newline", b"EMOCAM-MAP v2 1 1\n\0\0\0\0", b"EMOCAM-MAP v1 2 1\n\0\0\0\0"])
    def test_malformed(self, data):
        with pytest.raises(ValueError):
            decode_map(data)
