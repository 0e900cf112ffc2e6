import numpy as np
import pytest

from wsloc.model import (
    BaseModel,
    ModelError,
    ToyBackbone,
    WslHead,
    WslModel,
    bilinear_resize,
    compute_cam,
    global_average_pool,
    init_wsl_from_base,
    spatial_average_pool,
    spatial_max_pool,
    toy_backbone_forward,
    wsl_forward,
)


def random_head(rng, d, k):
    return WslHead(rng.standard_normal((d, k)), rng.standard_normal(k))


# ---------------------------------------------------------------------------
# wsl_forward


def test_constant_grid_gives_constant_maps_and_linear_logits():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(6)
    features = np.tile(v, (5, 5, 1))
    head = random_head(rng, 6, 3)
    maps, logits = wsl_forward(features, head)
    assert np.allclose(maps, maps[0, 0])
    assert np.allclose(logits, v @ head.weights + head.bias)


def test_zero_weights_logits_equal_bias():
    rng = np.random.default_rng(1)
    features = rng.standard_normal((4, 4, 5))
    head = WslHead(np.zeros((5, 3)), np.array([0.5, -1.0, 2.0]))
    _, logits = wsl_forward(features, head)
    assert np.allclose(logits, head.bias)


def test_logits_match_explicit_double_loop():
    rng = np.random.default_rng(2)
    features = rng.standard_normal((4, 4, 3))
    head = random_head(rng, 3, 2)
    _, logits = wsl_forward(features, head)
    expected = np.zeros(2)
    for k in range(2):
        total = 0.0
        for i in range(4):
            for j in range(4):
                total += float(features[i, j] @ head.weights[:, k]) + float(head.bias[k])
        expected[k] = total / 16.0
    assert np.allclose(logits, expected, atol=1e-12)


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(3)
    with pytest.raises(ModelError, match="dim"):
        wsl_forward(rng.standard_normal((4, 4, 3)), random_head(rng, 5, 2))


def test_pooling_linearity_random_pairs():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 40))
        k = int(rng.integers(2, 9))
        features = rng.standard_normal((n, n, d)) * rng.uniform(0.1, 5.0)
        head = random_head(rng, d, k)
        _, logits = wsl_forward(features, head)
        ref = global_average_pool(features) @ head.weights + head.bias
        assert np.allclose(logits, ref, rtol=1e-5, atol=1e-8)


def test_adding_constant_to_one_class_map_shifts_only_that_logit():
    rng = np.random.default_rng(5)
    features = rng.standard_normal((6, 6, 4))
    head = random_head(rng, 4, 3)
    maps, logits = wsl_forward(features, head)
    shifted = maps.copy()
    shifted[:, :, 1] += 2.5
    new_logits = spatial_average_pool(shifted)
    assert np.isclose(new_logits[1], logits[1] + 2.5)
    assert np.allclose(np.delete(new_logits, 1), np.delete(logits, 1))


# ---------------------------------------------------------------------------
# spatial max pooling


def test_max_pool_constant_equals_mean():
    maps = np.full((3, 3, 2), 1.7)
    assert np.allclose(spatial_max_pool(maps), spatial_average_pool(maps))


def test_max_pool_single_peak():
    maps = np.zeros((5, 5, 1))
    maps[2, 3, 0] = 5.0
    assert spatial_max_pool(maps)[0] == 5.0


def test_max_pool_matches_loop():
    rng = np.random.default_rng(6)
    maps = rng.standard_normal((7, 7, 4))
    got = spatial_max_pool(maps)
    expected = [max(maps[i, j, k] for i in range(7) for j in range(7)) for k in range(4)]
    assert np.allclose(got, expected)


def test_max_pool_dominates_average_pool():
    rng = np.random.default_rng(7)
    for _ in range(50):
        maps = rng.standard_normal((5, 5, 3))
        assert (spatial_max_pool(maps) >= spatial_average_pool(maps) - 1e-12).all()


# ---------------------------------------------------------------------------
# bilinear resize and CAM


def test_bilinear_ramp():
    values = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = bilinear_resize(values, 4, 4)
    expected_row = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    assert np.allclose(out, np.tile(expected_row, (4, 1)))


def test_bilinear_matches_pointwise_reference():
    rng = np.random.default_rng(8)
    values = rng.standard_normal((5, 4))
    out_h, out_w = 13, 9
    out = bilinear_resize(values, out_h, out_w)
    for i in range(out_h):
        for j in range(out_w):
            y = i * (5 - 1) / (out_h - 1)
            x = j * (4 - 1) / (out_w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, 4), min(x0 + 1, 3)
            fy, fx = y - y0, x - x0
            ref = (
                values[y0, x0] * (1 - fy) * (1 - fx)
                + values[y0, x1] * (1 - fy) * fx
                + values[y1, x0] * fy * (1 - fx)
                + values[y1, x1] * fy * fx
            )
            assert np.isclose(out[i, j], ref)


def test_bilinear_degenerate_sizes():
    values = np.array([[1.0, 3.0]])
    assert bilinear_resize(values, 1, 1).shape == (1, 1)
    assert np.allclose(bilinear_resize(np.array([[2.0]]), 3, 3), 2.0)


def test_cam_ramp_columns():
    maps = np.zeros((2, 2, 1))
    maps[:, 1, 0] = 1.0
    cam = compute_cam(maps, 0, 4)
    assert np.allclose(cam.values[:, 0], 0.0)
    assert np.allclose(cam.values[:, 3], 1.0)
    assert np.allclose(cam.values[:, 1], 1 / 3)


def test_cam_constant_map_is_all_zero():
    maps = np.full((3, 3, 2), 4.2)
    cam = compute_cam(maps, 1, 16)
    assert (cam.values == 0).all()


def test_cam_corner_preservation():
    rng = np.random.default_rng(9)
    maps = rng.standard_normal((8, 8, 3))
    cam = compute_cam(maps, 2, 299)
    up = bilinear_resize(maps[:, :, 2], 299, 299)
    lo, hi = up.min(), up.max()
    for (oi, oj), (ii, jj) in [((0, 0), (0, 0)), ((0, 298), (0, 7)), ((298, 0), (7, 0)), ((298, 298), (7, 7))]:
        assert np.isclose(cam.values[oi, oj], (maps[ii, jj, 2] - lo) / (hi - lo))


def test_cam_range_and_peak():
    rng = np.random.default_rng(10)
    maps = rng.standard_normal((6, 6, 2))
    cam = compute_cam(maps, 0, 64)
    assert cam.values.min() >= 0.0 and cam.values.max() <= 1.0
    assert np.isclose(cam.values.max(), 1.0)


def test_cam_class_index_out_of_range():
    with pytest.raises(ModelError, match="out of range"):
        compute_cam(np.zeros((4, 4, 2)), 2, 8)


# ---------------------------------------------------------------------------
# initialization from the base classifier


def test_init_copies_parameters():
    rng = np.random.default_rng(11)
    w, b = rng.standard_normal((8, 4)), rng.standard_normal(4)
    head = init_wsl_from_base(w, b)
    assert np.array_equal(head.weights, w) and np.array_equal(head.bias, b)
    w[0, 0] = 99.0  # the copy must be independent
    assert head.weights[0, 0] != 99.0


def test_init_forward_equivalence_on_random_inputs():
    rng = np.random.default_rng(12)
    base = BaseModel.create(4, channels=(3, 8, 12), seed=3)
    wsl = WslModel(base.backbone, init_wsl_from_base(base.fc_weights, base.fc_bias))
    images = rng.random((6, 16, 16, 3))
    base_logits = base.forward(images)
    _, wsl_logits = wsl.forward(images)
    assert np.abs(base_logits - wsl_logits).max() < 1e-5


def test_init_preserves_top1_exactly():
    rng = np.random.default_rng(13)
    base = BaseModel.create(5, channels=(3, 8, 12), seed=4)
    wsl = WslModel(base.backbone, init_wsl_from_base(base.fc_weights, base.fc_bias))
    images = rng.random((20, 16, 16, 3))
    assert np.array_equal(base.forward(images).argmax(1), wsl.forward(images)[1].argmax(1))


def test_init_dimension_mismatch():
    with pytest.raises(ModelError):
        init_wsl_from_base(np.zeros((8, 4)), np.zeros(3))


# ---------------------------------------------------------------------------
# toy backbone


def test_backbone_output_geometry():
    backbone = ToyBackbone.create((3, 8, 16, 16), seed=0)
    assert backbone.total_stride == 8
    features = toy_backbone_forward(np.zeros((64, 64, 3)), backbone)
    assert features.shape == (8, 8, 16)


def test_backbone_zero_input_zero_params_gives_zero_features():
    backbone = ToyBackbone.create((3, 8, 16), seed=0)
    for i in range(backbone.num_stages):
        backbone.weights[i][:] = 0.0
        backbone.biases[i][:] = 0.0
    features = toy_backbone_forward(np.zeros((32, 32, 3)), backbone)
    assert (features == 0).all()


def test_backbone_deterministic_replay():
    rng = np.random.default_rng(14)
    image = rng.random((32, 32, 3))
    a = toy_backbone_forward(image, ToyBackbone.create((3, 6, 9), seed=42))
    b = toy_backbone_forward(image, ToyBackbone.create((3, 6, 9), seed=42))
    assert np.array_equal(a, b)


def test_backbone_rejects_indivisible_input():
    backbone = ToyBackbone.create((3, 4, 4, 4), seed=0)
    with pytest.raises(ModelError, match="divisible"):
        backbone.forward(np.zeros((1, 60, 60, 3)))


def test_backbone_params_roundtrip():
    backbone = ToyBackbone.create((3, 4, 6), seed=5)
    params = {k: v.copy() for k, v in backbone.params().items()}
    other = ToyBackbone.create((3, 4, 6), seed=99)
    other.set_params(params)
    image = np.random.default_rng(0).random((1, 16, 16, 3))
    assert np.array_equal(backbone.forward(image), other.forward(image))
