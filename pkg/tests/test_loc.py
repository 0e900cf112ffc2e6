import numpy as np
import pytest

from wsloc.loc import (
    BoundingBox,
    LocError,
    default_min_area,
    iou,
    localize,
    mask_to_boxes,
    render_overlay,
    threshold_heatmap,
)
from wsloc.model import Heatmap, ToyBackbone, WslHead, WslModel


# ---------------------------------------------------------------------------
# flood-fill reference for component extraction


def flood_fill_boxes(mask, min_area=1):
    """Stack-based flood fill over 4-neighborhoods; the reference that the
    scanline union-find implementation is checked against."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    boxes = []
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            if len(pixels) < min_area:
                continue
            ys = [p[0] for p in pixels]
            xs = [p[1] for p in pixels]
            boxes.append(
                BoundingBox(x=min(xs), y=min(ys), w=max(xs) - min(xs) + 1, h=max(ys) - min(ys) + 1)
            )
    boxes.sort(key=lambda b: (-b.area, b.y, b.x))
    return boxes


# ---------------------------------------------------------------------------
# threshold_heatmap


def test_threshold_constant_full():
    mask = threshold_heatmap(np.ones((5, 5)), 0.2)
    assert mask.all()


def test_threshold_all_zero_empty():
    mask = threshold_heatmap(np.zeros((4, 6)), 0.5)
    assert not mask.any()


def test_threshold_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    values = rng.random((20, 20))
    mask = threshold_heatmap(values, 0.5)
    expected = values >= 0.5 * values.max()
    assert np.array_equal(mask, expected)


def test_threshold_accepts_heatmap_objects():
    hm = Heatmap(values=np.eye(3), class_k=0)
    assert threshold_heatmap(hm, 0.5).sum() == 3


def test_threshold_tau_domain():
    with pytest.raises(LocError):
        threshold_heatmap(np.ones((2, 2)), 1.0)
    with pytest.raises(LocError):
        threshold_heatmap(np.ones((2, 2)), 0.0)


def test_threshold_nesting_monotonicity():
    rng = np.random.default_rng(1)
    values = rng.random((16, 16))
    taus = [0.1, 0.3, 0.5, 0.7, 0.9]
    masks = [threshold_heatmap(values, t) for t in taus]
    for lo, hi in zip(masks[:-1], masks[1:]):
        assert not (hi & ~lo).any()  # higher tau is a subset


def test_threshold_invariant_under_positive_scaling():
    rng = np.random.default_rng(2)
    values = rng.random((12, 12))
    base = threshold_heatmap(values, 0.4)
    for a in (0.2, 0.55, 0.99):
        assert np.array_equal(threshold_heatmap(values * a, 0.4), base)


# ---------------------------------------------------------------------------
# mask_to_boxes


def test_single_square_box():
    mask = np.zeros((32, 32), dtype=bool)
    mask[5:15, 5:15] = True
    boxes = mask_to_boxes(mask)
    assert boxes == [BoundingBox(5, 5, 10, 10)]


def test_empty_mask_no_boxes():
    assert mask_to_boxes(np.zeros((8, 8), dtype=bool)) == []


def test_two_blobs_match_flood_fill():
    mask = np.zeros((20, 20), dtype=bool)
    mask[2:6, 2:6] = True
    mask[10:18, 9:14] = True
    assert mask_to_boxes(mask) == flood_fill_boxes(mask)


def test_random_masks_match_flood_fill():
    rng = np.random.default_rng(3)
    for _ in range(25):
        mask = rng.random((24, 24)) < rng.uniform(0.2, 0.7)
        assert mask_to_boxes(mask) == flood_fill_boxes(mask)


def test_min_area_filters_speckle():
    mask = np.zeros((16, 16), dtype=bool)
    mask[0, 0] = True
    mask[5:9, 5:9] = True
    assert mask_to_boxes(mask, min_area=2) == [BoundingBox(5, 5, 4, 4)]


def test_diagonal_pixels_are_separate_components():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = True
    assert len(mask_to_boxes(mask)) == 2


def test_mask_dtype_enforced():
    with pytest.raises(LocError, match="boolean"):
        mask_to_boxes(np.zeros((4, 4)))


def test_default_min_area_half_percent():
    assert default_min_area(64, 64) == round(0.005 * 64 * 64)
    assert default_min_area(4, 4) == 1


# ---------------------------------------------------------------------------
# iou


def test_iou_identical():
    b = BoundingBox(3, 4, 10, 12)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BoundingBox(0, 0, 5, 5), BoundingBox(10, 10, 3, 3)) == 0.0


def test_iou_known_overlap():
    a, b = BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 10, 10)
    assert abs(iou(a, b) - 25 / 175) < 1e-12


def test_iou_symmetric_random():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a = BoundingBox(int(rng.integers(0, 20)), int(rng.integers(0, 20)),
                        int(rng.integers(1, 15)), int(rng.integers(1, 15)))
        b = BoundingBox(int(rng.integers(0, 20)), int(rng.integers(0, 20)),
                        int(rng.integers(1, 15)), int(rng.integers(1, 15)))
        assert iou(a, b) == iou(b, a)
        assert iou(a, a) == 1.0


def test_box_validates_size():
    with pytest.raises(LocError):
        BoundingBox(0, 0, 0, 5)


# ---------------------------------------------------------------------------
# localize chain


def zero_head_model():
    backbone = ToyBackbone.create((3, 4, 6), seed=0)
    head = WslHead(np.zeros((6, 3)), np.zeros(3))
    return WslModel(backbone, head)


def test_untrained_zero_head_gives_empty_boxes():
    model = zero_head_model()
    image = np.random.default_rng(5).random((16, 16, 3))
    cam, boxes, overlay = localize(image, model, class_k=1, tau=0.2)
    assert (cam.values == 0).all()
    assert boxes == []
    assert overlay.shape == (16, 16, 3) and overlay.dtype == np.uint8


def test_boxes_shrink_as_tau_rises():
    # peaked synthetic heatmap: nested masks nest their boxes
    yy, xx = np.mgrid[0:40, 0:40]
    values = np.exp(-(((yy - 20) ** 2 + (xx - 14) ** 2) / 60.0))
    hm = Heatmap(values=values / values.max(), class_k=0)
    prev_box = None
    for tau in (0.2, 0.4, 0.6, 0.8):
        boxes = mask_to_boxes(threshold_heatmap(hm, tau))
        assert len(boxes) == 1
        box = boxes[0]
        if prev_box is not None:
            assert box.x >= prev_box.x and box.y >= prev_box.y
            assert box.x2 <= prev_box.x2 and box.y2 <= prev_box.y2
            assert box.area <= prev_box.area
        prev_box = box


def test_boxes_invariant_under_positive_rescaling_of_heatmap():
    rng = np.random.default_rng(6)
    values = rng.random((30, 30)) ** 2
    base_boxes = mask_to_boxes(threshold_heatmap(values, 0.3))
    for a in (0.1, 0.5, 0.9):
        assert mask_to_boxes(threshold_heatmap(values * a, 0.3)) == base_boxes


def test_overlay_draws_box_outline():
    image = np.zeros((12, 12, 3))
    values = np.zeros((12, 12))
    box = BoundingBox(2, 3, 5, 4)
    overlay = render_overlay(image, values, [box], alpha=0.5)
    assert (overlay[3, 2:7] == 255).all()  # top edge drawn white
    assert (overlay[6, 2:7] == 255).all()  # bottom edge


def test_overlay_shape_mismatch():
    with pytest.raises(LocError, match="match"):
        render_overlay(np.zeros((8, 8, 3)), np.zeros((4, 4)), [])
