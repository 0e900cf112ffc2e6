"""Heatmap post-processing: thresholding, connected components, boxes, IoU.

Pipeline: score maps -> class activation map -> relative threshold -> 4-connected
components -> tight bounding boxes. Everything here is a pure function; safe to
call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Heatmap, WslModel, compute_cam


class LocError(Exception):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left pixel (x, y), size (w, h). w, h >= 1."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise LocError(f"box must have w >= 1 and h >= 1, got {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        """One past the rightmost pixel."""
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def threshold_heatmap(heatmap: Heatmap | np.ndarray, tau: float) -> np.ndarray:
    """Boolean mask of cells >= tau * max(heatmap).

    An all-zero heatmap yields an empty mask. Depends only on each value's
    ratio to the maximum, so masks are invariant under positive rescaling and
    nested across increasing tau.
    """
    if not 0 < tau < 1:
        raise LocError(f"tau must be in (0, 1), got {tau}")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    values = values.astype(np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=bool)
    return values >= tau * peak


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _row_runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as (start, stop) column intervals."""
    padded = np.concatenate(([False], row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2], edges[1::2]))


def mask_to_boxes(mask: np.ndarray, min_area: int = 1) -> list[BoundingBox]:
    """Tight boxes around 4-connected components with area >= min_area.

    Uses run-based union-find labeling (a scanline algorithm, distinct from
    the flood-fill reference it is tested against). Boxes are sorted by area
    descending, ties by (y, x).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise LocError(f"mask must be 2-d, got shape {mask.shape}")
    if mask.dtype != bool:
        raise LocError(f"mask must be boolean, got dtype {mask.dtype}")
    if min_area < 1:
        raise LocError(f"min_area must be >= 1, got {min_area}")

    parent: list[int] = []
    # per run-id: x_min, x_max(excl), y_min, y_max(incl), pixel count
    stats: list[list[int]] = []
    prev: list[tuple[int, int, int]] = []  # (start, stop, run_id) for the previous row
    for y in range(mask.shape[0]):
        current: list[tuple[int, int, int]] = []
        for start, stop in _row_runs(mask[y]):
            rid = len(parent)
            parent.append(rid)
            stats.append([start, stop, y, y, stop - start])
            # union with 4-connected runs in the previous row (column overlap)
            for p_start, p_stop, p_rid in prev:
                if p_start < stop and start < p_stop:
                    ra, rb = _find(parent, rid), _find(parent, p_rid)
                    if ra != rb:
                        parent[rb] = ra
            current.append((start, stop, rid))
        prev = current

    merged: dict[int, list[int]] = {}
    for rid, s in enumerate(stats):
        root = _find(parent, rid)
        if root not in merged:
            merged[root] = list(s)
        else:
            m = merged[root]
            m[0] = min(m[0], s[0])
            m[1] = max(m[1], s[1])
            m[2] = min(m[2], s[2])
            m[3] = max(m[3], s[3])
            m[4] += s[4]

    boxes = [
        BoundingBox(x=m[0], y=m[2], w=m[1] - m[0], h=m[3] - m[2] + 1)
        for m in merged.values()
        if m[4] >= min_area
    ]
    boxes.sort(key=lambda b: (-b.area, b.y, b.x))
    return boxes


def default_min_area(height: int, width: int) -> int:
    """Speckle suppression default: 0.5% of the image area, at least 1 px."""
    return max(1, round(0.005 * height * width))


# ---------------------------------------------------------------------------
# overlays and the full localization chain


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to an RGB ramp (dark blue -> green -> red)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * v - 1.5, 0.0, 1.0)
    g = np.clip(1.5 - np.abs(3.0 * v - 1.5), 0.0, 1.0)
    b = np.clip(1.0 - 2.5 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(
    image: np.ndarray,
    heatmap: Heatmap | np.ndarray,
    boxes: list[BoundingBox] | None = None,
    alpha: float = 0.45,
) -> np.ndarray:
    """Alpha-blend the heatmap colormap onto the image and draw box outlines.

    image: HxWx3, uint8 or float in [0, 1]. Returns uint8.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.shape != img.shape[:2]:
        raise LocError(f"heatmap shape {values.shape} does not match image {img.shape[:2]}")
    out = (1 - alpha) * img + alpha * heat_colormap(values)
    h, w = values.shape
    for box in boxes or []:
        x0, y0 = max(box.x, 0), max(box.y, 0)
        x1, y1 = min(box.x2, w), min(box.y2, h)
        out[y0, x0:x1] = (1.0, 1.0, 1.0)
        out[y1 - 1, x0:x1] = (1.0, 1.0, 1.0)
        out[y0:y1, x0] = (1.0, 1.0, 1.0)
        out[y0:y1, x1 - 1] = (1.0, 1.0, 1.0)
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


def localize(
    image: np.ndarray,
    model: WslModel,
    class_k: int,
    tau: float = 0.2,
    min_area: int | None = None,
    alpha: float = 0.45,
    image_id: str = "",
):
    """Full chain for one image: score maps -> CAM -> threshold -> boxes -> overlay.

    image: HxWx3 float in [0, 1] (or uint8). Returns (Heatmap, boxes, overlay).
    An untrained all-zero head gives a constant map, which normalizes to an
    all-zero CAM and therefore an empty box list.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.ndim != 3:
        raise LocError(f"expected one HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    maps, _ = model.forward(img[None])
    cam = compute_cam(maps[0], class_k, (h, w), image_id=image_id)
    mask = threshold_heatmap(cam, tau)
    boxes = mask_to_boxes(mask, min_area if min_area is not None else default_min_area(h, w))
    overlay = render_overlay(img, cam, boxes, alpha=alpha)
    return cam, boxes, overlay
