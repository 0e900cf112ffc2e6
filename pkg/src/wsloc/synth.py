"""Synthetic multi-object datasets with controllable label noise and exact
localization ground truth.

Each class is a distinct glyph family (shape x texture x hue) drawn at random
scale, position and rotation over a textured background. Two noise mechanisms
mirror what web-harvested training data suffers from:

* cross-category noise: a second glyph from a fixed partner class appears in
  the image while the label stays the primary class (the single weak label
  hides the co-occurring object);
* cross-domain noise: the image is replaced by an out-of-domain distractor
  texture containing no glyph at all, still carrying the class label.

``gt_boxes`` records every glyph actually drawn, so localization quality is
measurable. Generation derives one RNG per image from (seed, stream, class,
index), making it deterministic and parallelizable per image; regeneration
with an identical config is byte-identical.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .data import SOURCE_SYNTHETIC, DatasetManifest, ImageRecord
from .loc import BoundingBox, iou
from .model import bilinear_resize
from .store import ImageStore


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    images_per_class: int = 200
    image_size: int = 64
    cross_category_rate: float = 0.0
    cross_domain_rate: float = 0.0
    clutter_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SynthError(f"need at least 2 classes, got {self.num_classes}")
        if self.images_per_class < 1:
            raise SynthError("images_per_class must be >= 1")
        if self.image_size < 32:
            raise SynthError(f"image_size must be >= 32, got {self.image_size}")
        for rate_name in ("cross_category_rate", "cross_domain_rate", "clutter_rate"):
            rate = getattr(self, rate_name)
            if not 0.0 <= rate <= 1.0:
                raise SynthError(f"{rate_name} must be in [0, 1], got {rate}")


# ---------------------------------------------------------------------------
# glyph families


def _shape_disk(u, v):
    return u * u + v * v <= 1.0


def _shape_square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 1.0


def _shape_triangle(u, v):
    return (v >= -1.0) & (v <= 1.0 - 2.0 * np.abs(u))


def _shape_ring(u, v):
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.45**2)


def _shape_cross(u, v):
    au, av = np.abs(u), np.abs(v)
    return ((au <= 0.34) & (av <= 1.0)) | ((av <= 0.34) & (au <= 1.0))


def _shape_diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _shape_star(u, v):
    r = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)
    return r <= 0.45 + 0.55 * np.abs(np.cos(2.0 * theta))


_SHAPES = (
    ("disk", _shape_disk),
    ("square", _shape_square),
    ("triangle", _shape_triangle),
    ("ring", _shape_ring),
    ("cross", _shape_cross),
    ("diamond", _shape_diamond),
    ("star", _shape_star),
)


def _texture_solid(u, v):
    return np.ones_like(u)


def _texture_striped(u, v):
    return 0.72 + 0.28 * (np.sin(6.0 * u) > 0)


def _texture_checker(u, v):
    return 0.72 + 0.28 * ((np.sin(4.5 * u) * np.sin(4.5 * v)) > 0)


_TEXTURES = (_texture_solid, _texture_striped, _texture_checker)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb)


def class_style(k: int, num_classes: int):
    """(shape name, shape fn, texture fn, rgb color) for class k."""
    shape_name, shape_fn = _SHAPES[k % len(_SHAPES)]
    texture_fn = _TEXTURES[(k // len(_SHAPES)) % len(_TEXTURES)]
    color = _hsv_to_rgb(k / num_classes, 0.8, 0.95)
    return shape_name, shape_fn, texture_fn, color


def label_space_for(num_classes: int) -> tuple[str, ...]:
    return tuple(f"{class_style(k, num_classes)[0]}_{k:02d}" for k in range(num_classes))


def partner_classes(num_classes: int) -> tuple[int, ...]:
    """Fixed co-occurrence partner for each class: a derangement, so the
    partner is always a different class and always the same one."""
    return tuple((k + 1) % num_classes for k in range(num_classes))


# ---------------------------------------------------------------------------
# rendering


def _pixel_grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _mask_bbox(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(
        x=int(cols[0]), y=int(rows[0]),
        w=int(cols[-1] - cols[0] + 1), h=int(rows[-1] - rows[0] + 1),
    )


def _draw_shape(img, rng, shape_fn, texture_fn, color, half_size, cx, cy, angle, noise=0.02):
    """Paint one shape onto img in place; returns its tight bounding box."""
    size = img.shape[0]
    yy, xx = _pixel_grid(size)
    dx = (xx - cx) / half_size
    dy = (yy - cy) / half_size
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    mask = shape_fn(u, v)
    tex = texture_fn(u, v)
    jitter = rng.normal(0.0, noise, (size, size))
    for c in range(3):
        channel = img[:, :, c]
        channel[mask] = np.clip(color[c] * tex[mask] + jitter[mask], 0.0, 1.0)
    return _mask_bbox(mask)


def _draw_glyph(img, rng, k, num_classes, size_range=(0.17, 0.27)):
    """Draw class k's glyph at random scale/position/rotation; margins keep it
    fully inside the image so the box is always in bounds."""
    size = img.shape[0]
    _, shape_fn, texture_fn, color = class_style(k, num_classes)
    half = rng.uniform(*size_range) * size
    margin = 1.5 * half
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return _draw_shape(img, rng, shape_fn, texture_fn, color, half, cx, cy, angle)


def _draw_partner_glyph(img, rng, k, num_classes, existing: list[BoundingBox]):
    """Place the partner glyph so its box overlaps every existing box with
    IoU < 0.5 (rejection sampling with a farthest-corner fallback)."""
    size = img.shape[0]
    _, shape_fn, texture_fn, color = class_style(k, num_classes)
    for _ in range(60):
        half = rng.uniform(0.13, 0.18) * size
        margin = 1.5 * half
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        # probe the box before painting
        probe = np.zeros_like(img)
        box = _draw_shape(probe, rng, shape_fn, texture_fn, color, half, cx, cy, angle, noise=0.0)
        if all(iou(box, other) < 0.4 for other in existing):
            return _draw_shape(img, rng, shape_fn, texture_fn, color, half, cx, cy, angle)
    # fallback: smallest size at the corner farthest from the first existing box
    half = 0.13 * size
    margin = 1.5 * half
    ref = existing[0]
    ref_cx, ref_cy = ref.x + ref.w / 2, ref.y + ref.h / 2
    cx = margin if ref_cx > size / 2 else size - margin
    cy = margin if ref_cy > size / 2 else size - margin
    return _draw_shape(img, rng, shape_fn, texture_fn, color, half, cx, cy, 0.0)


def _lowfreq_field(rng, size: int, grid: int, amplitude: float) -> np.ndarray:
    return bilinear_resize(rng.uniform(-1.0, 1.0, (grid, grid)), size, size) * amplitude


def _render_background(img, rng):
    # amplitude kept low: heavy background texture bleeds into the score maps
    # and blurs the localization signal the datasets exist to measure
    size = img.shape[0]
    base = rng.uniform(0.30, 0.55)
    field = _lowfreq_field(rng, size, 9, 0.025)
    tint = rng.uniform(-0.015, 0.015, 3)
    for c in range(3):
        img[:, :, c] = np.clip(base + field + tint[c], 0.0, 1.0)


def _render_distractor(img, rng):
    """Out-of-domain texture with no glyph: colored noise plus a few flat
    rectangles, nothing resembling a class shape."""
    size = img.shape[0]
    base_rgb = _hsv_to_rgb(rng.uniform(0.0, 1.0), 0.45, rng.uniform(0.35, 0.75))
    field = (
        _lowfreq_field(rng, size, 9, 0.12)
        + _lowfreq_field(rng, size, 17, 0.10)
        + rng.normal(0.0, 0.03, (size, size))
    )
    for c in range(3):
        img[:, :, c] = np.clip(base_rgb[c] * (1.0 + field), 0.0, 1.0)
    for _ in range(int(rng.integers(2, 5))):
        w = int(rng.integers(size // 8, size // 3))
        h = int(rng.integers(size // 8, size // 3))
        x = int(rng.integers(0, size - w))
        y = int(rng.integers(0, size - h))
        color = _hsv_to_rgb(rng.uniform(0.0, 1.0), 0.3, rng.uniform(0.3, 0.9))
        img[y : y + h, x : x + w] = 0.5 * img[y : y + h, x : x + w] + 0.5 * color


def _draw_clutter(img, rng):
    """Small background objects in muted colors; not recorded in gt_boxes."""
    size = img.shape[0]
    for _ in range(int(rng.integers(1, 3))):
        kind = int(rng.integers(0, 2))
        half = rng.uniform(0.05, 0.09) * size
        margin = 1.6 * half
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        color = _hsv_to_rgb(rng.uniform(0.0, 1.0), 0.25, rng.uniform(0.3, 0.8))
        shape_fn = (lambda u, v: (np.abs(v) <= 0.25) & (np.abs(u) <= 1.0)) if kind == 0 else _shape_ring
        _draw_shape(img, rng, shape_fn, _texture_solid, color, half, cx, cy, angle, noise=0.0)


def render_image(cfg: SynthConfig, k: int, rng) -> tuple[np.ndarray, list[tuple[int, BoundingBox]]]:
    """One image for class k. Returns (float image in [0,1], gt boxes).

    The gt box list is empty exactly when the image is a cross-domain
    distractor; it has two entries when the co-occurrence partner fired.
    """
    size = cfg.image_size
    img = np.zeros((size, size, 3))
    if rng.random() < cfg.cross_domain_rate:
        _render_distractor(img, rng)
        return img, []
    _render_background(img, rng)
    if rng.random() < cfg.clutter_rate:
        _draw_clutter(img, rng)
    box = _draw_glyph(img, rng, k, cfg.num_classes)
    gt = [(k, box)]
    if rng.random() < cfg.cross_category_rate:
        partner = partner_classes(cfg.num_classes)[k]
        partner_box = _draw_partner_glyph(img, rng, partner, cfg.num_classes, [box])
        gt.append((partner, partner_box))
    return img, gt


# ---------------------------------------------------------------------------
# dataset assembly


def _slug(name: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9_-]+", "-", name).strip("-")
    if not slug:
        raise SynthError(f"dataset name {name!r} has no usable characters")
    return slug


def _generate(cfg: SynthConfig, name: str, stream: int, curated: bool):
    cfg.validate()
    prefix = _slug(name)
    labels = label_space_for(cfg.num_classes)
    store = ImageStore()
    records = []
    for k in range(cfg.num_classes):
        for i in range(cfg.images_per_class):
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(stream, k, i)))
            img, gt = render_image(cfg, k, rng)
            rec_id = f"{prefix}_{k:02d}_{i:04d}"
            store.put(rec_id, np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8))
            records.append(
                ImageRecord(
                    id=rec_id,
                    path=rec_id,
                    label=k,
                    source=SOURCE_SYNTHETIC,
                    curated=curated,
                    width=cfg.image_size,
                    height=cfg.image_size,
                    gt_boxes=tuple(gt),
                )
            )
    manifest = DatasetManifest(name=name, label_space=labels, records=tuple(records))
    manifest.validate()
    return manifest, store


def generate_dataset(cfg: SynthConfig, name: str = "synth-train"):
    """Noisy training pool: applies the configured noise rates, records tagged
    uncurated. Returns (manifest, image store)."""
    return _generate(cfg, name, stream=0, curated=False)


def make_clean_test_set(cfg: SynthConfig, name: str = "synth-test"):
    """Noise-free evaluation set: rates forced to zero, one glyph per image,
    records tagged curated. Uses a seed stream disjoint from the training
    stream, so the same master seed never reproduces a training image."""
    clean_cfg = replace(cfg, cross_category_rate=0.0, cross_domain_rate=0.0, clutter_rate=0.0)
    return _generate(clean_cfg, name, stream=1, curated=True)
