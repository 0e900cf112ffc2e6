"""Score-map classifier head and a small trainable convolutional backbone.

The head is a 1x1 convolution: a DxK weight matrix applied at every cell of an
NxNxD feature grid, giving NxNxK class score maps. Global average pooling over
the maps yields the K logits. Because pooling and the 1x1 convolution are both
linear, average-pooling the maps equals applying the same weights to the
average-pooled features; that identity is what makes exact head initialization
from a pooled-feature linear classifier possible, and it is tested as such.

All arrays are float64, channel-last. Forward passes are pure functions of the
parameters, so concurrent inference over shared parameters is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ModelError(Exception):
    pass


# ---------------------------------------------------------------------------
# spatial pooling


def spatial_average_pool(maps: np.ndarray) -> np.ndarray:
    """Mean over the two spatial axes: (..., N, N, K) -> (..., K)."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 3:
        raise ModelError(f"expected (..., N, N, K) maps, got shape {maps.shape}")
    return maps.mean(axis=(-3, -2))


def spatial_max_pool(maps: np.ndarray) -> np.ndarray:
    """Max over the two spatial axes. Keeps only the strongest response per
    class, so it is the baseline that average pooling is compared against."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 3:
        raise ModelError(f"expected (..., N, N, K) maps, got shape {maps.shape}")
    return maps.max(axis=(-3, -2))


def global_average_pool(features: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes of a feature grid: (..., N, N, D) -> (..., D)."""
    return spatial_average_pool(features)


# ---------------------------------------------------------------------------
# head


@dataclass
class WslHead:
    """1x1-convolution head: weights (D, K), bias (K,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ModelError(f"head weights must be (D, K), got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ModelError(
                f"head bias shape {self.bias.shape} does not match K={self.weights.shape[1]}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ModelError("head parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "WslHead":
        return WslHead(self.weights.copy(), self.bias.copy())


def wsl_forward(features: np.ndarray, head: WslHead) -> tuple[np.ndarray, np.ndarray]:
    """Score maps and logits for a feature grid.

    features: (N, N, D) or (B, N, N, D). Returns (maps, logits) where
    maps[..., i, j, k] = features[..., i, j, :] @ W[:, k] + b[k] and
    logits = spatial mean of the maps.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim not in (3, 4):
        raise ModelError(f"features must be (N, N, D) or (B, N, N, D), got {features.shape}")
    if features.shape[-1] != head.feature_dim:
        raise ModelError(
            f"feature dim {features.shape[-1]} does not match head dim {head.feature_dim}"
        )
    if not np.isfinite(features).all():
        raise ModelError("features must be finite")
    maps = features @ head.weights + head.bias
    logits = spatial_average_pool(maps)
    return maps, logits


def init_wsl_from_base(fc_weights: np.ndarray, fc_bias: np.ndarray) -> WslHead:
    """Head initialized from a pooled-feature linear classifier.

    The copy is exact, so by pooling linearity the score-map model's logits at
    initialization equal the base classifier's logits on every input.
    """
    fc_weights = np.asarray(fc_weights, dtype=np.float64)
    fc_bias = np.asarray(fc_bias, dtype=np.float64)
    if fc_weights.ndim != 2:
        raise ModelError(f"base classifier weights must be (D, K), got {fc_weights.shape}")
    if fc_bias.shape != (fc_weights.shape[1],):
        raise ModelError(
            f"base classifier bias shape {fc_bias.shape} does not match K={fc_weights.shape[1]}"
        )
    return WslHead(fc_weights.copy(), fc_bias.copy())


# ---------------------------------------------------------------------------
# class activation maps


@dataclass
class Heatmap:
    """Per-class localization map, values in [0, 1]."""

    values: np.ndarray
    class_k: int
    image_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ModelError(f"heatmap values must be 2-d, got shape {self.values.shape}")


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with corner alignment.

    Output pixel (i, j) samples source coordinate (i*(H-1)/(out_h-1),
    j*(W-1)/(out_w-1)), so the four corners are copied exactly. A size-1 axis
    on either side degenerates to constant/nearest behaviour.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ModelError(f"bilinear_resize expects a 2-d array, got shape {values.shape}")
    if out_h < 1 or out_w < 1:
        raise ModelError("output size must be at least 1x1")
    h, w = values.shape

    def axis_coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.minimum(ys.astype(int), h - 1)
    x0 = np.minimum(xs.astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - fx) + values[np.ix_(y0, x1)] * fx
    bot = values[np.ix_(y1, x0)] * (1 - fx) + values[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def compute_cam(
    maps: np.ndarray, class_k: int, out_size: int | tuple[int, int], image_id: str = ""
) -> Heatmap:
    """Class activation map: upsample one score map to image size, then
    min-max normalize to [0, 1].

    Normalization happens after upsampling, over the upsampled map, so the
    output maximum is exactly 1 unless the map is constant. A constant map
    normalizes to all zeros (documented convention for the degenerate case).
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 4 and maps.shape[0] == 1:
        maps = maps[0]
    if maps.ndim != 3:
        raise ModelError(f"expected a single image's (N, N, K) maps, got shape {maps.shape}")
    if not 0 <= class_k < maps.shape[-1]:
        raise ModelError(f"class index {class_k} out of range for K={maps.shape[-1]}")
    if isinstance(out_size, int):
        out_h = out_w = out_size
    else:
        out_h, out_w = out_size
    up = bilinear_resize(maps[:, :, class_k], out_h, out_w)
    lo, hi = up.min(), up.max()
    if hi - lo < 1e-12:
        values = np.zeros_like(up)
    else:
        values = (up - lo) / (hi - lo)
    return Heatmap(values=values, class_k=class_k, image_id=image_id)


# ---------------------------------------------------------------------------
# toy backbone: stacked stride-2 3x3 convolutions with ReLU


def _conv_stride2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """One stage: pad 1, 3x3 kernel, stride 2, tanh. x: (B, H, W, Cin) with H, W even.

    Padding replicates the edge rather than zero-filling: zero padding gives
    border cells distinctive features whose class scores drift freely (a
    uniform shift of one class's map is invisible to softmax), which smears
    class activation maps along the image border. tanh keeps the loss smooth
    in every parameter, so central finite differences converge at their
    theoretical O(eps^2) rate. Returns (activations, (x_padded, activations)).
    """
    batch, h, wdt, cin = x.shape
    ho, wo = h // 2, wdt // 2
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    z = np.broadcast_to(b, (batch, ho, wo, cout)).copy()
    for di in range(3):
        for dj in range(3):
            xs = xp[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :]
            z += (xs.reshape(-1, cin) @ w[di, dj]).reshape(batch, ho, wo, cout)
    a = np.tanh(z)
    return a, (xp, a)


def _conv_stride2_backward(cache, w: np.ndarray, d_out: np.ndarray):
    """Gradients for one stage. Returns (d_input, d_w, d_b)."""
    xp, a = cache
    batch, hp, wp, cin = xp.shape
    _, ho, wo, cout = d_out.shape
    dz = d_out * (1.0 - a * a)
    db = dz.sum(axis=(0, 1, 2))
    dz_flat = dz.reshape(-1, cout)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            xs = xp[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :]
            dw[di, dj] = xs.reshape(-1, cin).T @ dz_flat
            dxp[:, di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2, :] += (
                dz_flat @ w[di, dj].T
            ).reshape(batch, ho, wo, cin)
    # fold the replicate-padding gradients back onto the edge pixels
    dx = dxp[:, 1:-1, 1:-1, :].copy()
    dx[:, 0, :, :] += dxp[:, 0, 1:-1, :]
    dx[:, -1, :, :] += dxp[:, -1, 1:-1, :]
    dx[:, :, 0, :] += dxp[:, 1:-1, 0, :]
    dx[:, :, -1, :] += dxp[:, 1:-1, -1, :]
    dx[:, 0, 0, :] += dxp[:, 0, 0, :]
    dx[:, 0, -1, :] += dxp[:, 0, -1, :]
    dx[:, -1, 0, :] += dxp[:, -1, 0, :]
    dx[:, -1, -1, :] += dxp[:, -1, -1, :]
    return dx, dw, db


class ToyBackbone:
    """Small conv stack: each stage halves the spatial size (stride 2, pad 1,
    3x3 kernel, tanh). Three stages give total stride 8, so a 64x64 input
    yields an 8x8 feature grid. Deterministic given its parameters."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ModelError("backbone needs matched, non-empty weight/bias lists")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 4 or w.shape[:2] != (3, 3):
                raise ModelError(f"stage {i} weights must be (3, 3, Cin, Cout), got {w.shape}")
            if b.shape != (w.shape[3],):
                raise ModelError(f"stage {i} bias shape {b.shape} mismatches Cout={w.shape[3]}")

    @classmethod
    def create(cls, channels: tuple[int, ...] = (3, 16, 32, 32), seed: int = 0) -> "ToyBackbone":
        """Fan-in-scaled random init; channels[0] is the input channel count."""
        if len(channels) < 2:
            raise ModelError("need at least one conv stage")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        weights, biases = [], []
        for cin, cout in zip(channels[:-1], channels[1:]):
            scale = np.sqrt(1.0 / (9 * cin))
            weights.append(rng.standard_normal((3, 3, cin, cout)) * scale)
            biases.append(np.zeros(cout))
        return cls(weights, biases)

    @property
    def num_stages(self) -> int:
        return len(self.weights)

    @property
    def total_stride(self) -> int:
        return 2**self.num_stages

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[3]

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.weights[0].shape[2],) + tuple(w.shape[3] for w in self.weights)

    def _check_input(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[3] != self.weights[0].shape[2]:
            raise ModelError(
                f"expected (B, H, W, {self.weights[0].shape[2]}) images, got {images.shape}"
            )
        stride = self.total_stride
        if images.shape[1] % stride or images.shape[2] % stride:
            raise ModelError(
                f"image size {images.shape[1]}x{images.shape[2]} not divisible by stride {stride}"
            )
        return images

    def forward_cached(self, images: np.ndarray):
        x = self._check_input(images)
        caches = []
        for w, b in zip(self.weights, self.biases):
            x, cache = _conv_stride2_forward(x, w, b)
            caches.append(cache)
        return x, caches

    def forward(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, C) images -> (B, H/stride, W/stride, D) features."""
        return self.forward_cached(images)[0]

    def backward(self, caches, d_features: np.ndarray):
        """Backprop through all stages; returns ({'convI.w': dw, 'convI.b': db})."""
        grads = {}
        d = d_features
        for i in range(self.num_stages - 1, -1, -1):
            d, dw, db = _conv_stride2_backward(caches[i], self.weights[i], d)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for i in range(self.num_stages):
            self.weights[i] = np.asarray(params[f"conv{i}.w"], dtype=np.float64)
            self.biases[i] = np.asarray(params[f"conv{i}.b"], dtype=np.float64)

    def copy(self) -> "ToyBackbone":
        return ToyBackbone([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def toy_backbone_forward(image: np.ndarray, backbone: ToyBackbone) -> np.ndarray:
    """Features for a single (H, W, C) image: returns (N, N, D)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ModelError(f"expected a single (H, W, C) image, got shape {image.shape}")
    return backbone.forward(image[None])[0]


# ---------------------------------------------------------------------------
# full models


class BaseModel:
    """Backbone + global average pooling + linear classifier."""

    def __init__(self, backbone: ToyBackbone, fc_weights: np.ndarray, fc_bias: np.ndarray):
        self.backbone = backbone
        self.fc_weights = np.asarray(fc_weights, dtype=np.float64)
        self.fc_bias = np.asarray(fc_bias, dtype=np.float64)
        if self.fc_weights.ndim != 2 or self.fc_weights.shape[0] != backbone.feature_dim:
            raise ModelError(
                f"classifier weights must be ({backbone.feature_dim}, K), got {self.fc_weights.shape}"
            )
        if self.fc_bias.shape != (self.fc_weights.shape[1],):
            raise ModelError("classifier bias shape mismatch")

    @classmethod
    def create(
        cls,
        num_classes: int,
        channels: tuple[int, ...] = (3, 16, 32, 32),
        seed: int = 0,
    ) -> "BaseModel":
        backbone = ToyBackbone.create(channels, seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        fc_w = rng.standard_normal((backbone.feature_dim, num_classes)) * 0.01
        fc_b = np.zeros(num_classes)
        return cls(backbone, fc_w, fc_b)

    @property
    def num_classes(self) -> int:
        return self.fc_weights.shape[1]

    def forward_cached(self, images: np.ndarray):
        features, caches = self.backbone.forward_cached(images)
        pooled = global_average_pool(features)
        logits = pooled @ self.fc_weights + self.fc_bias
        return logits, (caches, features, pooled)

    def forward(self, images: np.ndarray) -> np.ndarray:
        return self.forward_cached(images)[0]

    def backward(self, cache, d_logits: np.ndarray, train_backbone: bool = True):
        caches, features, pooled = cache
        grads = {
            "fc.w": pooled.T @ d_logits,
            "fc.b": d_logits.sum(axis=0),
        }
        if train_backbone:
            n_cells = features.shape[1] * features.shape[2]
            d_pooled = d_logits @ self.fc_weights.T
            d_features = np.broadcast_to(
                d_pooled[:, None, None, :] / n_cells, features.shape
            ).copy()
            grads.update(self.backbone.backward(caches, d_features))
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = self.backbone.params()
        out["fc.w"] = self.fc_weights
        out["fc.b"] = self.fc_bias
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.backbone.set_params(params)
        self.fc_weights = np.asarray(params["fc.w"], dtype=np.float64)
        self.fc_bias = np.asarray(params["fc.b"], dtype=np.float64)

    def copy(self) -> "BaseModel":
        return BaseModel(self.backbone.copy(), self.fc_weights.copy(), self.fc_bias.copy())


class WslModel:
    """Backbone + 1x1-conv score maps + global average pooling."""

    def __init__(self, backbone: ToyBackbone, head: WslHead):
        if head.feature_dim != backbone.feature_dim:
            raise ModelError(
                f"head dim {head.feature_dim} does not match backbone dim {backbone.feature_dim}"
            )
        self.backbone = backbone
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def forward_cached(self, images: np.ndarray):
        features, caches = self.backbone.forward_cached(images)
        maps, logits = wsl_forward(features, self.head)
        return logits, (caches, features, maps)

    def forward(self, images: np.ndarray):
        """Returns (maps, logits) for a batch."""
        logits, (_, _, maps) = self.forward_cached(images)
        return maps, logits

    def backward(self, cache, d_logits: np.ndarray, train_backbone: bool = False):
        caches, features, _ = cache
        batch, n_h, n_w, _ = features.shape
        n_cells = n_h * n_w
        # d maps[b,i,j,k] = d logits[b,k] / N^2 by the average-pooling chain rule
        d_maps = np.broadcast_to(
            d_logits[:, None, None, :] / n_cells, (batch, n_h, n_w, d_logits.shape[1])
        )
        grads = {
            "head.w": features.reshape(-1, features.shape[-1]).T
            @ d_maps.reshape(-1, d_logits.shape[1]),
            "head.b": d_maps.sum(axis=(0, 1, 2)),
        }
        if train_backbone:
            d_features = (d_maps @ self.head.weights.T).copy()
            grads.update(self.backbone.backward(caches, d_features))
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = self.backbone.params()
        out["head.w"] = self.head.weights
        out["head.b"] = self.head.bias
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.backbone.set_params(params)
        self.head = WslHead(params["head.w"], params["head.b"])

    def copy(self) -> "WslModel":
        return WslModel(self.backbone.copy(), self.head.copy())
