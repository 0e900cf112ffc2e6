"""Image stores: RGB uint8 arrays keyed by record id.

A store is persisted as one packed ``images.npy`` (all images stacked in
sorted-key order) plus an ``images_index.json`` naming the keys, so that
regenerating the same data produces byte-identical files on disk.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ARRAY_FILE = "images.npy"
INDEX_FILE = "images_index.json"
INDEX_FORMAT = "wsloc-images-v1"


class StoreError(Exception):
    pass


class ImageStore:
    """Mapping of record id -> HxWx3 uint8 image, with packed-file persistence."""

    def __init__(self, images: dict[str, np.ndarray] | None = None):
        self._images: dict[str, np.ndarray] = {}
        if images:
            for key, arr in images.items():
                self.put(key, arr)

    def put(self, key: str, image: np.ndarray) -> None:
        if not isinstance(key, str) or not key:
            raise StoreError(f"image key must be a non-empty string, got {key!r}")
        if key in self._images:
            raise StoreError(f"duplicate image key {key!r}")
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise StoreError(f"image {key!r} must be HxWx3, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise StoreError(f"image {key!r} must be uint8, got {arr.dtype}")
        self._images[key] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._images[key]
        except KeyError:
            raise StoreError(f"no image stored under key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self._images

    def __len__(self) -> int:
        return len(self._images)

    def keys(self):
        return self._images.keys()

    def get_float(self, key: str) -> np.ndarray:
        """Image as float64 in [0, 1]."""
        return self[key].astype(np.float64) / 255.0

    def save(self, directory: str | Path) -> None:
        """Write the packed array + key index. Requires uniform image shapes."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        keys = sorted(self._images)
        if not keys:
            raise StoreError("refusing to save an empty image store")
        shapes = {self._images[k].shape for k in keys}
        if len(shapes) != 1:
            raise StoreError(f"packed save needs uniform image shapes, got {sorted(shapes)}")
        stack = np.stack([self._images[k] for k in keys])
        np.save(directory / ARRAY_FILE, stack)
        index = {"format": INDEX_FORMAT, "keys": keys}
        (directory / INDEX_FILE).write_text(
            json.dumps(index, ensure_ascii=False, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, directory: str | Path) -> "ImageStore":
        directory = Path(directory)
        index_path = directory / INDEX_FILE
        if not index_path.exists():
            raise StoreError(f"no image store found in {directory}")
        index = json.loads(index_path.read_text(encoding="utf-8"))
        if index.get("format") != INDEX_FORMAT:
            raise StoreError(f"unsupported image store format {index.get('format')!r}")
        stack = np.load(directory / ARRAY_FILE)
        keys = index["keys"]
        if len(keys) != stack.shape[0]:
            raise StoreError(f"index lists {len(keys)} keys but array holds {stack.shape[0]}")
        store = cls()
        for i, key in enumerate(keys):
            store.put(key, stack[i])
        return store

    @classmethod
    def merge(cls, *stores: "ImageStore") -> "ImageStore":
        """Combine stores; duplicate keys are an error."""
        merged = cls()
        for store in stores:
            for key in store.keys():
                merged.put(key, store[key])
        return merged


def load_image_file(path: str | Path) -> np.ndarray:
    """Read an image file as HxWx3 uint8 (RGB)."""
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_image_file(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise StoreError(f"expected uint8 image, got {arr.dtype}")
    Image.fromarray(arr).save(path)
