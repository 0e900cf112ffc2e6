"""Dataset manifests: provenance-tagged image catalogs and the operations on
them (filtering, stratified splitting, curated/uncurated mixing).

Manifest file format (UTF-8, one JSON object per line):

  line 1 (header):  {"format":"wsloc-manifest-v1","name":...,"label_space":[...]}
  lines 2..N:       {"id":...,"path":...,"label":...,"source":...,"curated":...,
                     "width":...,"height":...,"gt_boxes":[[class,x,y,w,h],...]}

The record key order is fixed as written above; ``gt_boxes`` is omitted when
unknown and ``[]`` when the image is known to contain no class object. ``path``
is either a file path or the key of an image-store entry.

All operations are pure over immutable manifests; no shared mutable state.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loc import BoundingBox
from .store import ImageStore

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "wsloc-manifest-v1"
MANIFEST_FILE = "manifest.jsonl"

SOURCE_WEB_SEARCH = "WEB_SEARCH"
SOURCE_CROWD_CURATED = "CROWD_CURATED"
SOURCE_SYNTHETIC = "SYNTHETIC"
SOURCES = (SOURCE_WEB_SEARCH, SOURCE_CROWD_CURATED, SOURCE_SYNTHETIC)


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class ImageRecord:
    """One catalog entry. The label is a single class index even if the image
    contains several objects; that single weak label is the whole point."""

    id: str
    path: str
    label: int
    source: str
    curated: bool
    width: int
    height: int
    gt_boxes: tuple[tuple[int, BoundingBox], ...] | None = None

    def validate(self, num_classes: int) -> None:
        if not self.id:
            raise ManifestError("record with empty id")
        if self.width < 1 or self.height < 1:
            raise ManifestError(
                f"record {self.id!r}: size {self.width}x{self.height} is invalid"
            )
        if not 0 <= self.label < num_classes:
            raise ManifestError(
                f"record {self.id!r}: label {self.label} out of range for K={num_classes}"
            )
        if self.source not in SOURCES:
            raise ManifestError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.gt_boxes is not None:
            for cls, box in self.gt_boxes:
                if not 0 <= cls < num_classes:
                    raise ManifestError(
                        f"record {self.id!r}: gt box class {cls} out of range"
                    )
                if not box.within(self.width, self.height):
                    raise ManifestError(
                        f"record {self.id!r}: gt box {box.as_tuple()} outside "
                        f"{self.width}x{self.height} image"
                    )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    label_space: tuple[str, ...]
    records: tuple[ImageRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "label_space", tuple(self.label_space))
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def num_classes(self) -> int:
        return len(self.label_space)

    def validate(self) -> None:
        if not self.label_space:
            raise ManifestError(f"manifest {self.name!r} has an empty label space")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            rec.validate(self.num_classes)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for rec in self.records:
            counts[rec.label] += 1
        return counts


@dataclass(frozen=True)
class MixComponent:
    manifest: str
    fraction: float
    seed: int


@dataclass(frozen=True)
class MixSpec:
    """Recipe for composing datasets: per source manifest, the fraction of its
    records to sample (without replacement) and the sampling seed."""

    components: tuple[MixComponent, ...]
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    def validate(self) -> None:
        names = [c.manifest for c in self.components]
        if len(names) != len(set(names)):
            raise ManifestError(f"mix spec {self.description!r} lists a manifest twice")
        for c in self.components:
            if not 0.0 <= c.fraction <= 1.0:
                raise ManifestError(
                    f"mix spec {self.description!r}: fraction {c.fraction} outside [0, 1]"
                )


# ---------------------------------------------------------------------------
# manifest file I/O


def _record_to_obj(rec: ImageRecord) -> dict:
    obj = {
        "id": rec.id,
        "path": rec.path,
        "label": rec.label,
        "source": rec.source,
        "curated": rec.curated,
        "width": rec.width,
        "height": rec.height,
    }
    if rec.gt_boxes is not None:
        obj["gt_boxes"] = [[cls, b.x, b.y, b.w, b.h] for cls, b in rec.gt_boxes]
    return obj


def _record_from_obj(obj: dict, line_no: int) -> ImageRecord:
    try:
        gt = obj.get("gt_boxes")
        gt_boxes = None
        if gt is not None:
            gt_boxes = tuple(
                (int(row[0]), BoundingBox(int(row[1]), int(row[2]), int(row[3]), int(row[4])))
                for row in gt
            )
        return ImageRecord(
            id=str(obj["id"]),
            path=str(obj["path"]),
            label=int(obj["label"]),
            source=str(obj["source"]),
            curated=bool(obj["curated"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            gt_boxes=gt_boxes,
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ManifestError(
            f"line {line_no}: malformed record {obj.get('id', '<no id>')!r}: {exc}"
        ) from None


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {"format": MANIFEST_FORMAT, "name": manifest.name, "label_space": list(manifest.label_space)},
            ensure_ascii=False,
            separators=(",", ":"),
        )
    ]
    for rec in manifest.records:
        lines.append(json.dumps(_record_to_obj(rec), ensure_ascii=False, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, image_root: str | Path | None = None) -> DatasetManifest:
    """Parse a manifest file and validate every invariant.

    If ``image_root`` is given, records whose ``path`` does not exist under it
    are reported via a warning (never silently dropped).
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: missing or unsupported manifest header")
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: line {line_no} is not valid JSON: {exc}") from None
        records.append(_record_from_obj(obj, line_no))
    manifest = DatasetManifest(
        name=str(header.get("name", path.stem)),
        label_space=tuple(str(c) for c in header.get("label_space", ())),
        records=tuple(records),
    )
    manifest.validate()
    if image_root is not None:
        missing = missing_image_paths(manifest, image_root)
        if missing:
            logger.warning(
                "%s: %d records reference missing image files: %s",
                path,
                len(missing),
                ", ".join(missing[:10]) + ("..." if len(missing) > 10 else ""),
            )
    return manifest


def missing_image_paths(manifest: DatasetManifest, image_root: str | Path) -> list[str]:
    """Record ids whose path exists neither as a file under image_root nor as
    a key of a packed image store saved there."""
    image_root = Path(image_root)
    store_keys: set[str] = set()
    try:
        store_keys = set(ImageStore.load(image_root).keys())
    except Exception:
        pass
    missing = []
    for rec in manifest.records:
        if rec.path in store_keys or (image_root / rec.path).exists():
            continue
        missing.append(rec.id)
    return missing


def save_dataset(directory: str | Path, manifest: DatasetManifest, store: ImageStore) -> None:
    """Write a dataset directory: manifest.jsonl plus the packed image store."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, directory / MANIFEST_FILE)
    store.save(directory)


def load_dataset(directory: str | Path) -> tuple[DatasetManifest, ImageStore]:
    directory = Path(directory)
    manifest = load_manifest(directory / MANIFEST_FILE)
    store = ImageStore.load(directory)
    return manifest, store


# ---------------------------------------------------------------------------
# operations


def filter_min_dimension(manifest: DatasetManifest, min_px: int) -> DatasetManifest:
    """Keep records with min(width, height) >= min_px, preserving order.

    The boundary is inclusive: an image measuring exactly min_px on its short
    side is kept. Idempotent. The removed count is reported via logging.
    """
    if min_px < 1:
        raise ManifestError(f"min_px must be >= 1, got {min_px}")
    kept = tuple(r for r in manifest.records if min(r.width, r.height) >= min_px)
    removed = len(manifest.records) - len(kept)
    logger.info(
        "filter_min_dimension(min_px=%d) on %r: kept %d, removed %d",
        min_px, manifest.name, len(kept), removed,
    )
    return DatasetManifest(name=manifest.name, label_space=manifest.label_space, records=kept)


def split_train_val(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Disjoint stratified split into (train, val).

    Sampling contract (fixed; reference implementations rely on it): one
    ``np.random.default_rng(seed)`` generator, classes visited in label order;
    for each class val takes ``rng.permutation(class_indices)[:n_val]`` where
    n_val = floor(val_fraction * count + 0.5) (round half up). Record order
    within each side follows the input manifest.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ManifestError(f"val_fraction must be in (0, 1), got {val_fraction}")
    counts = manifest.class_counts()
    for k, count in enumerate(counts):
        if count < 2:
            raise ManifestError(
                f"class {manifest.label_space[k]!r} has {count} records; need at least 2 to split"
            )
    rng = np.random.default_rng(seed)
    val_indices: set[int] = set()
    for k in range(manifest.num_classes):
        class_idx = np.array([i for i, r in enumerate(manifest.records) if r.label == k])
        n_val = int(math.floor(val_fraction * len(class_idx) + 0.5))
        perm = rng.permutation(class_idx)
        val_indices.update(int(i) for i in perm[:n_val])
    train_recs = tuple(r for i, r in enumerate(manifest.records) if i not in val_indices)
    val_recs = tuple(r for i, r in enumerate(manifest.records) if i in val_indices)
    train = DatasetManifest(f"{manifest.name}-train", manifest.label_space, train_recs)
    val = DatasetManifest(f"{manifest.name}-val", manifest.label_space, val_recs)
    return train, val


def compose_mix(spec: MixSpec, manifests: dict[str, DatasetManifest]) -> DatasetManifest:
    """Compose a training set from fractions of several manifests.

    Sampling contract (fixed): per component, k = ceil(fraction * n) records
    are drawn without replacement as ``sorted(rng.choice(n, k, replace=False))``
    with ``rng = np.random.default_rng(component.seed)``; the sorted indices
    preserve source-manifest order, so fraction 1.0 is plain concatenation.
    Components are concatenated in spec order. An id collision gets the
    component manifest's name prefixed (``name:id``).
    """
    spec.validate()
    if not spec.components:
        raise ManifestError(f"mix spec {spec.description!r} has no components")
    label_space: tuple[str, ...] | None = None
    for comp in spec.components:
        if comp.manifest not in manifests:
            raise ManifestError(f"mix component references unknown manifest {comp.manifest!r}")
        space = manifests[comp.manifest].label_space
        if label_space is None:
            label_space = space
        elif space != label_space:
            raise ManifestError(
                f"manifest {comp.manifest!r} label space {space} does not match {label_space}"
            )
    assert label_space is not None

    out: list[ImageRecord] = []
    seen: set[str] = set()
    for comp in spec.components:
        source = manifests[comp.manifest]
        n = len(source.records)
        # slack guards float error in fraction * n (e.g. 0.1 * 50)
        k = 0 if n == 0 else min(n, int(math.ceil(comp.fraction * n - 1e-9)))
        rng = np.random.default_rng(comp.seed)
        idx = sorted(int(i) for i in rng.choice(n, size=k, replace=False)) if k else []
        for i in idx:
            rec = source.records[i]
            if rec.id in seen:
                new_id = f"{comp.manifest}:{rec.id}"
                if new_id in seen:
                    raise ManifestError(f"cannot de-collide record id {rec.id!r}")
                rec = ImageRecord(
                    id=new_id, path=rec.path, label=rec.label, source=rec.source,
                    curated=rec.curated, width=rec.width, height=rec.height,
                    gt_boxes=rec.gt_boxes,
                )
            seen.add(rec.id)
            out.append(rec)
    mixed = DatasetManifest(
        name=spec.description or "mix",
        label_space=label_space,
        records=tuple(out),
    )
    mixed.validate()
    return mixed
