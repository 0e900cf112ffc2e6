"""Mixing-sweep experiments: retrain on curated/uncurated compositions and
evaluate each composition with and without the score-map phase.

Every sweep point composes its training set from a mix spec, trains the base
model from the same initialization seed, evaluates on a fixed clean test set,
then runs the head-only phase on top of that same base checkpoint and
evaluates again. The paired rows therefore share one base checkpoint, which
is recorded in the provenance. Points are independent; a failure aborts the
sweep but partial results are saved and marked as partial.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, MixSpec, compose_mix, split_train_val
from .metrics import topk_accuracy
from .store import ImageStore
from .train import (
    PHASE_BASE,
    PHASE_WSL_HEAD_ONLY,
    TrainConfig,
    base_model_from_checkpoint,
    predict_logits,
    train_base,
    train_wsl,
    wsl_model_from_checkpoint,
)

logger = logging.getLogger(__name__)

REPORT_CSV = "sweep.csv"
REPORT_PLOT = "sweep.png"
REPORT_PROVENANCE = "provenance.json"

CSV_COLUMNS = [
    "dataset",
    "images",
    "type",
    "top1_without_wsl",
    "top1_with_wsl",
    "top5_without_wsl",
    "top5_with_wsl",
    "wsl_winner",
]


class SweepError(Exception):
    def __init__(self, message: str, partial_result: "SweepResult | None" = None):
        super().__init__(message)
        self.partial_result = partial_result


@dataclass(frozen=True)
class SweepRow:
    description: str
    train_size: int
    type_tag: str  # "N" noisy-only, "C" curated-only, "N+C" both
    with_wsl: bool
    top1: float
    top5: float

    def validate(self) -> None:
        if not 0.0 <= self.top1 <= 1.0 or not 0.0 <= self.top5 <= 1.0:
            raise SweepError(f"accuracies out of [0, 1] in row {self}")
        if self.top5 < self.top1 - 1e-12:
            raise SweepError(f"top-5 below top-1 in row {self}")


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    partial: bool = False

    def validate(self) -> None:
        for row in self.rows:
            row.validate()


def dataset_type_tag(manifest: DatasetManifest) -> str:
    """Table-style composition tag from the records' curated flags."""
    flags = {rec.curated for rec in manifest.records}
    if flags == {True}:
        return "C"
    if flags == {False}:
        return "N"
    return "N+C"


def run_mixing_sweep(
    specs: list[MixSpec],
    manifests: dict[str, DatasetManifest],
    store: ImageStore,
    test_manifest: DatasetManifest,
    test_store: ImageStore,
    base_cfg: TrainConfig,
    wsl_cfg: TrainConfig,
    val_fraction: float = 0.1,
    topk: int = 5,
    out_dir: str | Path | None = None,
) -> SweepResult:
    """Train and evaluate every mix spec with both model variants.

    Each point retrains from the same initialization seed (the configs' seed)
    rather than warm-starting, because the points are independent dataset
    compositions. Emits rows in spec order; deterministic given the configs.
    If a point fails, partial results are written to ``out_dir`` (when given)
    and a SweepError carrying them is raised.
    """
    if base_cfg.phase != PHASE_BASE or wsl_cfg.phase != PHASE_WSL_HEAD_ONLY:
        raise SweepError("base_cfg must have phase 'base' and wsl_cfg 'wsl_head_only'")
    for name, manifest in manifests.items():
        if manifest.label_space != test_manifest.label_space:
            raise SweepError(f"manifest {name!r} label space differs from the test set")
    topk = min(topk, test_manifest.num_classes)
    result = SweepResult(
        provenance={
            "val_fraction": val_fraction,
            "topk": topk,
            "base_config": base_cfg.to_dict(),
            "wsl_config": wsl_cfg.to_dict(),
            "test_set": test_manifest.name,
            "points": [],
        }
    )
    try:
        for spec in specs:
            mixed = compose_mix(spec, manifests)
            train_part, val_part = split_train_val(mixed, val_fraction, seed=base_cfg.seed)
            tag = dataset_type_tag(mixed)

            base_ckpt = train_base(train_part, store, base_cfg, val=val_part)
            base_logits, labels = predict_logits(
                base_model_from_checkpoint(base_ckpt), test_manifest, test_store
            )
            row_base = SweepRow(
                description=spec.description,
                train_size=len(mixed.records),
                type_tag=tag,
                with_wsl=False,
                top1=topk_accuracy(base_logits, labels, 1),
                top5=topk_accuracy(base_logits, labels, topk),
            )

            wsl_ckpt = train_wsl(base_ckpt, train_part, store, wsl_cfg, val=val_part)
            wsl_logits, _ = predict_logits(
                wsl_model_from_checkpoint(wsl_ckpt), test_manifest, test_store
            )
            row_wsl = SweepRow(
                description=spec.description,
                train_size=len(mixed.records),
                type_tag=tag,
                with_wsl=True,
                top1=topk_accuracy(wsl_logits, labels, 1),
                top5=topk_accuracy(wsl_logits, labels, topk),
            )
            for row in (row_base, row_wsl):
                row.validate()
                result.rows.append(row)
            result.provenance["points"].append(
                {
                    "description": spec.description,
                    "components": [
                        {"manifest": c.manifest, "fraction": c.fraction, "seed": c.seed}
                        for c in spec.components
                    ],
                    "train_size": len(mixed.records),
                    "train_split": len(train_part.records),
                    "val_split": len(val_part.records),
                    "type": tag,
                    "base_params_sha256": base_ckpt.params_sha256(),
                    "base_selected_epoch": base_ckpt.epoch,
                    "wsl_selected_epoch": wsl_ckpt.epoch,
                }
            )
            logger.info(
                "sweep point %r: top1 %.4f (base) / %.4f (wsl)",
                spec.description, row_base.top1, row_wsl.top1,
            )
    except Exception as exc:
        result.partial = True
        result.provenance["partial_error"] = f"{type(exc).__name__}: {exc}"
        if out_dir is not None and result.rows:
            emit_report(result, out_dir)
        raise SweepError(f"sweep aborted: {exc}", partial_result=result) from exc
    if out_dir is not None:
        emit_report(result, out_dir)
    return result


def _paired_rows(rows: list[SweepRow]):
    """Group rows into (base, wsl) pairs in first-seen order."""
    order: list[tuple] = []
    by_key: dict[tuple, dict] = {}
    for row in rows:
        key = (row.description, row.train_size, row.type_tag)
        if key not in by_key:
            by_key[key] = {}
            order.append(key)
        by_key[key]["with" if row.with_wsl else "without"] = row
    pairs = []
    for key in order:
        slot = by_key[key]
        if "without" not in slot or "with" not in slot:
            raise SweepError("sweep rows are not paired per mix spec")
        pairs.append(slot)
    return pairs


def emit_report(result: SweepResult, out_dir: str | Path) -> dict[str, Path]:
    """Write the accuracy table (CSV), the accuracy-vs-composition plot, and
    the provenance manifest. Number formatting is deterministic, so a rerun
    with identical configs byte-matches the CSV."""
    result.validate()
    if not result.rows:
        raise SweepError("refusing to emit a report for an empty sweep result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = _paired_rows(result.rows)

    csv_path = out_dir / REPORT_CSV
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for pair in pairs:
            base, wsl = pair["without"], pair["with"]
            if wsl.top1 > base.top1:
                winner = "with_wsl"
            elif wsl.top1 < base.top1:
                winner = "without_wsl"
            else:
                winner = "tie"
            # repr round-trips floats exactly, so re-parsing recovers the rows
            writer.writerow(
                [
                    base.description,
                    base.train_size,
                    base.type_tag,
                    repr(base.top1),
                    repr(wsl.top1),
                    repr(base.top5),
                    repr(wsl.top5),
                    winner,
                ]
            )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = np.arange(len(pairs))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(xs, [p["without"].top1 for p in pairs], marker="o", label="without score-map head")
    ax.plot(xs, [p["with"].top1 for p in pairs], marker="s", label="with score-map head")
    ax.set_xticks(xs)
    ax.set_xticklabels([p["without"].description for p in pairs], rotation=30, ha="right")
    ax.set_ylabel("top-1 accuracy on clean test set")
    ax.set_xlabel("training composition")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend()
    title = "accuracy vs. training composition"
    if result.partial:
        title += " (PARTIAL)"
    ax.set_title(title)
    fig.tight_layout()
    plot_path = out_dir / REPORT_PLOT
    fig.savefig(plot_path, dpi=110)
    plt.close(fig)

    prov_path = out_dir / REPORT_PROVENANCE
    payload = dict(result.provenance)
    payload["partial"] = result.partial
    prov_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"csv": csv_path, "plot": plot_path, "provenance": prov_path}


def parse_report_csv(path: str | Path) -> list[SweepRow]:
    """Rebuild sweep rows from an emitted CSV (base row then wsl row per line)."""
    rows: list[SweepRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != CSV_COLUMNS:
            raise SweepError(f"{path} does not look like a sweep report")
        for line in reader:
            common = {
                "description": line["dataset"],
                "train_size": int(line["images"]),
                "type_tag": line["type"],
            }
            rows.append(
                SweepRow(
                    **common,
                    with_wsl=False,
                    top1=float(line["top1_without_wsl"]),
                    top5=float(line["top5_without_wsl"]),
                )
            )
            rows.append(
                SweepRow(
                    **common,
                    with_wsl=True,
                    top1=float(line["top1_with_wsl"]),
                    top5=float(line["top5_with_wsl"]),
                )
            )
    return rows
