"""Command-line entry point wiring all modules together.

Subcommands: ``dataset {filter,split,mix}``, ``synth generate``,
``train {base,wsl}``, ``eval``, ``sweep run``, ``cam``.

Every artifact-producing command writes exactly one ``run_manifest.json``
alongside its outputs, recording the command, the fully resolved config, the
seeds, input/output paths, the tool version and the wall-clock duration, so a
run can be reproduced from its manifest alone. Config precedence is CLI flags
over config file over defaults. Exit codes: 0 success, 2 usage error, 1
runtime error. The only honored environment variable is ``WSLOC_OUT``, which
overrides the default output directory when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    MANIFEST_FILE,
    DatasetManifest,
    ManifestError,
    MixComponent,
    MixSpec,
    compose_mix,
    filter_min_dimension,
    load_dataset,
    load_manifest,
    save_dataset,
    save_manifest,
    split_train_val,
)
from .loc import LocError, localize
from .metrics import MetricsError, confusion_matrix, predictions, topk_accuracy
from .model import ModelError
from .store import ImageStore, StoreError, load_image_file, save_image_file
from .synth import SynthConfig, SynthError, generate_dataset, make_clean_test_set
from .sweep import SweepError, run_mixing_sweep
from .train import (
    PHASE_BASE,
    PHASE_WSL_HEAD_ONLY,
    TrainConfig,
    TrainError,
    base_model_from_checkpoint,
    export_history_csv,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    train_base,
    train_wsl,
    wsl_model_from_checkpoint,
)

logger = logging.getLogger(__name__)

RUN_MANIFEST_FILE = "run_manifest.json"

_KNOWN_ERRORS = (
    ManifestError,
    StoreError,
    SynthError,
    ModelError,
    TrainError,
    MetricsError,
    SweepError,
    LocError,
    ValueError,
    OSError,
    json.JSONDecodeError,
)


def _resolve_out(explicit: str | None) -> Path:
    out = explicit or os.environ.get("WSLOC_OUT")
    if not out:
        raise ValueError("no output directory: pass --out or set WSLOC_OUT")
    return Path(out)


def _write_run_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                        seeds: dict, inputs: list, outputs: list, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": list(argv),
        "resolved_config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    (out_dir / RUN_MANIFEST_FILE).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# dataset commands


def cmd_dataset_filter(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    manifest = load_manifest(args.manifest)
    before = len(manifest.records)
    filtered = filter_min_dimension(manifest, args.min_px)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(filtered, out_dir / MANIFEST_FILE)
    print(f"kept {len(filtered.records)} of {before} records (removed {before - len(filtered.records)})")
    _write_run_manifest(
        out_dir, "dataset filter", argv,
        {"manifest": str(args.manifest), "min_px": args.min_px},
        {}, [args.manifest], [out_dir / MANIFEST_FILE], started,
    )
    return 0


def cmd_dataset_split(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    manifest = load_manifest(args.manifest)
    train_part, val_part = split_train_val(manifest, args.val_frac, args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path, val_path = out_dir / "train.jsonl", out_dir / "val.jsonl"
    save_manifest(train_part, train_path)
    save_manifest(val_part, val_path)
    print(f"train: {len(train_part.records)} records, val: {len(val_part.records)} records")
    _write_run_manifest(
        out_dir, "dataset split", argv,
        {"manifest": str(args.manifest), "val_frac": args.val_frac, "seed": args.seed},
        {"split": args.seed}, [args.manifest], [train_path, val_path], started,
    )
    return 0


def _load_mix_spec(path: Path) -> tuple[MixSpec, dict[str, DatasetManifest], list[Path]]:
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    manifests: dict[str, DatasetManifest] = {}
    components = []
    inputs = []
    for comp in cfg["components"]:
        manifest_path = Path(comp["manifest"])
        manifest = load_manifest(manifest_path)
        if manifest.name in manifests:
            raise ManifestError(f"two mix components share the manifest name {manifest.name!r}")
        manifests[manifest.name] = manifest
        inputs.append(manifest_path)
        components.append(
            MixComponent(manifest=manifest.name, fraction=float(comp["fraction"]), seed=int(comp["seed"]))
        )
    spec = MixSpec(components=tuple(components), description=str(cfg.get("description", "mix")))
    return spec, manifests, inputs


def cmd_dataset_mix(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    spec, manifests, inputs = _load_mix_spec(args.spec)
    mixed = compose_mix(spec, manifests)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(mixed, out_dir / MANIFEST_FILE)
    print(f"composed {len(mixed.records)} records from {len(spec.components)} components")
    _write_run_manifest(
        out_dir, "dataset mix", argv,
        {"spec": str(args.spec), "description": spec.description,
         "components": [{"manifest": c.manifest, "fraction": c.fraction, "seed": c.seed}
                        for c in spec.components]},
        {c.manifest: c.seed for c in spec.components},
        [args.spec, *inputs], [out_dir / MANIFEST_FILE], started,
    )
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth_generate(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    cfg = SynthConfig(
        num_classes=args.classes,
        images_per_class=args.per_class,
        image_size=args.image_size,
        cross_category_rate=args.cross_cat,
        cross_domain_rate=args.cross_dom,
        clutter_rate=args.clutter,
        seed=args.seed,
    )
    if args.clean:
        manifest, store = make_clean_test_set(cfg, name=args.name or "synth-test")
    else:
        manifest, store = generate_dataset(cfg, name=args.name or "synth-train")
    save_dataset(out_dir, manifest, store)
    n_distractor = sum(1 for r in manifest.records if r.gt_boxes is not None and not r.gt_boxes)
    n_multi = sum(1 for r in manifest.records if r.gt_boxes is not None and len(r.gt_boxes) > 1)
    print(
        f"generated {len(manifest.records)} images ({cfg.num_classes} classes): "
        f"{n_distractor} out-of-domain distractors, {n_multi} with a co-occurring glyph"
    )
    _write_run_manifest(
        out_dir, "synth generate", argv,
        {"synth_config": cfg.__dict__ | {}, "clean": args.clean, "name": manifest.name},
        {"synth": cfg.seed}, [], [out_dir / MANIFEST_FILE, out_dir / "images.npy"], started,
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _merge_train_config(args, phase: str) -> TrainConfig:
    from_file: dict = {}
    if getattr(args, "config", None):
        from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
    flag_map = {
        "batch_size": getattr(args, "batch_size", None),
        "lr_head": getattr(args, "lr_head", None),
        "lr_backbone": getattr(args, "lr_backbone", None),
        "optimizer": getattr(args, "optimizer", None),
        "epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
    }
    overrides = {k: v for k, v in flag_map.items() if v is not None}
    merged = {**from_file, **overrides, "phase": phase}
    return TrainConfig.from_dict(merged)


def _split_for_training(manifest, val_frac: float, seed: int):
    if val_frac <= 0:
        return manifest, None
    return split_train_val(manifest, val_frac, seed)


def cmd_train_base(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    cfg = _merge_train_config(args, PHASE_BASE)
    manifest, store = load_dataset(args.data)
    train_part, val_part = _split_for_training(manifest, args.val_frac, cfg.seed)
    ckpt = train_base(train_part, store, cfg, val=val_part)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, ckpt_path)
    export_history_csv(ckpt, out_dir / "history.csv")
    last = ckpt.history[-1] if ckpt.history else {}
    print(
        f"base training done: selected epoch {ckpt.epoch}"
        + (f", val top-1 {last.get('val_top1'):.4f}" if last.get("val_top1") is not None else "")
        + (" [ABORTED: non-finite loss]" if ckpt.aborted_nan else "")
    )
    _write_run_manifest(
        out_dir, "train base", argv,
        {"train_config": cfg.to_dict(), "data": str(args.data), "val_frac": args.val_frac},
        {"train": cfg.seed}, [args.data], [ckpt_path, out_dir / "history.csv"], started,
    )
    return 0


def cmd_train_wsl(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    cfg = _merge_train_config(args, PHASE_WSL_HEAD_ONLY)
    base_ckpt = load_checkpoint(args.base)
    manifest, store = load_dataset(args.data)
    train_part, val_part = _split_for_training(manifest, args.val_frac, cfg.seed)
    ckpt = train_wsl(base_ckpt, train_part, store, cfg, val=val_part)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, ckpt_path)
    export_history_csv(ckpt, out_dir / "history.csv")
    print(f"head-only training done: selected epoch {ckpt.epoch}"
          + (" [ABORTED: non-finite loss]" if ckpt.aborted_nan else ""))
    _write_run_manifest(
        out_dir, "train wsl", argv,
        {"train_config": cfg.to_dict(), "data": str(args.data), "base": str(args.base),
         "val_frac": args.val_frac},
        {"train": cfg.seed}, [args.base, args.data], [ckpt_path, out_dir / "history.csv"], started,
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    ckpt = load_checkpoint(args.ckpt)
    manifest, store = load_dataset(args.data)
    variant = args.variant
    if variant == "auto":
        variant = "wsl" if ckpt.has_head else "base"
    if variant == "wsl":
        model = wsl_model_from_checkpoint(ckpt)
    else:
        model = base_model_from_checkpoint(ckpt)
    logits, labels = predict_logits(model, manifest, store)
    k = min(args.topk, manifest.num_classes)
    top1 = topk_accuracy(logits, labels, 1)
    topk = topk_accuracy(logits, labels, k)
    counts = confusion_matrix(predictions(logits), labels, manifest.num_classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    lines = ["metric,value", f"n_samples,{len(labels)}", f"top1,{top1!r}", f"top{k},{topk!r}"]
    metrics_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    confusion_path = out_dir / "confusion.csv"
    with open(confusion_path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(manifest.label_space) + "\n")
        for i, row in enumerate(counts):
            fh.write(manifest.label_space[i] + "," + ",".join(str(int(v)) for v in row) + "\n")
    print(f"{variant} model on {manifest.name!r}: top-1 {top1:.4f}, top-{k} {topk:.4f}")
    _write_run_manifest(
        out_dir, "eval", argv,
        {"ckpt": str(args.ckpt), "data": str(args.data), "variant": variant, "topk": k},
        {}, [args.ckpt, args.data], [metrics_path, confusion_path], started,
    )
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep_run(args, argv) -> int:
    started = time.monotonic()
    out_dir = _resolve_out(args.out)
    cfg = json.loads(Path(args.specs).read_text(encoding="utf-8"))
    pools = cfg.get("pools", {})
    manifests: dict[str, DatasetManifest] = {}
    stores = []
    inputs = [args.specs, args.test]
    for name, directory in pools.items():
        manifest, store = load_dataset(directory)
        if manifest.name != name:
            manifest = DatasetManifest(name, manifest.label_space, manifest.records)
        manifests[name] = manifest
        stores.append(store)
        inputs.append(directory)
    store = ImageStore.merge(*stores)
    test_manifest, test_store = load_dataset(args.test)
    specs = [
        MixSpec(
            components=tuple(
                MixComponent(c["manifest"], float(c["fraction"]), int(c["seed"]))
                for c in spec["components"]
            ),
            description=str(spec.get("description", f"mix-{i}")),
        )
        for i, spec in enumerate(cfg["specs"])
    ]
    base_cfg = TrainConfig.from_dict({**cfg.get("base", {}), "phase": PHASE_BASE})
    wsl_cfg = TrainConfig.from_dict({**cfg.get("wsl", {}), "phase": PHASE_WSL_HEAD_ONLY})
    if args.seed is not None:
        base_cfg = TrainConfig.from_dict({**base_cfg.to_dict(), "seed": args.seed})
        wsl_cfg = TrainConfig.from_dict({**wsl_cfg.to_dict(), "seed": args.seed})
    result = run_mixing_sweep(
        specs, manifests, store, test_manifest, test_store,
        base_cfg, wsl_cfg,
        val_fraction=float(cfg.get("val_fraction", 0.1)),
        topk=int(cfg.get("topk", 5)),
        out_dir=out_dir,
    )
    for row in result.rows:
        tag = "with" if row.with_wsl else "without"
        print(f"{row.description} [{row.type_tag}] {tag} score-map head: top-1 {row.top1:.4f}")
    _write_run_manifest(
        out_dir, "sweep run", argv,
        {"specs_file": str(args.specs), "specs": cfg, "base_config": base_cfg.to_dict(),
         "wsl_config": wsl_cfg.to_dict()},
        {"train": base_cfg.seed}, inputs,
        [out_dir / "sweep.csv", out_dir / "sweep.png", out_dir / "provenance.json"], started,
    )
    return 0


# ---------------------------------------------------------------------------
# cam


def cmd_cam(args, argv) -> int:
    started = time.monotonic()
    ckpt = load_checkpoint(args.ckpt)
    image = load_image_file(args.image)
    model = wsl_model_from_checkpoint(ckpt)
    if not 0 <= args.class_k < len(ckpt.label_space):
        raise ValueError(f"--class-k {args.class_k} out of range for K={len(ckpt.label_space)}")
    image_id = Path(args.image).stem
    heatmap, boxes, overlay = localize(
        image, model, args.class_k, tau=args.tau,
        min_area=args.min_area, alpha=args.alpha, image_id=image_id,
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image_file(out_path, overlay)
    boxes_path = Path(args.boxes)
    boxes_path.parent.mkdir(parents=True, exist_ok=True)
    with open(boxes_path, "w", encoding="utf-8") as fh:
        fh.write("id,class,x,y,w,h,score\n")
        for box in boxes:
            score = float(heatmap.values[box.y : box.y2, box.x : box.x2].max())
            fh.write(f"{image_id},{args.class_k},{box.x},{box.y},{box.w},{box.h},{score!r}\n")
    print(f"{len(boxes)} box(es) for class {ckpt.label_space[args.class_k]!r} -> {out_path}")
    _write_run_manifest(
        out_path.parent, "cam", argv,
        {"image": str(args.image), "ckpt": str(args.ckpt), "class_k": args.class_k,
         "tau": args.tau, "min_area": args.min_area, "alpha": args.alpha},
        {}, [args.image, args.ckpt], [out_path, boxes_path], started,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsloc",
        description="Weakly supervised classification and localization toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"wsloc {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="{dataset,synth,train,eval,sweep,cam}")

    p_dataset = sub.add_parser("dataset", help="manifest operations")
    dataset_sub = p_dataset.add_subparsers(dest="action")

    p = dataset_sub.add_parser("filter", help="drop records below a minimum pixel dimension")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-px", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_filter)

    p = dataset_sub.add_parser("split", help="stratified train/validation split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_split)

    p = dataset_sub.add_parser("mix", help="compose datasets per a mix spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_mix)

    p_synth = sub.add_parser("synth", help="synthetic dataset generation")
    synth_sub = p_synth.add_subparsers(dest="action")
    p = synth_sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--cross-cat", type=float, default=0.0)
    p.add_argument("--cross-dom", type=float, default=0.0)
    p.add_argument("--clutter", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--clean", action="store_true",
                   help="noise-free curated set on a disjoint seed stream")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_generate)

    p_train = sub.add_parser("train", help="model training")
    train_sub = p_train.add_subparsers(dest="action")
    for phase in ("base", "wsl"):
        p = train_sub.add_parser(phase)
        if phase == "wsl":
            p.add_argument("--base", required=True, help="base checkpoint to start from")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", help="JSON file mirroring the train config fields")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr-head", type=float)
        p.add_argument("--lr-backbone", type=float)
        p.add_argument("--optimizer", choices=["adam", "sgd"])
        p.add_argument("--seed", type=int)
        p.add_argument("--val-frac", type=float, default=0.1)
        p.add_argument("--out")
        p.set_defaults(func=cmd_train_base if phase == "base" else cmd_train_wsl)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=["auto", "base", "wsl"], default="auto")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="mixing-sweep experiments")
    sweep_sub = p_sweep.add_subparsers(dest="action")
    p = sweep_sub.add_parser("run")
    p.add_argument("--specs", required=True, help="JSON sweep config")
    p.add_argument("--test", required=True, help="clean test dataset directory")
    p.add_argument("--seed", type=int, help="override the train seeds in the config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_run)

    p = sub.add_parser("cam", help="class activation map and boxes for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class-k", type=int, required=True)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--min-area", type=int)
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--out", required=True, help="overlay image path")
    p.add_argument("--boxes", required=True, help="boxes CSV path")
    p.set_defaults(func=cmd_cam)

    return parser


def dispatch(argv: list[str]) -> int:
    """Route argv to a subcommand. 0 on success, 2 on usage error, 1 otherwise."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        print("error: missing subcommand", file=sys.stderr)
        return 2
    try:
        return int(args.func(args, argv) or 0)
    except _KNOWN_ERRORS as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
