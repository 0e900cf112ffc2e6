import numpy as np
import pytest

from wsloc.data import DatasetManifest, MixComponent, MixSpec
from wsloc.store import ImageStore
from wsloc.synth import SynthConfig, generate_dataset, make_clean_test_set
from wsloc.sweep import (
    SweepError,
    SweepResult,
    SweepRow,
    dataset_type_tag,
    emit_report,
    parse_report_csv,
    run_mixing_sweep,
)
from wsloc.train import PHASE_BASE, PHASE_WSL_HEAD_ONLY, TrainConfig


@pytest.fixture(scope="module")
def micro_world():
    noisy_cfg = SynthConfig(num_classes=3, images_per_class=15, image_size=32,
                            cross_category_rate=0.3, cross_domain_rate=0.2, seed=31)
    noisy_man, noisy_store = generate_dataset(noisy_cfg, name="noisy")
    cur_cfg = SynthConfig(num_classes=3, images_per_class=10, image_size=32, seed=32)
    cur_man, cur_store = make_clean_test_set(cur_cfg, name="curated")
    test_cfg = SynthConfig(num_classes=3, images_per_class=8, image_size=32, seed=33)
    test_man, test_store = make_clean_test_set(test_cfg, name="test")
    manifests = {"noisy": noisy_man, "curated": cur_man}
    store = ImageStore.merge(noisy_store, cur_store)
    return manifests, store, test_man, test_store


def micro_cfgs(seed=0):
    base = TrainConfig(batch_size=16, epochs=1, lr_backbone=1e-3, seed=seed)
    wsl = TrainConfig(batch_size=16, epochs=1, phase=PHASE_WSL_HEAD_ONLY, seed=seed)
    return base, wsl


def spec_for(fraction, tag=0):
    return MixSpec(
        components=(MixComponent("noisy", 1.0, 50 + tag), MixComponent("curated", fraction, 60 + tag)),
        description=f"noisy+curated-{fraction:.2f}",
    )


def test_dataset_type_tags(micro_world):
    manifests, *_ = micro_world
    assert dataset_type_tag(manifests["noisy"]) == "N"
    assert dataset_type_tag(manifests["curated"]) == "C"
    mixed = DatasetManifest(
        "m", manifests["noisy"].label_space,
        manifests["noisy"].records + manifests["curated"].records,
    )
    assert dataset_type_tag(mixed) == "N+C"


def test_single_spec_yields_paired_rows(micro_world):
    manifests, store, test_man, test_store = micro_world
    base_cfg, wsl_cfg = micro_cfgs()
    result = run_mixing_sweep([spec_for(0.5)], manifests, store, test_man, test_store,
                              base_cfg, wsl_cfg, val_fraction=0.2)
    assert len(result.rows) == 2
    without, with_wsl = result.rows
    assert not without.with_wsl and with_wsl.with_wsl
    assert without.description == with_wsl.description
    assert without.type_tag == "N+C"
    assert not result.partial
    point = result.provenance["points"][0]
    assert "base_params_sha256" in point and len(point["base_params_sha256"]) == 64


def test_rows_validate_bounds(micro_world):
    row = SweepRow("x", 10, "N", False, top1=0.5, top5=0.4)
    with pytest.raises(SweepError, match="top-5"):
        row.validate()


def test_sweep_rerun_is_identical(micro_world):
    manifests, store, test_man, test_store = micro_world
    specs = [spec_for(0.0), spec_for(1.0, tag=1)]
    r1 = run_mixing_sweep(specs, manifests, store, test_man, test_store, *micro_cfgs())
    r2 = run_mixing_sweep(specs, manifests, store, test_man, test_store, *micro_cfgs())
    assert r1.rows == r2.rows
    shas1 = [p["base_params_sha256"] for p in r1.provenance["points"]]
    shas2 = [p["base_params_sha256"] for p in r2.provenance["points"]]
    assert shas1 == shas2


def test_report_roundtrip(tmp_path, micro_world):
    manifests, store, test_man, test_store = micro_world
    result = run_mixing_sweep([spec_for(0.0), spec_for(0.5, tag=2)], manifests, store,
                              test_man, test_store, *micro_cfgs())
    paths = emit_report(result, tmp_path)
    assert paths["csv"].exists() and paths["plot"].exists() and paths["provenance"].exists()
    assert parse_report_csv(paths["csv"]) == result.rows


def test_report_marks_winner(tmp_path):
    rows = [
        SweepRow("a", 10, "N", False, 0.5, 0.9),
        SweepRow("a", 10, "N", True, 0.7, 0.95),
        SweepRow("b", 12, "N+C", False, 0.8, 1.0),
        SweepRow("b", 12, "N+C", True, 0.6, 1.0),
    ]
    result = SweepResult(rows=rows, provenance={"points": []})
    paths = emit_report(result, tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0].endswith("wsl_winner")
    assert lines[1].endswith("with_wsl")
    assert lines[2].endswith("without_wsl")


def test_empty_report_is_error(tmp_path):
    with pytest.raises(SweepError, match="empty"):
        emit_report(SweepResult(rows=[], provenance={}), tmp_path)


def test_failed_point_saves_partial_and_raises(tmp_path, micro_world):
    manifests, store, test_man, test_store = micro_world
    bad_spec = MixSpec(components=(MixComponent("missing-pool", 1.0, 0),), description="bad")
    with pytest.raises(SweepError) as excinfo:
        run_mixing_sweep([spec_for(0.0), bad_spec], manifests, store, test_man, test_store,
                         *micro_cfgs(), out_dir=tmp_path)
    partial = excinfo.value.partial_result
    assert partial is not None and partial.partial
    assert len(partial.rows) == 2  # first point completed
    assert (tmp_path / "sweep.csv").exists()
    assert '"partial": true' in (tmp_path / "provenance.json").read_text()


def test_phase_validation(micro_world):
    manifests, store, test_man, test_store = micro_world
    base_cfg, _ = micro_cfgs()
    with pytest.raises(SweepError, match="phase"):
        run_mixing_sweep([spec_for(0.5)], manifests, store, test_man, test_store,
                         base_cfg, base_cfg)
