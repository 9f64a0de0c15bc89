#!/usr/bin/env python3
"""
End-to-end tests of the insertion pipeline on the synthetic scene.
"""

import json
import shlex
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import insert_processor
from errors import IoError, StageError
from geometry import project_points
from insert_processor import InsertionProcessor, run_insert_pipeline
from pipeline_config import PipelineConfig
from synthetic_scene import write_synthetic_package


def _png(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image)


@pytest.fixture(scope="module")
def package(tmp_path_factory):
    return write_synthetic_package(tmp_path_factory.mktemp("synthetic"))


def _config(package, out: Path, **overrides) -> PipelineConfig:
    config = PipelineConfig(scene=str(package["manifest"]), mesh=str(package["mesh"]), output_dir=str(out))
    config.stabilization.flow_dir = str(package["flow_dir"])
    config.render.samples = 4
    config.render.softness_samples = 4
    config.apply_overrides(overrides)
    return config


def test_full_run_writes_every_frame(package, tmp_path):
    manifest_path = run_insert_pipeline(_config(package, tmp_path / "out"))
    manifest = json.loads(manifest_path.read_text())
    assert manifest_path.name == "run_manifest.json"
    assert len(manifest["frames"]) == 5
    assert len(manifest["config_hash"]) == 64
    assert manifest["placement"]["anchor_world"] == pytest.approx([6.0, 0.0, 0.0, 1.0], abs=1e-9)

    for frame in manifest["frames"]:
        for name in frame["files"].values():
            assert (tmp_path / "out" / name).is_file()
        assert frame["visible"]
        assert frame["placement_pixel"] == frame["stabilized_pixel"]

    # the cube is in view and casts a shadow
    last = manifest["frames"][-1]["files"]
    assert _png(tmp_path / "out" / last["object_mask"]).max() == 255
    assert max(_png(tmp_path / "out" / f["files"]["shadow_mask"]).max() for f in manifest["frames"]) > 0
    assert (tmp_path / "out" / "stabilization_residuals.csv").is_file()


def test_stabilized_track_follows_true_projection(package, tmp_path):
    processor = InsertionProcessor(_config(package, tmp_path / "out"))
    processor.load()
    processor.place()
    processor.stabilize()
    scene = processor.scene
    for n, entry in enumerate(processor.track.entries):
        expected, _ = project_points(scene.intrinsics, scene.poses[n], processor.raw_track.anchor_world)
        assert np.allclose(entry.pixel, expected[0], atol=0.1)
    assert not processor.warnings


def test_runs_are_byte_identical(package, tmp_path):
    out = tmp_path / "out"
    config = _config(package, out, jobs=2)
    run_insert_pipeline(config)
    first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    for p in out.iterdir():
        p.unlink()
    run_insert_pipeline(_config(package, out, jobs=1))
    second = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    assert first.keys() == second.keys()
    # jobs is part of the recorded config; everything else must match exactly
    assert all(first[name] == second[name] for name in first if name != "run_manifest.json")


def test_unplaceable_classes_fail_the_place_stage(package, tmp_path):
    config = _config(package, tmp_path / "out", **{"placement.allowed_classes": ["nonexistent"]})
    with pytest.raises(StageError) as excinfo:
        run_insert_pipeline(config)
    assert excinfo.value.stage == "place"
    assert not (tmp_path / "out").exists()


def _failing_report(path, residuals):
    raise IoError(f"Cannot write {path}: disk full")


def test_write_failure_leaves_no_output_folder(package, tmp_path, monkeypatch):
    monkeypatch.setattr(insert_processor, "write_residual_report", _failing_report)
    with pytest.raises(StageError) as excinfo:
        run_insert_pipeline(_config(package, tmp_path / "out"))
    assert excinfo.value.stage == "write"
    assert not (tmp_path / "out").exists()
    assert list(tmp_path.iterdir()) == []


def test_write_failure_keeps_previous_run(package, tmp_path, monkeypatch):
    out = tmp_path / "out"
    run_insert_pipeline(_config(package, out))
    before = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    monkeypatch.setattr(insert_processor, "write_residual_report", _failing_report)
    with pytest.raises(StageError):
        run_insert_pipeline(_config(package, out))
    assert {p.name: p.read_bytes() for p in sorted(out.iterdir())} == before
    assert [p.name for p in tmp_path.iterdir()] == ["out"]


def test_static_camera_is_rejected_when_motion_required(tmp_path):
    static = write_synthetic_package(tmp_path / "static", speed=0.0)
    config = _config(static, tmp_path / "out", require_motion=True)
    with pytest.raises(StageError) as excinfo:
        InsertionProcessor(config).load()
    assert excinfo.value.stage == "load"


WHITE = """
import sys
from pathlib import Path
from PIL import Image
work = Path(sys.argv[1])
size = Image.open(work / "bg.png").size
Image.new("RGB", size, (255, 255, 255)).save(work / "refined.png")
"""


def test_refinement_plugin_replaces_frames(package, tmp_path):
    script = tmp_path / "white.py"
    script.write_text(WHITE)
    config = _config(package, tmp_path / "out", **{
        "style.command": f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}",
        "style.timeout": 60.0,
    })
    manifest = json.loads(run_insert_pipeline(config).read_text())
    for frame in manifest["frames"]:
        assert _png(tmp_path / "out" / frame["files"]["rgb"]).min() == 255
