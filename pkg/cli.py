"""
Command-line interface for the insertion pipeline.

Exit codes: 0 success, 2 invalid configuration or input, 3 a pipeline stage failed.
"""

import functools
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click

from errors import ConfigError, InsertionError, MissingAsset, ParseError, StageError
from insert_processor import InsertionProcessor, finite_or_none, run_insert_pipeline
from lighting import save_lighting
from metrics import fid_from_files
from pipeline_config import PipelineConfig, configure_logging
from retrieval import (build_index, encode_histogram, load_descriptor_dir, load_index, query_by_words, query_videos,
                       save_index)
from scene_io import MANIFEST_NAME, camera_travel, load_run_manifest, load_scene_package, read_matrix_file
from stabilization import write_residual_report
from synthetic_scene import write_synthetic_package

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_STAGE = 3


def handle_errors(fn):
    """Map pipeline exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, MissingAsset, ParseError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_VALIDATION)
        except StageError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_STAGE)
        except InsertionError as e:
            click.echo(f"Error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_STAGE)

    return wrapper


def build_config(config_path: Optional[str], overrides: Dict[str, Any], check_paths: bool = True) -> PipelineConfig:
    """File, then environment, then flags; validated."""
    config = PipelineConfig.from_file(Path(config_path)) if config_path else PipelineConfig()
    config.apply_env()
    config.apply_overrides(overrides)
    return config.validate(check_paths=check_paths)


def echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _strict_records(track) -> list:
    records = track.to_records()
    for record in records:
        record["pixel"] = finite_or_none(record["pixel"])
        record["depth"] = record["depth"] if math.isfinite(record["depth"]) else None
    return records


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """Insert 3D objects into calibrated driving videos."""
    configure_logging(verbose)


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="JSON pipeline config.")
@click.option("--scene", help="Scene manifest (overrides the config).")
@click.option("--mesh", help="Object mesh, OBJ or PLY (overrides the config).")
@click.option("--out", "output_dir", help="Output directory.")
@click.option("--strategy", type=click.Choice(["future_camera", "mask_region"]), help="Placement strategy.")
@click.option("--samples", type=int, help="Hemisphere samples per pixel.")
@click.option("--seed", type=int, help="Render seed.")
@click.option("--flow-dir", help="Directory with precomputed flow_<n>_<n+1>.pfm files.")
@click.option("--jobs", type=int, help="Frame-level worker threads (default: logical cores).")
@click.option("--max-plugin-jobs", type=int, help="Concurrent refinement plugin invocations.")
@click.option("--no-stabilize", is_flag=True, help="Keep the raw placement track.")
@click.option("--no-shadow", is_flag=True, help="Skip shadow casting.")
@click.option("--no-refine", is_flag=True, help="Skip the external refinement plugin.")
@handle_errors
def simulate(config_path, scene, mesh, output_dir, strategy, samples, seed, flow_dir, jobs, max_plugin_jobs,
             no_stabilize, no_shadow, no_refine):
    """Run the full pipeline and write composited frames plus the run manifest."""
    overrides = {
        "scene": scene, "mesh": mesh, "output_dir": output_dir, "jobs": jobs,
        "placement.strategy": strategy, "render.samples": samples, "render.seed": seed,
        "stabilization.flow_dir": flow_dir, "style.max_parallel": max_plugin_jobs,
        "stabilization.enabled": False if no_stabilize else None,
        "render.shadow_enabled": False if no_shadow else None,
        "style.enabled": False if no_refine else None,
    }
    config = build_config(config_path, overrides)
    manifest = run_insert_pipeline(config)
    click.echo(str(manifest))


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="JSON pipeline config.")
@click.option("--scene", help="Scene manifest.")
@click.option("--flow-dir", help="Directory with precomputed flows.")
@click.option("--out", "output_dir", required=True, help="Directory for track.json and the residual CSV.")
@click.option("--jobs", type=int)
@handle_errors
def stabilize(config_path, scene, flow_dir, output_dir, jobs):
    """Place the anchor and stabilize its track; writes raw and stabilized pixels."""
    config = build_config(config_path, {"scene": scene, "stabilization.flow_dir": flow_dir, "jobs": jobs},
                          check_paths=False)
    if not Path(config.scene).is_file():
        raise ConfigError(f"scene manifest not found: '{config.scene}'")
    processor = InsertionProcessor(config)
    processor.scene = processor._stage("load", load_scene_package, Path(config.scene), jobs=config.jobs)
    processor.place()
    processor.stabilize()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "anchor_world": finite_or_none(processor.raw_track.anchor_world),
        "raw": _strict_records(processor.raw_track),
        "stabilized": _strict_records(processor.track),
        "warnings": processor.warnings,
    }
    (out / "track.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    residuals = processor.track.residuals
    if residuals:
        write_residual_report(out / "stabilization_residuals.csv", residuals)
    click.echo(str(out / "track.json"))


@cli.command()
@click.option("--config", "config_path", type=click.Path(), help="JSON pipeline config.")
@click.option("--scene", help="Scene manifest.")
@click.option("--out", "output_dir", required=True, help="Directory for the lighting rasters.")
@handle_errors
def light(config_path, scene, output_dir):
    """Estimate the HDR environment and sun direction for a scene."""
    config = build_config(config_path, {"scene": scene}, check_paths=False)
    if not Path(config.scene).is_file():
        raise ConfigError(f"scene manifest not found: '{config.scene}'")
    processor = InsertionProcessor(config)
    processor.scene = processor._stage("load", load_scene_package, Path(config.scene))
    estimate = processor.light(Path(output_dir) / "plugins")
    written = save_lighting(Path(output_dir), estimate)
    echo_json(estimate.summary())
    logger.info(f"Wrote {len(written)} lighting files to {output_dir}")


@cli.command("retrieve-index")
@click.argument("descriptor_dir", type=click.Path())
@click.option("--k", "k", type=int, default=64, show_default=True, help="Vocabulary size.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--idf/--no-idf", default=False, show_default=True, help="Weight words by inverse document frequency.")
@click.option("--out", "out_path", required=True, help="Index file (.npz).")
@click.option("--jobs", type=int)
@handle_errors
def retrieve_index(descriptor_dir, k, seed, idf, out_path, jobs):
    """Build a visual-word index from one descriptor matrix file per video."""
    videos = load_descriptor_dir(Path(descriptor_dir))
    index = build_index(videos, k, seed, idf, jobs)
    save_index(Path(out_path), index)
    echo_json({"videos": len(index.histograms), "k": index.vocabulary.k,
               "iterations": index.vocabulary.iterations, "inertia": index.vocabulary.inertia})


@cli.command("retrieve-query")
@click.argument("index_path", type=click.Path())
@click.option("--query", "query_path", type=click.Path(), help="Descriptor matrix file of the query video.")
@click.option("--words", help="Comma-separated visual-word ids to search for instead.")
@click.option("--top-n", type=int, default=10, show_default=True)
@handle_errors
def retrieve_query(index_path, query_path, words, top_n):
    """Rank indexed videos against a query video or a set of visual words."""
    index = load_index(Path(index_path))
    if words:
        try:
            word_ids = [int(w) for w in words.split(",") if w.strip()]
        except ValueError as e:
            raise ConfigError(f"--words must be comma-separated integers: {e}") from e
        ranked = query_by_words(index.histograms, word_ids, top_n)
    elif query_path:
        query = encode_histogram(read_matrix_file(Path(query_path)), index.vocabulary, Path(query_path).stem)
        ranked = query_videos(index.histograms, query, top_n, index.idf if index.use_idf else None)
    else:
        raise ConfigError("Give either --query or --words")
    echo_json([{"rank": i + 1, "video": vid, "score": score} for i, (vid, score) in enumerate(ranked)])


@cli.command()
@click.argument("features_a", type=click.Path())
@click.argument("features_b", type=click.Path())
@click.option("--out", "out_path", help="Also write the report to this JSON file.")
@handle_errors
def fid(features_a, features_b, out_path):
    """Fréchet distance between two feature matrix files."""
    report = fid_from_files(Path(features_a), Path(features_b))
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    echo_json(report)


@cli.command()
@click.argument("path", type=click.Path())
@handle_errors
def inspect(path):
    """Summarize a scene manifest or a run output directory / manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = load_run_manifest(path)
    if "config_hash" in data:
        frames = data.get("frames", [])
        echo_json({
            "kind": "run",
            "config_hash": data["config_hash"],
            "seed": data.get("seed"),
            "frames": len(frames),
            "placement_pixels": [f.get("placement_pixel") for f in frames],
            "warnings": sum(len(f.get("warnings", [])) for f in frames),
        })
        return
    scene = load_scene_package(path)
    echo_json({
        "kind": "scene",
        "frames": scene.n_frames,
        "n_target": scene.n_target,
        "n_reference": scene.n_reference,
        "size": [scene.width, scene.height],
        "frame_rate": scene.frame_rate,
        "classes": scene.classes,
        "camera_travel_m": camera_travel(scene),
        "sky_panorama": scene.sky_panorama is not None,
        "side_views": len(scene.side_views),
    })


@cli.command()
@click.option("--out", "output_dir", required=True, help="Directory for the synthetic package.")
@click.option("--jitter-deg", type=float, default=0.0, show_default=True)
@click.option("--jitter-m", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def synthetic(output_dir, jitter_deg, jitter_m, seed):
    """Write the bundled synthetic scene, cube mesh and exact flows."""
    paths = write_synthetic_package(Path(output_dir), jitter_deg=jitter_deg, jitter_m=jitter_m, seed=seed)
    echo_json({k: str(v) for k, v in paths.items()})


if __name__ == "__main__":
    cli()
