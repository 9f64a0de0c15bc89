"""Runs the object insertion pipeline from a scene package to a run folder."""

import json
import logging
import math
import os
import shutil
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from errors import DegenerateInput, InsertionError, NoPlaceableRegion, StageError
from geometry import Plane, project_points
from lighting import LightingEstimate, SunModelParams, estimate_lighting
from pipeline_config import PipelineConfig, configure_logging
from placement import (PlacementStrategy, PlacementTrack, build_track, fit_ground_plane, object_pose_on_plane,
                       select_placement_point)
from render_composite import CompositeOutput, cast_shadow, composite_frame, render_object, world_mesh_bvh
from scene_io import (ObjectMesh, ScenePackage, camera_travel, load_mesh, load_scene_package,
                      write_outputs)
from stabilization import (AnchorSet, compute_flows, project_anchors, select_anchor_points, stabilize_track,
                           track_anchors, write_residual_report)
from style_transfer import assemble_inpaint_inputs, refine_frame_external
from synthetic_scene import write_synthetic_package

logger = logging.getLogger(__name__)

MIN_CAMERA_TRAVEL = 0.5


def finite_or_none(values) -> Optional[List[float]]:
    if values is None:
        return None
    values = [float(v) for v in np.ravel(values)]
    return values if all(math.isfinite(v) for v in values) else None


class InsertionProcessor:
    """
    Runs the object insertion pipeline: load -> place -> stabilize -> light ->
    render -> shadow -> composite -> refine -> write.

    Stages keep their results on the instance, so partial pipelines (the
    ``stabilize`` and ``light`` subcommands) can stop early.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.scene: Optional[ScenePackage] = None
        self.mesh: Optional[ObjectMesh] = None
        self.allowed: set = set()
        self.plane: Optional[Plane] = None
        self.raw_track: Optional[PlacementTrack] = None
        self.track: Optional[PlacementTrack] = None
        self.anchors: Optional[AnchorSet] = None
        self.lighting: Optional[LightingEstimate] = None
        self.outputs: List[CompositeOutput] = []
        self.warnings: List[Dict[str, Any]] = []
        self._plugin_slots = threading.BoundedSemaphore(max(1, config.style.max_parallel))

    # --- stages ----------------------------------------------------------------------------

    def _stage(self, name: str, fn, *args, frame: Optional[int] = None, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except (InsertionError, KeyError) as e:
            logger.error(f"Stage '{name}' failed{'' if frame is None else f' on frame {frame}'}: {e}")
            raise StageError(name, e, frame) from e

    def load(self) -> ScenePackage:
        logger.info("Step 1: Loading scene package and mesh...")
        self.scene = self._stage("load", load_scene_package, Path(self.config.scene), jobs=self.config.jobs,
                                 min_frames=self.config.min_frames)
        self.mesh = self._stage("load", load_mesh, Path(self.config.mesh), albedo=self.config.mesh_albedo)
        travel = camera_travel(self.scene)
        if travel < MIN_CAMERA_TRAVEL:
            message = f"Camera travels only {travel:.3f} m; placement and stabilization expect a moving camera"
            if self.config.require_motion:
                raise StageError("load", DegenerateInput(message))
            logger.warning(message)
        return self.scene

    def _resolve_classes(self) -> set:
        ids = set()
        for name in self.config.placement.allowed_classes:
            try:
                ids |= self.scene.class_ids([name])
            except KeyError:
                logger.warning(f"Allowed class '{name}' is not in the scene's class table; ignoring it")
        if not ids:
            raise NoPlaceableRegion(f"None of the allowed classes {self.config.placement.allowed_classes} "
                                    f"exist in the scene ({sorted(self.scene.classes)})")
        return ids

    def place(self) -> PlacementTrack:
        logger.info("Step 2: Estimating ground plane and placement...")
        cfg = self.config.placement
        self.allowed = self._stage("place", self._resolve_classes)
        self.plane = self._stage("place", fit_ground_plane, self.scene, self.allowed, stride=cfg.plane_stride)
        anchor = self._stage("place", select_placement_point, self.scene, PlacementStrategy(cfg.strategy),
                             self.allowed, self.plane)
        self.raw_track = build_track(self.scene, anchor, self.allowed)
        self.track = self.raw_track
        return self.raw_track

    def stabilize(self) -> PlacementTrack:
        cfg = self.config.stabilization
        if not cfg.enabled:
            logger.info("Step 3: Stabilization disabled; keeping the raw track")
            return self.track
        logger.info("Step 3: Stabilizing placement with optical flow anchors...")
        scene = self.scene
        n = scene.n_target
        pixels, depths = project_points(scene.intrinsics, scene.poses[n], self.raw_track.anchor_world)
        center = pixels[0] if depths[0] > 0 and np.all(np.isfinite(pixels[0])) else None
        self.anchors = select_anchor_points(scene, self.allowed, frame=n, around_pixel=center,
                                            radius=cfg.anchor_radius if center is not None else None,
                                            count=cfg.anchors)
        if self.anchors.count < 4:
            logger.warning(f"Only {self.anchors.count} anchors found; every frame keeps its original pose")
        flows = self._stage("stabilize", compute_flows, scene, cfg.pyramid_levels, cfg.window,
                            Path(cfg.flow_dir) if cfg.flow_dir else None, self.config.jobs)
        self.anchors = track_anchors(scene, project_anchors(scene, self.anchors), flows, cfg.confidence_threshold)
        self.track = stabilize_track(scene, self.raw_track, self.anchors, self.allowed, cfg.max_iterations,
                                     cfg.residual_threshold, self.config.jobs)
        self.warnings.extend(self.track.warnings)
        return self.track

    def light(self, workdir: Optional[Path] = None) -> LightingEstimate:
        logger.info("Step 4: Estimating HDR lighting...")
        cfg = self.config.lighting
        self.lighting = self._stage("light", estimate_lighting, self.scene, SunModelParams(cfg.tau, cfg.beta),
                                    cfg.gamma, cfg.scale, cfg.sun_exponent, cfg.panorama_height, cfg.plugins(),
                                    self.config.style.timeout, workdir)
        return self.lighting

    def _process_frame(self, n: int, object_pose, bvh, workdir: Path) -> CompositeOutput:
        scene, render = self.scene, self.config.render
        pose = self.track.poses[n] if self.track.poses else scene.poses[n]
        seed = render.seed + n
        layer = self._stage("render", render_object, self.mesh, object_pose, scene.intrinsics, pose,
                            self.lighting.environment, render.samples, scene.width, scene.height, seed, bvh,
                            render.supersample, frame=n)
        if render.shadow_enabled:
            shadow = self._stage("shadow", cast_shadow, self.mesh, object_pose, self.plane,
                                 self.lighting.sun_direction, scene.intrinsics, pose, scene.width, scene.height,
                                 render.softness_samples, render.light_radius_deg, seed, bvh,
                                 self.lighting.environment, render.shadow_mode, render.sky_weight,
                                 scene_depth=scene.depth_maps[n], frame=n)
        else:
            shadow = np.zeros((scene.height, scene.width))
        pixel = self.track.entries[n].pixel
        output = self._stage("composite", composite_frame, scene.frames[n], layer, shadow, scene.depth_maps[n],
                             render.shadow_strength, n, pixel if finite_or_none(pixel) else None, frame=n)
        if render.debug_layers:
            output.debug_layers = {**layer.debug, "shadow": shadow}

        style = self.config.style
        if style.enabled and style.command:
            triple = assemble_inpaint_inputs(output.rgb, output.object_mask)
            with self._plugin_slots:
                output.rgb = self._stage("refine", refine_frame_external, style.command, triple,
                                         workdir / f"refine_{n:04d}", style.timeout, self.config.lighting.gamma,
                                         tuple(style.working_size) if style.working_size else None, frame=n)
        return output

    def render_frames(self, workdir: Path) -> List[CompositeOutput]:
        logger.info("Step 5-8: Rendering, shadowing, compositing and refining target frames...")
        cfg = self.config.placement
        scene = self.scene
        object_pose = object_pose_on_plane(self.raw_track.anchor_world, self.plane, scene.poses[scene.n_target],
                                           cfg.yaw_degrees, cfg.ground_offset)
        bvh = world_mesh_bvh(self.mesh, object_pose)
        with ThreadPoolExecutor(max_workers=self.config.jobs or os.cpu_count()) as pool:
            self.outputs = list(pool.map(lambda n: self._process_frame(n, object_pose, bvh, workdir),
                                         range(scene.n_target)))
        return self.outputs

    # --- run ---------------------------------------------------------------------------------

    def run_record(self) -> Dict[str, Any]:
        raw = self.raw_track.entries
        stabilized = self.track.entries
        frames = []
        for n in range(self.scene.n_target):
            frames.append({
                "index": n,
                "raw_pixel": finite_or_none(raw[n].pixel),
                "stabilized_pixel": finite_or_none(stabilized[n].pixel),
                "visible": bool(stabilized[n].visible),
                "valid_class": bool(stabilized[n].valid_class),
                "warnings": [w for w in self.warnings if w.get("frame") == n],
            })
        record = {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "seed": self.config.render.seed,
            "scene": {"n_target": self.scene.n_target, "n_reference": self.scene.n_reference,
                      "width": self.scene.width, "height": self.scene.height,
                      "frame_rate": self.scene.frame_rate},
            "placement": {
                "strategy": self.config.placement.strategy,
                "allowed_class_ids": sorted(self.allowed),
                "anchor_world": finite_or_none(self.raw_track.anchor_world),
                "plane": {"normal": finite_or_none(self.plane.normal), "d": float(self.plane.d)},
            },
            "stabilization": {
                "enabled": self.config.stabilization.enabled,
                "anchors": 0 if self.anchors is None else self.anchors.count,
                "residuals": self.track.residuals,
            },
            "lighting": self.lighting.summary(),
            "frames": frames,
        }
        return record

    def run(self) -> Path:
        """Execute every stage and write the outputs; returns the run manifest path."""
        start = time.time()
        logger.info(f"Starting insertion run (config hash {self.config.config_hash()[:12]})")
        self.load()
        self.place()
        self.stabilize()
        with tempfile.TemporaryDirectory(prefix="insert_", dir=self.config.tmp_dir) as tmp:
            workdir = Path(tmp)
            self.light(workdir / "lighting")
            self.render_frames(workdir)
        logger.info("Step 9: Writing outputs...")
        manifest = self.write(Path(self.config.output_dir))
        logger.info(f"Insertion completed in {time.time() - start:.2f} seconds: {manifest}")
        return manifest

    def write(self, out_dir: Path) -> Path:
        """Write the run folder next to ``out_dir`` and move it into place once complete."""
        out_dir = out_dir.resolve()
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}_", dir=out_dir.parent))
        try:
            manifest = self._stage("write", write_outputs, staging, self.outputs, self.run_record(),
                                   self.config.lighting.gamma)
            residuals = self.track.residuals
            if residuals:
                self._stage("write", write_residual_report, staging / "stabilization_residuals.csv", residuals)
            if out_dir.exists():
                shutil.rmtree(out_dir)
            os.replace(staging, out_dir)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        return out_dir / manifest.name


def run_insert_pipeline(config: PipelineConfig) -> Path:
    config.validate()
    return InsertionProcessor(config).run()


def main():
    """Run the pipeline on the bundled synthetic scene."""
    configure_logging()
    work = Path(tempfile.mkdtemp(prefix="insert_demo_"))
    paths = write_synthetic_package(work / "input")
    config = PipelineConfig(scene=str(paths["manifest"]), mesh=str(paths["mesh"]), output_dir=str(work / "output"))
    config.stabilization.flow_dir = str(paths["flow_dir"])
    config.apply_env()
    manifest = run_insert_pipeline(config)
    print(json.dumps(json.loads(manifest.read_text(encoding="utf-8"))["frames"][:1], indent=2))


if __name__ == "__main__":
    main()
