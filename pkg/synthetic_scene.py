"""
Synthetic oracle scene.

A camera drives along +X over a procedurally textured ground plane (z = 0,
world z up). Frames, depth maps, segmentation masks, exact optical flow and a
sky panorama with a sun disc are all computed analytically, so every stage of
the pipeline can be checked against known geometry.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from geometry import (CameraPose, Plane, equirect_directions, pixel_grid, pixel_rays, project_points,
                      rotation_from_rotvec)
from scene_io import ObjectMesh, ScenePackage, build_mesh, save_mesh, write_scene_package
from stabilization import FlowField, save_flow

logger = logging.getLogger(__name__)

CLASSES = {"sky": 0, "road": 1, "sidewalk": 2, "lane": 3}
ROAD_HALF_WIDTH = 3.0
LANE_OFFSET = 1.75
LANE_HALF_WIDTH = 0.08


@dataclass
class SyntheticScene:
    scene: ScenePackage
    true_poses: List[CameraPose]
    plane: Plane
    mesh: ObjectMesh
    sun_direction: np.ndarray
    flows: List[FlowField] = field(default_factory=list)


def ground_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth, corner-rich linear RGB albedo of the ground at world (x, y)."""
    g = (0.40 + 0.12 * np.sin(3.1 * x + 0.7 * y) + 0.10 * np.sin(2.3 * y - 1.3 * x)
         + 0.08 * np.sin(7.7 * x) * np.cos(5.9 * y))
    return np.stack([g, 0.95 * g, 0.9 * g], axis=-1)


def ground_classes(y: np.ndarray) -> np.ndarray:
    classes = np.where(np.abs(y) <= ROAD_HALF_WIDTH, CLASSES["road"], CLASSES["sidewalk"])
    lane = np.abs(np.abs(y) - LANE_OFFSET) < LANE_HALF_WIDTH
    return np.where(lane, CLASSES["lane"], classes)


def textured_image(width: int, height: int, shift: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Grayscale test pattern translated by ``shift`` pixels: I_shifted(x) = I(x - shift)."""
    vs, us = np.mgrid[0:height, 0:width].astype(np.float64)
    x = us - shift[0]
    y = vs - shift[1]
    return (0.5 + 0.15 * np.sin(0.31 * x + 0.17 * y) + 0.12 * np.sin(0.23 * y - 0.41 * x)
            + 0.1 * np.sin(0.53 * x) * np.cos(0.47 * y))


def camera_pose(center: np.ndarray, pitch_deg: float, yaw_deg: float = 0.0) -> CameraPose:
    """Camera looking along +X (rotated by ``yaw_deg``), pitched down by ``pitch_deg``."""
    p, a = np.deg2rad(pitch_deg), np.deg2rad(yaw_deg)
    forward = np.array([np.cos(p) * np.cos(a), np.cos(p) * np.sin(a), -np.sin(p)])
    right = np.array([np.sin(a), -np.cos(a), 0.0])
    down = np.cross(forward, right)
    return CameraPose.from_camera_center(np.column_stack([right, down, forward]), np.asarray(center, dtype=np.float64))


def intrinsics(width: int, height: int, focal: float) -> np.ndarray:
    return np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


def render_ground_frame(K: np.ndarray, pose: CameraPose, width: int, height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(linear RGB, depth, class mask) of the ground plane and sky; sky depth is 0."""
    origin, dirs = pixel_rays(K, pose, pixel_grid(width, height))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[:, 2]
    ground = (dirs[:, 2] < -1e-9) & (t > 0)
    points = origin + np.where(ground, t, 0.0)[:, None] * dirs
    rgb = np.empty((len(dirs), 3))
    rgb[ground] = ground_texture(points[ground, 0], points[ground, 1])
    lane = ground & (ground_classes(points[:, 1]) == CLASSES["lane"])
    rgb[lane] = 0.8
    elevation = np.clip(dirs[~ground, 2], 0.0, 1.0)
    rgb[~ground] = np.column_stack([0.45 + 0.2 * elevation, 0.6 + 0.2 * elevation, 0.9 * np.ones_like(elevation)])
    depth = np.where(ground, t * (dirs @ pose.forward), 0.0)
    mask = np.where(ground, ground_classes(points[:, 1]), CLASSES["sky"])
    return (np.clip(rgb, 0.0, 1.0).reshape(height, width, 3), depth.reshape(height, width),
            mask.astype(np.int32).reshape(height, width))


def analytic_flow(K: np.ndarray, pose_a: CameraPose, pose_b: CameraPose, depth_a: np.ndarray,
                  frame_ids: Tuple[int, int] = (0, 1)) -> FlowField:
    """Exact flow a -> b of static geometry; pixels without depth get zero flow and zero confidence."""
    height, width = depth_a.shape
    pixels = pixel_grid(width, height)
    depth = depth_a.ravel()
    valid = depth > 0
    flow = np.zeros((len(pixels), 2))
    if valid.any():
        homog = np.column_stack([pixels[valid], np.ones(int(valid.sum()))])
        cam = (homog @ np.linalg.inv(K).T) * depth[valid, None]
        world = (cam - pose_a.t) @ pose_a.R
        projected, _ = project_points(K, pose_b, world)
        flow[valid] = projected - pixels[valid]
    return FlowField(flow.reshape(height, width, 2), valid.astype(np.float64).reshape(height, width), *frame_ids)


def sun_vector(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    a, e = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    return np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])


def make_sky_panorama(height: int, sun_dir: np.ndarray, sun_radius_deg: float = 4.0) -> np.ndarray:
    """Linear LDR equirect: blue gradient above the horizon, gray ground, saturated sun disc."""
    dirs = equirect_directions(height, 2 * height)
    z = dirs[:, :, 2]
    sky = np.stack([0.35 + 0.25 * (1 - z), 0.5 + 0.2 * (1 - z), 0.85 * np.ones_like(z)], axis=-1)
    pano = np.where((z > 0)[:, :, None], sky, 0.25)
    disc = dirs @ sun_dir >= np.cos(np.deg2rad(sun_radius_deg))
    pano[disc] = 1.0
    return np.clip(pano, 0.0, 1.0)


def cube_mesh(size: float = 1.0, albedo: Tuple[float, float, float] = (0.7, 0.2, 0.2)) -> ObjectMesh:
    """Axis-aligned cube standing on z = 0, centered on the z axis."""
    h = size / 2.0
    v = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0],
                  [-h, -h, size], [h, -h, size], [h, h, size], [-h, h, size]], dtype=np.float64)
    faces = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                      [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    # split vertices per face so normals stay flat
    corners = v[faces].reshape(-1, 3)
    tris = np.arange(len(corners)).reshape(-1, 3)
    return build_mesh(corners, tris, albedo=albedo)


def uv_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0), rings: int = 48, segments: int = 96,
              albedo: Tuple[float, float, float] = (0.6, 0.6, 0.6)) -> ObjectMesh:
    theta = np.linspace(0.0, np.pi, rings + 1)
    phi = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    tt, pp = np.meshgrid(theta[1:-1], phi, indexing="ij")
    ring_pts = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1).reshape(-1, 3)
    unit = np.vstack([[0.0, 0.0, 1.0], ring_pts, [0.0, 0.0, -1.0]])
    faces = []
    south = len(unit) - 1
    for j in range(segments):
        k = (j + 1) % segments
        faces.append([0, 1 + j, 1 + k])
        base = 1 + (rings - 2) * segments
        faces.append([south, base + k, base + j])
    for i in range(rings - 2):
        for j in range(segments):
            k = (j + 1) % segments
            a, b = 1 + i * segments + j, 1 + i * segments + k
            c, d = a + segments, b + segments
            faces.append([a, c, b])
            faces.append([b, c, d])
    return build_mesh(radius * unit + np.asarray(center, dtype=np.float64), np.array(faces), normals=unit, albedo=albedo)


def make_synthetic_scene(n_target: int = 5, n_reference: int = 2, width: int = 96, height: int = 72,
                         focal: float = 80.0, speed: float = 1.0, camera_height: float = 1.5,
                         pitch_deg: float = 15.0, jitter_deg: float = 0.0, jitter_m: float = 0.0, seed: int = 0,
                         panorama_height: int = 32, sun_azimuth_deg: float = 120.0,
                         sun_elevation_deg: float = 50.0, frame_rate: float = 10.0) -> SyntheticScene:
    """Build the scene; jitter perturbs the stored target-frame poses, never the rendered ones."""
    K = intrinsics(width, height, focal)
    n_frames = n_target + n_reference
    true_poses = [camera_pose([speed * n, 0.0, camera_height], pitch_deg) for n in range(n_frames)]
    rendered = [render_ground_frame(K, pose, width, height) for pose in true_poses]

    rng = np.random.default_rng(seed)
    stored = list(true_poses)
    if jitter_deg > 0 or jitter_m > 0:
        for n in range(n_target):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dR = rotation_from_rotvec(axis * np.deg2rad(jitter_deg))
            shift = rng.normal(size=3)
            shift *= jitter_m / np.linalg.norm(shift)
            R_c2w = true_poses[n].inverse().R
            stored[n] = CameraPose.from_camera_center(dR @ R_c2w, true_poses[n].center + shift)

    sun_dir = sun_vector(sun_azimuth_deg, sun_elevation_deg)
    scene = ScenePackage(
        frames=tuple(r[0] for r in rendered),
        intrinsics=K,
        poses=tuple(stored),
        depth_maps=tuple(r[1] for r in rendered),
        seg_masks=tuple(r[2] for r in rendered),
        frame_rate=frame_rate,
        n_target=n_target,
        n_reference=n_reference,
        classes=dict(CLASSES),
        sky_panorama=make_sky_panorama(panorama_height, sun_dir),
    )
    flows = [analytic_flow(K, true_poses[n], true_poses[n + 1], rendered[n][1], (n, n + 1)) for n in range(n_target)]
    return SyntheticScene(scene, true_poses, Plane(np.array([0.0, 0.0, 1.0]), 0.0), cube_mesh(), sun_dir, flows)


def write_synthetic_package(out_dir: Path, **kwargs) -> Dict[str, Path]:
    """Write the scene package, the cube mesh and the exact flows; returns their paths."""
    out_dir = Path(out_dir)
    synthetic = make_synthetic_scene(**kwargs)
    manifest = write_scene_package(out_dir / "scene", synthetic.scene)
    mesh_path = save_mesh(out_dir / "cube.obj", synthetic.mesh)
    flow_dir = out_dir / "flows"
    for flow in synthetic.flows:
        save_flow(flow_dir, flow)
    logger.info(f"Synthetic package written to {out_dir}")
    return {"manifest": manifest, "mesh": mesh_path, "flow_dir": flow_dir}
