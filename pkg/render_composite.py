"""
Object rendering, shadow casting and compositing.

The object is shaded with one-bounce Lambertian image-based lighting: each
covered pixel integrates the environment over the cosine-weighted hemisphere
with self-occlusion rays. The shadow is cast onto the fitted ground plane,
used as an invisible shadow catcher, by tracing rays from each visible plane
point toward the sun. Both layers are then blended into the background plate
with a depth test against the scene.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.stats import qmc

from errors import DimensionMismatch
from geometry import CameraPose, Plane, orthonormal_frame, pixel_grid, pixel_rays, ray_plane_intersect_many
from lighting import luminance, sample_environment
from raycast import TriangleBVH, build_bvh, closest_hits, occluded
from scene_io import HdrPanorama, ObjectMesh

logger = logging.getLogger(__name__)

SHADOW_BIAS = 1e-6
SURFACE_BIAS = 1e-6
MAX_RAYS_PER_BATCH = 1 << 20
SHADOW_MODES = ("sun", "sun+sky")


@dataclass
class ObjectLayer:
    """Rendered object: straight (unpremultiplied) RGB + coverage alpha, and camera depth (inf where empty)."""
    rgba: np.ndarray
    depth: np.ndarray
    debug: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[:, :, 3]

    @property
    def rgb(self) -> np.ndarray:
        return self.rgba[:, :, :3]

    @classmethod
    def empty(cls, width: int, height: int) -> "ObjectLayer":
        return cls(np.zeros((height, width, 4)), np.full((height, width), np.inf))


@dataclass
class CompositeOutput:
    rgb: np.ndarray
    object_mask: np.ndarray
    shadow_mask: np.ndarray
    object_depth: np.ndarray
    frame_index: int = 0
    placement_pixel: Optional[np.ndarray] = None
    debug_layers: Dict[str, np.ndarray] = field(default_factory=dict)


def world_mesh_bvh(mesh: ObjectMesh, object_pose: CameraPose) -> TriangleBVH:
    """BVH of the mesh placed in the world; build once and share across frames."""
    vertices, _ = mesh.transformed(object_pose)
    return build_bvh(vertices, mesh.triangles)


def _halton(samples: int, seed: int) -> np.ndarray:
    return qmc.Halton(d=2, scramble=True, seed=seed).random(samples)


def _cosine_directions(normals: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Cosine-weighted hemisphere directions about each normal; xi is (n, s, 2)."""
    r = np.sqrt(xi[..., 0])
    phi = 2.0 * np.pi * xi[..., 1]
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.clip(1.0 - xi[..., 0], 0.0, 1.0))], axis=-1)
    helper = np.where(np.abs(normals[:, 0:1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    tangent = np.cross(helper, normals)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    bitangent = np.cross(normals, tangent)
    return (local[..., 0:1] * tangent[:, None, :] + local[..., 1:2] * bitangent[:, None, :]
            + local[..., 2:3] * normals[:, None, :])


def _interpolate(values: np.ndarray, triangles: np.ndarray, tri: np.ndarray, bary: np.ndarray) -> np.ndarray:
    corners = values[triangles[tri]]
    w0 = 1.0 - bary[:, 0] - bary[:, 1]
    return w0[:, None] * corners[:, 0] + bary[:, 0:1] * corners[:, 1] + bary[:, 1:2] * corners[:, 2]


def _albedo_at(mesh: ObjectMesh, tri: np.ndarray, bary: np.ndarray) -> np.ndarray:
    if mesh.texture is None or mesh.uvs is None:
        return np.broadcast_to(np.asarray(mesh.albedo, dtype=np.float64), (len(tri), 3))
    uv = _interpolate(mesh.uvs, mesh.triangles, tri, bary)
    texture = np.asarray(mesh.texture, dtype=np.float64)
    th, tw = texture.shape[:2]
    cols = np.mod(uv[:, 0], 1.0) * (tw - 1)
    rows = (1.0 - np.mod(uv[:, 1], 1.0)) * (th - 1)
    c0, r0 = np.floor(cols).astype(int), np.floor(rows).astype(int)
    c1, r1 = np.minimum(c0 + 1, tw - 1), np.minimum(r0 + 1, th - 1)
    fc, fr = (cols - c0)[:, None], (rows - r0)[:, None]
    top = texture[r0, c0, :3] * (1 - fc) + texture[r0, c1, :3] * fc
    bottom = texture[r1, c0, :3] * (1 - fc) + texture[r1, c1, :3] * fc
    return top * (1 - fr) + bottom * fr


def render_object(mesh: ObjectMesh, object_pose: CameraPose, K: np.ndarray, camera_pose: CameraPose,
                  env: HdrPanorama, samples: int, width: int, height: int, seed: int = 0,
                  bvh: Optional[TriangleBVH] = None, supersample: int = 1) -> ObjectLayer:
    """Shade the placed mesh as seen from ``camera_pose``.

    Each covered pixel receives albedo times the mean of L(w) V(w) over
    ``samples`` cosine-distributed directions, which is the Lambertian
    estimator of (albedo / pi) * integral L V cos. Directions come from a
    scrambled Halton sequence with a per-pixel random rotation, both seeded.
    Alpha is the fraction of the ``supersample`` x ``supersample`` subpixel
    rays that hit the mesh.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    if mesh.is_empty:
        return ObjectLayer.empty(width, height)
    vertices_w, normals_w = mesh.transformed(object_pose)
    if bvh is None:
        bvh = build_bvh(vertices_w, mesh.triangles)
    rng = np.random.default_rng(seed)
    halton = _halton(samples, seed)

    s = max(int(supersample), 1)
    offsets = (np.arange(s) + 0.5) / s - 0.5
    sub = np.array([(du, dv) for dv in offsets for du in offsets])
    base = pixel_grid(width, height)
    pixels = (base[:, None, :] + sub[None, :, :]).reshape(-1, 2)
    origin, dirs = pixel_rays(K, camera_pose, pixels)
    t, tri, bary = closest_hits(bvh, origin, dirs)
    hit = tri >= 0

    color = np.zeros((len(pixels), 3))
    irradiance = np.zeros(len(pixels))
    visibility = np.zeros(len(pixels))
    hit_idx = np.flatnonzero(hit)
    if hit_idx.size:
        points = origin + t[hit_idx, None] * dirs[hit_idx]
        normals = _interpolate(normals_w, mesh.triangles, tri[hit_idx], bary[hit_idx])
        lengths = np.linalg.norm(normals, axis=1)
        degenerate = lengths < 1e-12
        if degenerate.any():
            v = vertices_w[mesh.triangles[tri[hit_idx][degenerate]]]
            normals[degenerate] = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
            lengths = np.linalg.norm(normals, axis=1)
        normals /= lengths[:, None]
        facing = np.sum(normals * dirs[hit_idx], axis=1) > 0
        normals[facing] *= -1.0
        albedo = _albedo_at(mesh, tri[hit_idx], bary[hit_idx])
        shifts = rng.random((hit_idx.size, 2))

        chunk = max(1, MAX_RAYS_PER_BATCH // samples)
        for lo in range(0, hit_idx.size, chunk):
            hi = min(lo + chunk, hit_idx.size)
            xi = np.mod(halton[None, :, :] + shifts[lo:hi, None, :], 1.0)
            directions = _cosine_directions(normals[lo:hi], xi)
            starts = points[lo:hi] + SURFACE_BIAS * normals[lo:hi]
            flat_dirs = directions.reshape(-1, 3)
            blocked = occluded(bvh, np.repeat(starts, samples, axis=0), flat_dirs).reshape(hi - lo, samples)
            radiance = sample_environment(env, flat_dirs).reshape(hi - lo, samples, 3)
            lit = ~blocked
            incoming = np.mean(radiance * lit[:, :, None], axis=1)
            color[hit_idx[lo:hi]] = albedo[lo:hi] * incoming
            irradiance[hit_idx[lo:hi]] = luminance(incoming)
            visibility[hit_idx[lo:hi]] = lit.mean(axis=1)

    n_sub = s * s
    hits = hit.reshape(-1, n_sub)
    coverage = hits.mean(axis=1)
    counts = np.maximum(hits.sum(axis=1), 1)
    rgb = color.reshape(-1, n_sub, 3).sum(axis=1) / counts[:, None]
    depth_sub = np.where(hit, t * (dirs @ camera_pose.forward), np.inf).reshape(-1, n_sub)
    layer = ObjectLayer(
        np.concatenate([rgb, coverage[:, None]], axis=1).reshape(height, width, 4),
        depth_sub.min(axis=1).reshape(height, width),
        {
            "irradiance": (irradiance.reshape(-1, n_sub).sum(axis=1) / counts).reshape(height, width),
            "visibility": (visibility.reshape(-1, n_sub).sum(axis=1) / counts).reshape(height, width),
        },
    )
    logger.debug(f"Rendered object: {int((coverage > 0).sum())} covered pixels, {samples} samples each")
    return layer


def _cone_directions(axis: np.ndarray, radius: float, xi: np.ndarray) -> np.ndarray:
    """Directions uniformly distributed in the solid-angle cone of half-angle ``radius`` about ``axis``."""
    cos_r = np.cos(radius)
    cos_theta = 1.0 - xi[:, 0] * (1.0 - cos_r)
    sin_theta = np.sqrt(np.clip(1.0 - cos_theta ** 2, 0.0, 1.0))
    phi = 2.0 * np.pi * xi[:, 1]
    frame = orthonormal_frame(axis, np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))
    local = np.column_stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), cos_theta])
    return local @ frame.T


def cast_shadow(mesh: ObjectMesh, object_pose: CameraPose, plane: Plane, sun_dir: np.ndarray, K: np.ndarray,
                camera_pose: CameraPose, width: int, height: int, softness_samples: int = 1,
                light_radius_deg: float = 0.0, seed: int = 0, bvh: Optional[TriangleBVH] = None,
                env: Optional[HdrPanorama] = None, mode: str = "sun", sky_weight: float = 0.0,
                sky_samples: int = 32, scene_depth: Optional[np.ndarray] = None,
                depth_tolerance: float = 0.05) -> np.ndarray:
    """Shadow intensity in [0, 1] on the ground plane as seen from the camera.

    Every pixel whose camera ray meets the plane before the mesh casts
    ``softness_samples`` rays from the plane point toward the sun, jittered
    inside a cone of ``light_radius_deg``; the intensity is the occluded
    fraction. Pixels that miss the plane, see the mesh first, or (when
    ``scene_depth`` is given) see scene geometry in front of the plane are 0.
    A sun at or below the plane's horizon casts nothing.

    ``mode="sun+sky"`` adds ``sky_weight`` times the radiance-weighted
    occlusion of the sky hemisphere.
    """
    if mode not in SHADOW_MODES:
        raise ValueError(f"Unknown shadow mode '{mode}', expected one of {SHADOW_MODES}")
    shadow = np.zeros((height, width))
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    sun_dir = sun_dir / np.linalg.norm(sun_dir)
    if mesh.is_empty:
        return shadow
    sun_lit = float(sun_dir @ plane.normal) > 0
    if not sun_lit and mode == "sun":
        return shadow
    if bvh is None:
        bvh = world_mesh_bvh(mesh, object_pose)

    pixels = pixel_grid(width, height)
    origin, dirs = pixel_rays(K, camera_pose, pixels)
    t_plane, on_plane = ray_plane_intersect_many(origin, dirs, plane)
    t_mesh, _, _ = closest_hits(bvh, origin, dirs)
    visible = on_plane & (t_mesh >= t_plane)
    if scene_depth is not None:
        plane_depth = t_plane * (dirs @ camera_pose.forward)
        sd = np.asarray(scene_depth, dtype=np.float64).ravel()
        valid = np.isfinite(sd) & (sd > 0)
        visible &= ~(valid & (sd < plane_depth * (1.0 - depth_tolerance)))
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        return shadow
    points = origin + t_plane[idx, None] * dirs[idx] + SHADOW_BIAS * plane.normal

    intensity = np.zeros(idx.size)
    if sun_lit:
        n = max(int(softness_samples), 1)
        radius = np.deg2rad(max(float(light_radius_deg), 0.0))
        if n == 1 or radius == 0.0:
            intensity = occluded(bvh, points, np.broadcast_to(sun_dir, points.shape)).astype(np.float64)
        else:
            # same cone samples for every pixel
            directions = _cone_directions(sun_dir, radius, _halton(n, seed))
            blocked = occluded(bvh, np.repeat(points, n, axis=0), np.tile(directions, (idx.size, 1)))
            intensity = blocked.reshape(idx.size, n).mean(axis=1)

    if mode == "sun+sky" and sky_weight > 0 and env is not None:
        xi = _halton(sky_samples, seed + 1)
        directions = _cosine_directions(plane.normal[None, :], xi[None, :, :])[0]
        weights = luminance(sample_environment(env, directions))
        if weights.sum() > 0:
            blocked = occluded(bvh, np.repeat(points, sky_samples, axis=0), np.tile(directions, (idx.size, 1)))
            sky_occlusion = blocked.reshape(idx.size, sky_samples) @ weights / weights.sum()
            intensity = intensity + sky_weight * sky_occlusion

    shadow.ravel()[idx] = np.clip(intensity, 0.0, 1.0)
    return shadow


def composite_frame(background: np.ndarray, layer: ObjectLayer, shadow: np.ndarray, scene_depth: np.ndarray,
                    shadow_strength: float = 0.7, frame_index: int = 0,
                    placement_pixel: Optional[np.ndarray] = None) -> CompositeOutput:
    """Blend the object and its shadow into the background plate.

    The background is darkened by (1 - k * shadow), then the object is laid
    over with its alpha wherever it is nearer than the scene; scene depth 0
    (unknown) counts as infinitely far. The shadow mask is cleared under the
    visible object.
    """
    background = np.asarray(background, dtype=np.float64)
    h, w = background.shape[:2]
    for name, arr in (("object layer", layer.rgba), ("shadow", shadow), ("scene depth", scene_depth)):
        if np.shape(arr)[:2] != (h, w):
            raise DimensionMismatch(f"{name} is {np.shape(arr)[:2]}, background is {(h, w)}")
    if not 0.0 <= shadow_strength <= 1.0:
        raise ValueError(f"shadow_strength must lie in [0, 1], got {shadow_strength}")

    sd = np.asarray(scene_depth, dtype=np.float64)
    sd = np.where(np.isfinite(sd) & (sd > 0), sd, np.inf)
    alpha = np.where(layer.depth < sd, np.clip(layer.alpha, 0.0, 1.0), 0.0)
    shadow_eff = np.clip(np.asarray(shadow, dtype=np.float64), 0.0, 1.0) * (1.0 - alpha)

    darkened = np.where(shadow_eff[:, :, None] > 0, background * (1.0 - shadow_strength * shadow_eff[:, :, None]),
                        background)
    a = alpha[:, :, None]
    rgb = np.where(a > 0, a * layer.rgb + (1.0 - a) * darkened, darkened)
    return CompositeOutput(
        rgb=rgb,
        object_mask=alpha,
        shadow_mask=shadow_eff,
        object_depth=layer.depth,
        frame_index=frame_index,
        placement_pixel=None if placement_pixel is None else np.asarray(placement_pixel, dtype=np.float64),
    )
