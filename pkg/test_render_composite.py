#!/usr/bin/env python3
"""
Tests for ray casting, object shading, shadow casting and compositing.
"""

import math

import numpy as np
import pytest

from errors import DimensionMismatch
from geometry import CameraPose, Plane, pixel_grid, pixel_rays, ray_plane_intersect_many
from raycast import build_bvh, closest_hits, occluded
from render_composite import (SHADOW_BIAS, ObjectLayer, cast_shadow, composite_frame, render_object,
                              world_mesh_bvh)
from scene_io import HdrPanorama, build_mesh
from synthetic_scene import camera_pose, cube_mesh, intrinsics, sun_vector, uv_sphere

GROUND = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
CUBE_AT = CameraPose(np.eye(3), [6.0, 0.0, 0.0])


def _slab_hits(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    return t_far >= np.maximum(t_near, 0.0), t_near


def _triangle_arrays(vertices: np.ndarray, triangles: np.ndarray):
    corners = vertices[triangles]
    return corners[:, 0], corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]


def _brute_closest(origins, dirs, v0, e1, e2, chunk=256):
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best = np.full(len(dirs), np.inf)
    for lo in range(0, len(dirs), chunk):
        o = origins[lo:lo + chunk, None, :]
        d = dirs[lo:lo + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.sum(e1[None] * p, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = o - v0[None]
            b1 = np.sum(s * p, axis=2) * inv
            q = np.cross(s, e1[None])
            b2 = np.sum(d * q, axis=2) * inv
            t = np.sum(e2[None] * q, axis=2) * inv
        ok = (np.abs(det) >= 1e-14) & (b1 >= 0) & (b1 <= 1) & (b2 >= 0) & (b1 + b2 <= 1) & (t > 1e-9)
        best[lo:lo + chunk] = np.where(ok, t, np.inf).min(axis=1)
    return best


def _tree_depth(bvh, node=0) -> int:
    if bvh.count[node] > 0:
        return 0
    return 1 + max(_tree_depth(bvh, bvh.left[node]), _tree_depth(bvh, bvh.right[node]))


def test_bvh_matches_brute_force_on_triangle_soup():
    rng = np.random.default_rng(11)
    centers = rng.uniform(-5.0, 5.0, (3000, 1, 3))
    vertices = (centers + rng.normal(scale=0.3, size=(3000, 3, 3))).reshape(-1, 3)
    triangles = np.arange(len(vertices)).reshape(-1, 3)
    bvh = build_bvh(vertices, triangles)
    assert bvh.depth == _tree_depth(bvh)
    assert bvh.depth >= 9

    origins = rng.uniform(-8.0, 8.0, (2000, 3))
    dirs = rng.normal(size=(2000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, tri, _ = closest_hits(bvh, origins, dirs)
    expected = _brute_closest(origins, dirs, *_triangle_arrays(vertices, triangles))
    assert np.array_equal(np.isfinite(t), np.isfinite(expected))
    assert np.allclose(t[np.isfinite(t)], expected[np.isfinite(expected)], rtol=0, atol=1e-9)
    assert np.isfinite(expected).sum() > 500
    assert occluded(bvh, origins, dirs, t_max=3.0).tolist() == (expected < 3.0).tolist()


def test_bvh_depth_of_small_meshes():
    single = build_bvh(np.eye(3), np.array([[0, 1, 2]]))
    assert single.depth == 0
    cube = world_mesh_bvh(cube_mesh(), CUBE_AT)
    assert cube.depth == _tree_depth(cube)


def test_closest_hit_on_single_triangle():
    bvh = build_bvh(np.array([[0.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]]), np.array([[0, 1, 2]]))
    origins = np.array([[-2.0, 0.0, 0.0], [-2.0, 5.0, 0.0]])
    dirs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    t, tri, bary = closest_hits(bvh, origins, dirs)
    assert t[0] == pytest.approx(2.0)
    assert tri.tolist() == [0, -1]
    assert np.isinf(t[1])
    assert bary[0] == pytest.approx([0.25, 0.5])
    assert occluded(bvh, origins, dirs).tolist() == [True, False]
    assert not occluded(bvh, origins[:1], dirs[:1], t_max=1.5)[0]


def test_closest_hit_picks_nearest_of_many():
    mesh = cube_mesh()
    bvh = world_mesh_bvh(mesh, CUBE_AT)
    t, tri, _ = closest_hits(bvh, np.array([0.0, 0.0, 0.5]), np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]))
    assert t[0] == pytest.approx(5.5)
    assert tri[0] >= 0
    assert tri[1] == -1


def test_lambertian_quad_under_constant_environment():
    vertices = np.array([[5.0, -1.0, -1.0], [5.0, 1.0, -1.0], [5.0, 1.0, 1.0], [5.0, -1.0, 1.0]])
    quad = build_mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]), albedo=[0.5, 0.5, 0.5])
    env = HdrPanorama(np.full((8, 16, 3), 2.0))
    layer = render_object(quad, CameraPose.identity(), intrinsics(32, 32, 40.0), camera_pose(np.zeros(3), 0.0),
                          env, samples=1024, width=32, height=32)
    assert layer.alpha[16, 16] == 1.0
    assert np.allclose(layer.rgb[16, 16], 1.0, rtol=0.02)
    assert layer.depth[16, 16] == pytest.approx(5.0)
    assert layer.alpha[0, 0] == 0.0 and np.isinf(layer.depth[0, 0])


def test_sphere_silhouette_radius():
    size, focal = 64, 80.0
    sphere = uv_sphere(1.0, center=(5.0, 0.0, 0.0))
    layer = render_object(sphere, CameraPose.identity(), intrinsics(size, size, focal),
                          camera_pose(np.zeros(3), 0.0), HdrPanorama(np.ones((8, 16, 3))), samples=1,
                          width=size, height=size, supersample=2)
    radius_px = focal * math.tan(math.asin(0.2))
    c = (size - 1) / 2.0
    vv, uu = np.mgrid[0:size, 0:size]
    dist = np.hypot(uu - c, vv - c)
    assert np.all(layer.alpha[dist < radius_px - 1.0] == 1.0)
    assert np.all(layer.alpha[dist > radius_px + 1.0] == 0.0)
    assert abs(math.sqrt(layer.alpha.sum() / math.pi) - radius_px) <= 1.0


def test_shading_is_linear_in_environment():
    K = intrinsics(32, 24, 30.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    radiance = np.random.default_rng(2).random((8, 16, 3))
    once = render_object(cube_mesh(), CUBE_AT, K, cam, HdrPanorama(radiance), samples=16, width=32, height=24,
                         seed=3)
    twice = render_object(cube_mesh(), CUBE_AT, K, cam, HdrPanorama(2.0 * radiance), samples=16, width=32,
                          height=24, seed=3)
    assert once.alpha.sum() > 0
    assert np.array_equal(twice.alpha, once.alpha)
    assert np.array_equal(twice.rgb, 2.0 * once.rgb)


def test_render_is_deterministic_per_seed():
    K = intrinsics(24, 18, 20.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    env = HdrPanorama(np.random.default_rng(0).random((8, 16, 3)))
    first = render_object(cube_mesh(), CUBE_AT, K, cam, env, samples=8, width=24, height=18, seed=4)
    second = render_object(cube_mesh(), CUBE_AT, K, cam, env, samples=8, width=24, height=18, seed=4)
    assert np.array_equal(first.rgba, second.rgba)


def test_hard_shadow_matches_box_oracle():
    width, height = 96, 72
    K = intrinsics(width, height, 80.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    sun = sun_vector(120.0, 40.0)
    shadow = cast_shadow(cube_mesh(), CUBE_AT, GROUND, sun, K, cam, width, height)

    lo, hi = np.array([5.5, -0.5, 0.0]), np.array([6.5, 0.5, 1.0])
    origin, dirs = pixel_rays(K, cam, pixel_grid(width, height))
    with np.errstate(divide="ignore"):
        t_plane = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    camera_hit, t_box = _slab_hits(origin, dirs, lo, hi)
    on_ground = np.isfinite(t_plane) & ~(camera_hit & (t_box < t_plane))
    points = origin + np.where(on_ground, t_plane, 0.0)[:, None] * dirs
    sun_hit, _ = _slab_hits(points, np.broadcast_to(sun, points.shape), lo, hi)
    expected = (on_ground & sun_hit).reshape(height, width)

    assert expected.sum() > 10
    assert set(np.unique(shadow)) <= {0.0, 1.0}
    assert np.count_nonzero((shadow > 0.5) != expected) == 0


def test_hard_shadow_of_floating_sphere_matches_oracle():
    width, height = 96, 72
    K = intrinsics(width, height, 80.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    sun = sun_vector(120.0, 40.0)
    radius, center = 0.5, np.array([6.0, 0.5, 1.0])
    sphere = uv_sphere(radius, rings=12, segments=24)
    pose = CameraPose(np.eye(3), center)
    shadow = cast_shadow(sphere, pose, GROUND, sun, K, cam, width, height)

    vertices, _ = sphere.transformed(pose)
    v0, e1, e2 = _triangle_arrays(vertices, sphere.triangles)
    origin, dirs = pixel_rays(K, cam, pixel_grid(width, height))
    t_plane, on_plane = ray_plane_intersect_many(origin, dirs, GROUND)
    visible = on_plane & (_brute_closest(origin, dirs, v0, e1, e2) >= t_plane)
    idx = np.flatnonzero(visible)
    points = origin + t_plane[idx, None] * dirs[idx] + SHADOW_BIAS * GROUND.normal
    blocked = np.isfinite(_brute_closest(points, np.broadcast_to(sun, points.shape), v0, e1, e2))
    expected = np.zeros(width * height, dtype=bool)
    expected[idx] = blocked
    expected = expected.reshape(height, width)

    assert expected.sum() > 20
    assert set(np.unique(shadow)) <= {0.0, 1.0}
    assert np.count_nonzero((shadow > 0.5) != expected) == 0

    # away from the faceted rim the shadow is that of the round sphere
    offset = center - points
    along = offset @ sun
    miss = np.linalg.norm(offset - along[:, None] * sun, axis=1)
    clear = (miss < 0.95 * radius) | (miss > radius)
    assert np.array_equal(blocked[clear], (miss[clear] < radius) & (along[clear] > 0))


def test_no_shadow_when_sun_below_horizon():
    K = intrinsics(48, 36, 40.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    shadow = cast_shadow(cube_mesh(), CUBE_AT, GROUND, sun_vector(120.0, -10.0), K, cam, 48, 36)
    assert not shadow.any()


def test_soft_shadow_is_fractional():
    K = intrinsics(48, 36, 40.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    shadow = cast_shadow(cube_mesh(), CUBE_AT, GROUND, sun_vector(120.0, 40.0), K, cam, 48, 36,
                         softness_samples=16, light_radius_deg=5.0)
    assert shadow.min() >= 0.0 and shadow.max() <= 1.0
    assert np.any((shadow > 0.0) & (shadow < 1.0))


def test_shadow_hidden_behind_nearer_scene_geometry():
    K = intrinsics(48, 36, 40.0)
    cam = camera_pose([0.0, 0.0, 1.5], 15.0)
    wall = np.full((36, 48), 2.0)
    shadow = cast_shadow(cube_mesh(), CUBE_AT, GROUND, sun_vector(120.0, 40.0), K, cam, 48, 36,
                         scene_depth=wall)
    assert not shadow.any()


def test_composite_respects_scene_depth():
    background = np.full((2, 3, 3), 0.8)
    rgba = np.zeros((2, 3, 4))
    rgba[:, :, :3] = 0.2
    rgba[0, :, 3] = 1.0
    depth = np.full((2, 3), np.inf)
    depth[0, :] = 5.0
    layer = ObjectLayer(rgba, depth)
    scene_depth = np.array([[3.0, 10.0, 0.0], [10.0, 10.0, 10.0]])
    shadow = np.zeros((2, 3))
    shadow[1, 1] = 1.0
    shadow[0, 1] = 1.0

    out = composite_frame(background, layer, shadow, scene_depth, shadow_strength=0.5)
    # scene in front at (0, 0); unknown depth at (0, 2) counts as far
    assert np.allclose(out.rgb[0, 0], 0.8)
    assert np.allclose(out.rgb[0, 1], 0.2)
    assert np.allclose(out.rgb[0, 2], 0.2)
    assert out.object_mask.tolist() == [[0.0, 1.0, 1.0], [0.0, 0.0, 0.0]]
    assert np.allclose(out.rgb[1, 1], 0.4)
    assert out.shadow_mask[0, 1] == 0.0 and out.shadow_mask[1, 1] == 1.0


def test_composite_rejects_mismatched_layers():
    layer = ObjectLayer.empty(4, 3)
    with pytest.raises(DimensionMismatch):
        composite_frame(np.zeros((3, 5, 3)), layer, np.zeros((3, 5)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        composite_frame(np.zeros((3, 4, 3)), layer, np.zeros((3, 4)), np.zeros((3, 4)), shadow_strength=1.5)
