#!/usr/bin/env python3
"""
Tests for projection, back-projection, plane fitting and the equirect mapping.
"""

import numpy as np
import pytest

from errors import BehindCamera, DegenerateInput, InvalidPose
from geometry import (CameraPose, Plane, backproject_depth, backproject_pixels, direction_to_equirect,
                      equirect_directions, equirect_pixel_direction, fit_plane, orthonormal_frame, project_point,
                      project_points, ray_plane_intersect, ray_plane_intersect_many, rotation_angle,
                      rotation_from_rotvec)

K = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]])


def test_project_point_identity_pose():
    pixel, depth = project_point(K, CameraPose.identity(), np.array([1.0, 2.0, 10.0, 1.0]))
    assert np.allclose(pixel, [60.0, 60.0])
    assert depth == pytest.approx(10.0)


def test_project_point_ignores_homogeneous_scale():
    pose = CameraPose(rotation_from_rotvec([0.1, -0.2, 0.05]), [0.3, -0.1, 2.0])
    a, da = project_point(K, pose, np.array([1.0, 2.0, 10.0, 1.0]))
    b, db = project_point(K, pose, np.array([3.0, 6.0, 30.0, 3.0]))
    assert np.allclose(a, b)
    assert da == pytest.approx(db)


def test_project_point_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project_point(K, CameraPose.identity(), np.array([0.0, 0.0, -1.0, 1.0]))
    with pytest.raises(BehindCamera):
        project_point(K, CameraPose.identity(), np.array([1.0, 1.0, 0.0, 1.0]))


def test_camera_pose_rejects_non_rotation():
    with pytest.raises(InvalidPose):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidPose):
        CameraPose(2.0 * np.eye(3), np.zeros(3))


def test_pose_inverse_and_center():
    pose = CameraPose(rotation_from_rotvec([0.2, 0.4, -0.3]), [1.0, 2.0, 3.0])
    assert np.allclose(pose.compose(pose.inverse()).matrix(), np.eye(4))
    assert np.allclose(pose.apply(pose.center), 0.0)


def test_backprojection_inverts_projection():
    rng = np.random.default_rng(0)
    pose = CameraPose(rotation_from_rotvec([0.05, -0.1, 0.2]), [0.5, 0.2, 1.0])
    world = rng.uniform([-2, -2, 4], [2, 2, 9], size=(20, 3))
    world = pose.inverse().apply(world)
    pixels, depths = project_points(K, pose, world)
    assert np.allclose(backproject_pixels(K, pose, pixels, depths), world)


def test_backproject_depth_skips_invalid_pixels():
    depth = np.full((4, 5), 2.0)
    depth[0, 0] = 0.0
    depth[1, 1] = np.nan
    points = backproject_depth(K, CameraPose.identity(), depth)
    assert points.shape == (18, 3)
    assert np.allclose(points[:, 2], 2.0)


def test_fit_plane_recovers_tilted_plane():
    rng = np.random.default_rng(1)
    xy = rng.uniform(-5, 5, size=(200, 2))
    z = 0.2 * xy[:, 0] - 0.1 * xy[:, 1] + 1.0
    plane = fit_plane(np.column_stack([xy, z]), reference_point=[0.0, 0.0, 10.0])
    expected = np.array([-0.2, 0.1, 1.0]) / np.linalg.norm([-0.2, 0.1, 1.0])
    assert np.allclose(plane.normal, expected, atol=1e-9)
    assert plane.signed_distance([0.0, 0.0, 10.0]) > 0


def test_fit_plane_orientation_follows_reference():
    points = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fit_plane(points, reference_point=[0, 0, -3]).normal[2] == pytest.approx(-1.0)
    assert fit_plane(points).normal[2] == pytest.approx(1.0)


def test_fit_plane_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        fit_plane(np.array([[0, 0, 0], [1, 1, 1]], dtype=float))
    with pytest.raises(DegenerateInput):
        fit_plane(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]], dtype=float))


def test_ray_plane_intersect():
    ground = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
    hit = ray_plane_intersect(np.array([0.0, 0.0, 2.0]), np.array([1.0, 0.0, -1.0]), ground)
    assert np.allclose(hit, [2.0, 0.0, 0.0])
    assert ray_plane_intersect(np.array([0.0, 0.0, 2.0]), np.array([1.0, 0.0, 0.0]), ground) is None
    assert ray_plane_intersect(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0]), ground) is None

    t, hit_mask = ray_plane_intersect_many(np.array([0.0, 0.0, 2.0]),
                                           np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), ground)
    assert t[0] == pytest.approx(2.0)
    assert hit_mask.tolist() == [True, False]
    assert np.isinf(t[1])


def test_equirect_mapping_is_consistent():
    height, width = 16, 32
    dirs = equirect_directions(height, width)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    assert np.allclose(dirs[5, 11], equirect_pixel_direction(5, 11, height, width))
    col, row = direction_to_equirect(dirs[5, 11], height, width)
    assert col == pytest.approx(11.0)
    assert row == pytest.approx(5.0)
    # row 0 is the zenith
    assert dirs[0, :, 2].min() > 0.99


def test_rotation_helpers():
    R = rotation_from_rotvec([0.0, 0.0, 0.3])
    assert rotation_angle(np.eye(3), R) == pytest.approx(0.3)
    frame = orthonormal_frame(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.5]))
    assert np.allclose(frame[:, 0], [1.0, 0.0, 0.0])
    assert np.allclose(frame @ frame.T, np.eye(3))
    assert np.linalg.det(frame) == pytest.approx(1.0)


def _random_pose(rng) -> CameraPose:
    return CameraPose(rotation_from_rotvec(rng.normal(scale=1.0, size=3)), rng.uniform(-5.0, 5.0, 3))


def test_projection_round_trip_over_many_configurations():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        f = rng.uniform(50.0, 2000.0)
        w, h = rng.integers(64, 4096, size=2)
        K_rand = np.array([[f, 0.0, w / 2.0], [0.0, f * rng.uniform(0.9, 1.1), h / 2.0], [0.0, 0.0, 1.0]])
        pose = _random_pose(rng)
        pixel = rng.uniform([0.0, 0.0], [w, h])
        depth = rng.uniform(0.5, 50.0)
        world = backproject_pixels(K_rand, pose, pixel, [depth])
        again, z = project_points(K_rand, pose, world)
        assert z[0] == pytest.approx(depth, rel=1e-9)
        worst = max(worst, float(np.abs(again[0] - pixel).max()))
    assert worst < 1e-6


def test_fit_plane_is_invariant_under_rigid_motion():
    rng = np.random.default_rng(3)
    for _ in range(20):
        xy = rng.uniform(-5.0, 5.0, size=(300, 2))
        points = np.column_stack([xy, 0.3 * xy[:, 0] + 0.1 * xy[:, 1] + rng.normal(scale=0.05, size=300)])
        reference = np.array([0.0, 0.0, 5.0])
        plane = fit_plane(points, reference_point=reference)
        motion = _random_pose(rng)
        moved = fit_plane(motion.apply(points), reference_point=motion.apply(reference))
        carried = plane.transformed(motion)
        assert np.allclose(moved.normal, carried.normal, rtol=0, atol=1e-9)
        assert moved.d == pytest.approx(carried.d, abs=1e-9)


def test_fit_plane_with_noise_is_within_a_degree():
    rng = np.random.default_rng(5)
    normal = np.array([0.1, -0.2, 1.0]) / np.linalg.norm([0.1, -0.2, 1.0])
    basis = orthonormal_frame(normal, np.array([1.0, 0.0, 0.0]))
    uv = rng.uniform(-10.0, 10.0, size=(500, 2))
    points = uv[:, :1] * basis[:, 0] + uv[:, 1:] * basis[:, 1] + 0.7 * normal
    points += rng.normal(scale=0.05, size=points.shape)
    plane = fit_plane(points, reference_point=5.0 * normal)
    angle = np.degrees(np.arccos(np.clip(plane.normal @ normal, -1.0, 1.0)))
    assert angle < 1.0
    assert plane.d == pytest.approx(-0.7, abs=0.02)
