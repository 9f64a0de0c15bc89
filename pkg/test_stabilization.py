#!/usr/bin/env python3
"""
Tests for optical flow, anchor tracking and Levenberg-Marquardt pose refinement.
"""

import csv

import numpy as np
import pytest

from errors import InsufficientAnchors, NonConvergence
from geometry import CameraPose, project_points, rotation_angle, rotation_from_rotvec
from placement import build_track
from stabilization import (AnchorSet, FlowField, compute_flows, estimate_flow, load_flow, project_anchors,
                           refine_pose, save_flow, select_anchor_points, solve_pose, stabilize_track,
                           track_anchors, write_residual_report)
from synthetic_scene import CLASSES, intrinsics, make_synthetic_scene, textured_image

ROAD = {CLASSES["road"], CLASSES["lane"]}
K = intrinsics(96, 72, 80.0)


@pytest.mark.parametrize("shift", [(1.5, -0.75), (-2.25, 1.0), (4.0, 0.0), (-4.0, 2.5)])
def test_flow_recovers_translation(shift):
    a = textured_image(96, 80)
    b = textured_image(96, 80, shift)
    field = estimate_flow(a, b, levels=3, window=15)
    interior = field.flow[16:-16, 16:-16]
    error = np.abs(interior - np.array(shift))
    assert error.mean() <= 0.25
    assert np.median(error) <= 0.1
    assert field.confidence[16:-16, 16:-16].max() > 0.5


def test_flow_is_mirror_symmetric():
    shift = (1.75, -0.5)
    a = textured_image(96, 80)
    b = textured_image(96, 80, shift)
    field = estimate_flow(a, b, stride=1)
    mirrored = estimate_flow(a[:, ::-1], b[:, ::-1], stride=1)
    flipped_back = mirrored.flow[:, ::-1]
    interior = (slice(16, -16), slice(16, -16))
    assert np.abs(flipped_back[interior][..., 0] + field.flow[interior][..., 0]).mean() <= 0.05
    assert np.abs(flipped_back[interior][..., 1] - field.flow[interior][..., 1]).mean() <= 0.05


def test_flow_grid_is_interpolated_to_every_pixel():
    a = textured_image(96, 80)
    b = textured_image(96, 80, (2.0, 1.0))
    field = estimate_flow(a, b, stride=4)
    assert field.flow.shape == (80, 96, 2)
    assert np.abs(field.flow[16:-16, 16:-16] - np.array([2.0, 1.0])).mean() <= 0.25


def test_flow_of_identical_frames_is_zero():
    a = textured_image(64, 48)
    field = estimate_flow(a, a)
    assert np.abs(field.flow).max() < 1e-6


def test_flow_files_reload(tmp_path):
    rng = np.random.default_rng(0)
    field = FlowField(rng.normal(size=(6, 8, 2)), rng.random((6, 8)), 3, 4)
    path = save_flow(tmp_path, field)
    assert path.name == "flow_3_4.pfm"
    loaded = load_flow(tmp_path, 3)
    assert np.allclose(loaded.flow, field.flow, atol=1e-6)
    assert np.allclose(loaded.confidence, field.confidence, atol=1e-6)


def test_solve_pose_recovers_perturbed_pose():
    rng = np.random.default_rng(2)
    truth = CameraPose(rotation_from_rotvec([0.02, -0.05, 0.01]), [0.1, -0.2, 0.3])
    cam_points = np.column_stack([rng.uniform(-3, 3, 30), rng.uniform(-2, 2, 30), rng.uniform(4, 12, 30)])
    world = truth.inverse().apply(cam_points)
    observed, _ = project_points(K, truth, world)
    init = CameraPose(rotation_from_rotvec([0.05, -0.02, 0.04]) @ truth.R, truth.t + [0.1, 0.05, -0.1])

    solution = solve_pose(K, np.column_stack([world, np.ones(30)]), observed, init)
    assert solution.converged
    assert solution.rms < 1e-6
    assert rotation_angle(solution.pose.R, truth.R) < 1e-7
    assert np.allclose(solution.pose.t, truth.t, atol=1e-6)
    # cost never increases
    assert all(b <= a for a, b in zip(solution.cost_history, solution.cost_history[1:]))


def _tracked_anchors(world: np.ndarray, observed: np.ndarray) -> AnchorSet:
    return AnchorSet(np.column_stack([world, np.ones(len(world))]), observed=observed[None],
                     alive=np.ones((1, len(world)), dtype=bool))


def test_refine_pose_needs_four_anchors():
    world = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.0, 1.0, 6.0]])
    observed, _ = project_points(K, CameraPose.identity(), world)
    with pytest.raises(InsufficientAnchors):
        refine_pose(K, _tracked_anchors(world, observed), 0, CameraPose.identity())


def test_refine_pose_rejects_collinear_anchors():
    world = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [2.0, 0.0, 5.0], [3.0, 0.0, 5.0]])
    observed, _ = project_points(K, CameraPose.identity(), world)
    with pytest.raises(InsufficientAnchors):
        refine_pose(K, _tracked_anchors(world, observed), 0, CameraPose.identity())


def test_refine_pose_reports_non_convergence():
    rng = np.random.default_rng(5)
    world = np.column_stack([rng.uniform(-2, 2, 12), rng.uniform(-2, 2, 12), rng.uniform(5, 9, 12)])
    observed, _ = project_points(K, CameraPose.identity(), world)
    observed = observed + rng.normal(scale=20.0, size=observed.shape)
    with pytest.raises(NonConvergence) as excinfo:
        refine_pose(K, _tracked_anchors(world, observed), 0, CameraPose.identity(), max_iterations=1,
                    residual_threshold=0.5)
    assert isinstance(excinfo.value.best, CameraPose)
    assert excinfo.value.diagnostics["iterations"] == 1


def test_anchor_selection_respects_classes():
    synthetic = make_synthetic_scene()
    scene = synthetic.scene
    anchors = select_anchor_points(scene, ROAD, count=12)
    assert 4 <= anchors.count <= 12
    assert anchors.source_frame == scene.n_target
    # back-projected onto the ground
    assert np.abs(anchors.world_points[:, 2]).max() < 1e-9
    pixels, _ = project_points(scene.intrinsics, scene.poses[scene.n_target], anchors.world_points)
    classes = scene.seg_masks[scene.n_target][np.round(pixels[:, 1]).astype(int), np.round(pixels[:, 0]).astype(int)]
    assert set(classes.tolist()) <= ROAD


def test_exact_flow_tracks_true_projections():
    synthetic = make_synthetic_scene()
    scene = synthetic.scene
    anchors = project_anchors(scene, select_anchor_points(scene, ROAD, count=12))
    tracked = track_anchors(scene, anchors, synthetic.flows)
    for n in range(scene.n_target):
        truth, _ = project_points(scene.intrinsics, synthetic.true_poses[n], anchors.world_points)
        alive = tracked.alive[n]
        assert alive.sum() >= 4
        assert np.abs(tracked.observed[n][alive] - truth[alive]).max() < 0.05


def test_dead_anchors_stay_dead():
    synthetic = make_synthetic_scene()
    scene = synthetic.scene
    anchors = project_anchors(scene, select_anchor_points(scene, ROAD, count=8))
    flows = list(synthetic.flows)
    flows[2] = FlowField(flows[2].flow, np.zeros_like(flows[2].confidence), 2, 3)
    tracked = track_anchors(scene, anchors, flows)
    assert not tracked.alive[2].any()
    assert not tracked.alive[0].any() and not tracked.alive[1].any()
    assert tracked.alive[3].all()


def test_stabilization_removes_pose_jitter(tmp_path):
    synthetic = make_synthetic_scene(jitter_deg=0.5, jitter_m=0.02, seed=1)
    scene = synthetic.scene
    anchor = np.array([6.0, 0.0, 0.0, 1.0])
    raw = build_track(scene, anchor, ROAD)
    anchors = track_anchors(scene, project_anchors(scene, select_anchor_points(scene, ROAD)), synthetic.flows)
    stabilized = stabilize_track(scene, raw, anchors, ROAD)

    truth = np.array([project_points(scene.intrinsics, synthetic.true_poses[n], anchor)[0][0]
                      for n in range(scene.n_target)])
    raw_error = np.linalg.norm(raw.pixels - truth, axis=1)
    stable_error = np.linalg.norm(stabilized.pixels - truth, axis=1)
    assert raw_error.mean() > 0.3
    assert stable_error.mean() * 5.0 <= raw_error.mean()
    assert not stabilized.warnings
    assert all(r["status"] == "refined" for r in stabilized.residuals)

    path = write_residual_report(tmp_path / "residuals.csv", stabilized.residuals)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["frame"]) for r in rows] == list(range(scene.n_target))
    assert all(float(r["rms_after"]) <= float(r["rms_before"]) for r in rows)


def test_stabilization_falls_back_without_anchors():
    synthetic = make_synthetic_scene(jitter_deg=0.5, seed=1)
    scene = synthetic.scene
    anchor = np.array([6.0, 0.0, 0.0, 1.0])
    raw = build_track(scene, anchor, ROAD)
    anchors = track_anchors(scene, project_anchors(scene, AnchorSet(np.zeros((0, 4)))), synthetic.flows)
    stabilized = stabilize_track(scene, raw, anchors, ROAD)
    assert np.allclose(stabilized.pixels, raw.pixels)
    assert len(stabilized.warnings) == scene.n_target
    assert {w["error"] for w in stabilized.warnings} == {"InsufficientAnchors"}


def test_compute_flows_prefers_precomputed_files(tmp_path):
    synthetic = make_synthetic_scene()
    for field in synthetic.flows:
        save_flow(tmp_path, field)
    flows = compute_flows(synthetic.scene, flow_dir=tmp_path)
    assert len(flows) == synthetic.scene.n_target
    assert np.allclose(flows[1].flow, synthetic.flows[1].flow, atol=1e-4)


def _random_pose_problem(rng, count: int):
    truth = CameraPose(rotation_from_rotvec(rng.normal(scale=0.1, size=3)), rng.normal(scale=0.5, size=3))
    cam_points = np.column_stack([rng.uniform(-3, 3, count), rng.uniform(-2, 2, count), rng.uniform(4, 12, count)])
    world = truth.inverse().apply(cam_points)
    observed, _ = project_points(K, truth, world)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= 0.05 / np.linalg.norm(shift)
    init = CameraPose(rotation_from_rotvec(axis * np.deg2rad(2.0)) @ truth.R, truth.t + shift)
    return truth, np.column_stack([world, np.ones(count)]), observed, init


def test_pose_recovery_over_many_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        truth, world, observed, init = _random_pose_problem(rng, 8)
        solution = solve_pose(K, world, observed, init)
        assert rotation_angle(solution.pose.R, truth.R) < 1e-5, seed
        assert np.linalg.norm(solution.pose.t - truth.t) < 1e-5, seed
        assert solution.rms < 1e-6, seed


def test_pose_refinement_with_noisy_observations():
    within = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        truth, world, observed, init = _random_pose_problem(rng, 20)
        noisy = observed + rng.normal(scale=0.5, size=observed.shape)
        solution = solve_pose(K, world, noisy, init)
        within += solution.rms <= 0.75
    assert within >= 95


def test_consistent_observations_leave_track_unchanged():
    synthetic = make_synthetic_scene()
    scene = synthetic.scene
    anchor = np.array([6.0, 0.0, 0.0, 1.0])
    raw = build_track(scene, anchor, ROAD)
    anchors = project_anchors(scene, select_anchor_points(scene, ROAD))
    N = scene.n_target
    consistent = AnchorSet(anchors.world_points, projected=anchors.projected, observed=anchors.projected[:N].copy(),
                           alive=np.ones((N, anchors.count), dtype=bool), source_frame=anchors.source_frame)
    stabilized = stabilize_track(scene, raw, consistent, ROAD)
    assert np.abs(stabilized.pixels - raw.pixels).max() < 1e-6
    assert not stabilized.warnings


def test_stabilization_with_estimated_flow():
    synthetic = make_synthetic_scene(width=192, height=144, focal=160.0, speed=0.25, jitter_deg=0.5,
                                     jitter_m=0.02, seed=1)
    scene = synthetic.scene
    N = scene.n_target
    anchor = np.array([6.0, 0.0, 0.0, 1.0])
    raw = build_track(scene, anchor, ROAD)
    center, _ = project_points(scene.intrinsics, scene.poses[N], anchor)
    selected = select_anchor_points(scene, ROAD, around_pixel=center[0], radius=40.0)
    anchors = track_anchors(scene, project_anchors(scene, selected), compute_flows(scene))
    stabilized = stabilize_track(scene, raw, anchors, ROAD)

    truth = np.array([project_points(scene.intrinsics, synthetic.true_poses[n], anchor)[0][0] for n in range(N)])
    raw_error = np.sqrt(np.mean(np.sum((raw.pixels - truth) ** 2, axis=1)))
    stable_error = np.sqrt(np.mean(np.sum((stabilized.pixels - truth) ** 2, axis=1)))
    assert raw_error > 0.5
    assert stable_error * 5.0 <= raw_error
