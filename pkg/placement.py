"""
Object placement: ground-plane estimation, anchor selection and the raw
per-frame placement track with occlusion validity.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from errors import BehindCamera, DegenerateInput, NoPlaceableRegion, PlaneFitFailed
from geometry import (CameraPose, Plane, backproject_depth, backproject_pixels, fit_plane,
                      orthonormal_frame, project_point, project_points)
from scene_io import ScenePackage

logger = logging.getLogger(__name__)


class PlacementStrategy(Enum):
    """How the world anchor of the inserted object is chosen."""
    FUTURE_CAMERA = "future_camera"
    MASK_REGION = "mask_region"


@dataclass(frozen=True)
class TrackEntry:
    pixel: np.ndarray
    depth: float
    visible: bool
    valid_class: bool


@dataclass
class PlacementTrack:
    """Per-target-frame placement of the world anchor."""
    anchor_world: np.ndarray
    entries: List[TrackEntry]
    poses: List[CameraPose] = field(default_factory=list)
    warnings: List[Dict[str, Any]] = field(default_factory=list)
    residuals: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def pixels(self) -> np.ndarray:
        return np.array([e.pixel for e in self.entries])

    def to_records(self) -> List[Dict[str, Any]]:
        return [{"index": i, "pixel": [float(e.pixel[0]), float(e.pixel[1])], "depth": float(e.depth),
                 "visible": bool(e.visible), "valid_class": bool(e.valid_class)}
                for i, e in enumerate(self.entries)]


def _homogeneous(point: np.ndarray) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    if point.size == 4:
        return point / point[3]
    return np.append(point, 1.0)


def fit_ground_plane(scene: ScenePackage, allowed_classes: Iterable[int], frames: Optional[Sequence[int]] = None,
                     stride: int = 4) -> Plane:
    """Fit the placement plane to the back-projected allowed-class pixels.

    Uses the reference frames by default; the mean camera center of the frames
    used orients the normal.

    Raises:
        PlaneFitFailed: no usable points, or a degenerate configuration.
    """
    allowed = np.array(sorted(set(allowed_classes)), dtype=np.int64)
    if frames is None:
        frames = range(scene.n_target, scene.n_frames)
    clouds = []
    for n in frames:
        mask = np.isin(scene.seg_masks[n], allowed) if allowed.size else None
        clouds.append(backproject_depth(scene.intrinsics, scene.poses[n], scene.depth_maps[n], stride, mask))
    points = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    reference = scene.camera_centers[list(frames)].mean(axis=0)
    try:
        plane = fit_plane(points, reference_point=reference)
    except DegenerateInput as e:
        raise PlaneFitFailed(f"Ground plane fit failed on {len(points)} points: {e}") from e
    residual = np.abs(plane.signed_distance(points))
    logger.info(f"Ground plane fitted to {len(points)} points (normal={np.round(plane.normal, 4).tolist()}, "
                f"d={plane.d:.4f}, rms={np.sqrt(np.mean(residual ** 2)):.4f} m)")
    return plane


def select_placement_point(scene: ScenePackage, strategy: PlacementStrategy, allowed_classes: Iterable[int],
                           plane: Optional[Plane] = None) -> np.ndarray:
    """Choose the homogeneous world anchor.

    FUTURE_CAMERA: the camera center of the last frame of the sequence, dropped onto the
    fitted ground plane along its normal.
    MASK_REGION: the depth-back-projected pixel of the last target frame that lies
    deepest inside the allowed region (largest distance to its boundary).

    Raises:
        NoPlaceableRegion: no allowed pixel with valid depth.
        PlaneFitFailed: the ground plane could not be fitted.
    """
    strategy = PlacementStrategy(strategy)
    allowed = set(allowed_classes)
    if strategy is PlacementStrategy.FUTURE_CAMERA:
        if plane is None:
            plane = fit_ground_plane(scene, allowed)
        anchor = plane.project(scene.poses[-1].center)
        logger.info(f"Future-camera anchor at {np.round(anchor, 4).tolist()}")
        return _homogeneous(anchor)

    n = scene.n_target - 1
    region = np.isin(scene.seg_masks[n], sorted(allowed)) & (scene.depth_maps[n] > 0)
    if not region.any():
        raise NoPlaceableRegion(f"Frame {n} has no pixel of classes {sorted(allowed)} with valid depth")
    # the image border counts as region boundary
    distance = ndimage.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]
    v, u = np.unravel_index(int(np.argmax(distance)), distance.shape)
    point = backproject_pixels(scene.intrinsics, scene.poses[n], np.array([[u, v]], dtype=np.float64),
                               np.array([scene.depth_maps[n][v, u]]))[0]
    logger.info(f"Mask-region anchor from pixel ({u}, {v}) at {distance[v, u]:.1f} px from the region boundary")
    return _homogeneous(point)


def object_pose_on_plane(anchor_world: np.ndarray, plane: Plane, reference_pose: CameraPose,
                         yaw_degrees: Optional[float] = None, ground_offset: float = 0.0) -> CameraPose:
    """Object-to-world transform: object +Z along the plane normal, +X forward.

    Forward defaults to the reference camera heading projected into the plane;
    ``yaw_degrees`` rotates it about the normal.
    """
    anchor = _homogeneous(anchor_world)[:3]
    frame = orthonormal_frame(plane.normal, reference_pose.forward)
    if yaw_degrees:
        a = np.deg2rad(yaw_degrees)
        c, s = np.cos(a), np.sin(a)
        frame = frame @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    origin = plane.project(anchor) + ground_offset * plane.normal
    return CameraPose(frame, origin)


def occlusion_check(mask: np.ndarray, pixel: np.ndarray, allowed_classes: Iterable[int]) -> bool:
    """True iff the rounded pixel lies inside the grid on an allowed class."""
    pixel = np.asarray(pixel, dtype=np.float64)
    if not np.all(np.isfinite(pixel)):
        return False
    u, v = (int(np.floor(c + 0.5)) for c in pixel[:2])
    height, width = mask.shape[:2]
    if u < 0 or v < 0 or u >= width or v >= height:
        return False
    return int(mask[v, u]) in set(allowed_classes)


def build_track(scene: ScenePackage, anchor_world: np.ndarray, allowed_classes: Iterable[int] = (),
                poses: Optional[Sequence[CameraPose]] = None) -> PlacementTrack:
    """Project the anchor into each target frame and flag visibility.

    ``poses`` overrides the scene poses (used after stabilization).
    """
    allowed = set(allowed_classes)
    poses = list(poses if poses is not None else scene.poses[:scene.n_target])
    anchor = _homogeneous(anchor_world)
    entries = []
    for n, pose in enumerate(poses[:scene.n_target]):
        try:
            pixel, depth = project_point(scene.intrinsics, pose, anchor)
            in_front = True
        except BehindCamera as e:
            pixels, _ = project_points(scene.intrinsics, pose, anchor)
            pixel, depth, in_front = pixels[0], e.depth, False
        inside = bool(in_front and 0 <= pixel[0] <= scene.width - 1 and 0 <= pixel[1] <= scene.height - 1)
        valid = inside and occlusion_check(scene.seg_masks[n], pixel, allowed)
        entries.append(TrackEntry(np.asarray(pixel, dtype=np.float64), float(depth), inside, valid))
    hidden = [i for i, e in enumerate(entries) if not e.visible]
    if hidden:
        logger.warning(f"Anchor not visible in frames {hidden}")
    return PlacementTrack(anchor, entries, poses[:scene.n_target])
