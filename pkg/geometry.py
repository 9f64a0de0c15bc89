"""
Camera and Euclidean geometry: pinhole projection, depth back-projection,
plane fitting, ray-plane intersection and the equirectangular direction mapping.

Conventions
-----------
- Poses are world-to-camera: ``X_cam = R @ X_world + t``.
- Pixel coordinates are ``(u, v)`` = (column, row) with pixel centers on integers.
- Camera frame: +x right, +y down, +z forward.
- Equirectangular panoramas: azimuth measured from world +X toward +Y along the
  width, polar angle from the zenith (+Z) along the height; row 0 is the zenith.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from errors import BehindCamera, DegenerateInput, InvalidPose

logger = logging.getLogger(__name__)

ROTATION_TOLERANCE = 1e-6


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOLERANCE) -> bool:
    """True when R is orthonormal with determinant +1 within ``tol``."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix (Frobenius norm) via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class CameraPose:
    """Rigid transform. For cameras: world-to-camera (R, t)."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not is_rotation(R):
            raise InvalidPose(f"Rotation is not orthonormal with det +1:\n{R}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "CameraPose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_camera_center(cls, R_c2w: np.ndarray, center: np.ndarray) -> "CameraPose":
        """Build a world-to-camera pose from a camera-to-world rotation and camera center."""
        R = np.asarray(R_c2w, dtype=np.float64).T
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "CameraPose":
        return CameraPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self ∘ other: apply ``other`` first."""
        return CameraPose(self.R @ other.R, self.R @ other.t + self.t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Optical axis (+z of the camera) expressed in world coordinates."""
        return self.R[2].copy()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t


@dataclass(frozen=True)
class Plane:
    """Plane ``A x + B y + C z + D = 0`` with (A, B, C) unit length."""
    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm < 1e-15:
            raise DegenerateInput("Plane normal must be nonzero")
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", float(self.d) / norm)

    @property
    def coefficients(self) -> Tuple[float, float, float, float]:
        a, b, c = self.normal
        return float(a), float(b), float(c), self.d

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.d

    def project(self, point: np.ndarray) -> np.ndarray:
        """Orthogonal projection of a point onto the plane."""
        point = np.asarray(point, dtype=np.float64)
        return point - self.signed_distance(point) * self.normal

    def transformed(self, pose: CameraPose) -> "Plane":
        """The plane carried by the rigid transform ``pose``."""
        n = pose.R @ self.normal
        return Plane(n, self.d - n @ pose.t)


def dehomogenize(P: np.ndarray) -> np.ndarray:
    """(..., 4) homogeneous points to (..., 3)."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[-1] == 3:
        return P
    return P[..., :3] / P[..., 3:4]


def project_points(K: np.ndarray, pose: CameraPose, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ``dehom(K [R|t] P)``; returns (pixels (n, 2), depths (n,)).

    No behind-camera test; callers inspect ``depth <= 0`` themselves.
    """
    X = dehomogenize(np.atleast_2d(points))
    Xc = X @ pose.R.T + pose.t
    p = Xc @ np.asarray(K, dtype=np.float64).T
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = p[:, :2] / p[:, 2:3]
    return pixels, Xc[:, 2]


def project_point(K: np.ndarray, pose: CameraPose, P_w: np.ndarray) -> Tuple[np.ndarray, float]:
    """Project one homogeneous world point into pixel coordinates.

    Args:
        K: 3x3 pinhole intrinsics (pixels).
        pose: world-to-camera pose.
        P_w: homogeneous 4-vector (any nonzero scale) or a 3-vector.

    Returns:
        (pixel, depth) where depth is the camera-frame z.

    Raises:
        BehindCamera: when depth <= 0.
    """
    pixels, depths = project_points(K, pose, np.asarray(P_w, dtype=np.float64).reshape(1, -1))
    depth = float(depths[0])
    if depth <= 0:
        raise BehindCamera(depth)
    return pixels[0], depth


def pixel_rays(K: np.ndarray, pose: CameraPose, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-space unit ray directions through (n, 2) pixels, plus the shared origin."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    homog = np.column_stack([pixels, np.ones(len(pixels))])
    d_cam = homog @ np.linalg.inv(np.asarray(K, dtype=np.float64)).T
    d_world = d_cam @ pose.R  # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return pose.center, d_world


def pixel_grid(width: int, height: int, stride: int = 1) -> np.ndarray:
    """(n, 2) pixel centers (u, v) in raster order."""
    vs, us = np.mgrid[0:height:stride, 0:width:stride]
    return np.column_stack([us.ravel(), vs.ravel()]).astype(np.float64)


def backproject_pixels(K: np.ndarray, pose: CameraPose, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """World points for pixels with camera-frame z depths."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    homog = np.column_stack([pixels, np.ones(len(pixels))])
    Xc = (homog @ np.linalg.inv(np.asarray(K, dtype=np.float64)).T) * depths[:, None]
    return (Xc - pose.t) @ pose.R


def backproject_depth(K: np.ndarray, pose: CameraPose, depth_map: np.ndarray, stride: int = 1,
                      mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Reconstruct world points from a depth map.

    Only pixels with depth > 0 (and inside ``mask`` when given) are returned,
    sampled every ``stride`` pixels in raster order.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth_map = np.asarray(depth_map, dtype=np.float64)
    sampled = depth_map[::stride, ::stride]
    valid = np.isfinite(sampled) & (sampled > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)[::stride, ::stride]
    vs, us = np.nonzero(valid)
    if len(vs) == 0:
        return np.zeros((0, 3))
    pixels = np.column_stack([us * stride, vs * stride]).astype(np.float64)
    return backproject_pixels(K, pose, pixels, sampled[vs, us])


def fit_plane(points: np.ndarray, reference_point: Optional[np.ndarray] = None,
              collinear_tol: float = 1e-10) -> Plane:
    """Total-least-squares plane through ``points``.

    The normal is the smallest right singular vector of the mean-centered points.
    It is oriented so ``reference_point`` (usually the mean camera center) lies on
    the positive side; without a reference, or when the reference sits on the
    plane, the normal with positive C (then B, then A) is preferred.

    Raises:
        DegenerateInput: fewer than 3 points or (near-)collinear input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateInput(f"Plane fit needs at least 3 points, got {len(pts) if pts.ndim == 2 else 0}")
    centroid = pts.mean(axis=0)
    _, s, Vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if s[0] == 0 or s[1] <= collinear_tol * s[0]:
        raise DegenerateInput("Points are collinear or coincident")
    normal = Vt[2]
    d = -float(normal @ centroid)

    side = 0.0
    if reference_point is not None:
        side = float(normal @ np.asarray(reference_point, dtype=np.float64) + d)
        scale = max(1.0, float(np.abs(pts).max()))
        if abs(side) <= 1e-12 * scale:
            side = 0.0
    if side == 0.0:
        for comp in (normal[2], normal[1], normal[0]):
            if abs(comp) > 1e-15:
                side = comp
                break
    if side < 0:
        normal, d = -normal, -d
    return Plane(normal, d)


def ray_plane_intersect(origin: np.ndarray, direction: np.ndarray, plane: Plane) -> Optional[np.ndarray]:
    """Forward ray/plane intersection point, or None when parallel or behind."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    denom = float(plane.normal @ direction)
    if abs(denom) < 1e-12:
        return None
    t = -(float(plane.normal @ origin) + plane.d) / denom
    if t < 0:
        return None
    return origin + t * direction


def ray_plane_intersect_many(origins: np.ndarray, directions: np.ndarray, plane: Plane) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized ray_plane_intersect: (ray parameters t, hit mask). ``t`` is inf on misses."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions))
    directions = np.asarray(directions, dtype=np.float64)
    denom = directions @ plane.normal
    num = -(origins @ plane.normal + plane.d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    hit = (np.abs(denom) >= 1e-12) & (t >= 0)
    return np.where(hit, t, np.inf), hit


def rotation_from_rotvec(omega: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()


def rotation_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    return float(np.linalg.norm(Rotation.from_matrix(orthonormalize(R_a.T @ R_b)).as_rotvec()))


def orthonormal_frame(normal: np.ndarray, forward_hint: np.ndarray) -> np.ndarray:
    """Rotation with columns (x, y, z): z = normal, x = hint projected into the plane."""
    z = np.asarray(normal, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.asarray(forward_hint, dtype=np.float64)
    x = x - (x @ z) * z
    if np.linalg.norm(x) < 1e-9:
        # hint parallel to the normal; fall back to the world axis least aligned with it
        axis = np.eye(3)[int(np.argmin(np.abs(z)))]
        x = axis - (axis @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


# --- equirectangular mapping ------------------------------------------------------

def equirect_directions(height: int, width: int) -> np.ndarray:
    """Unit world directions of every panorama pixel center, shape (H, W, 3)."""
    theta = (np.arange(height) + 0.5) * np.pi / height
    phi = (np.arange(width) + 0.5) * 2.0 * np.pi / width
    sin_t = np.sin(theta)[:, None]
    return np.stack([
        sin_t * np.cos(phi)[None, :],
        sin_t * np.sin(phi)[None, :],
        np.repeat(np.cos(theta)[:, None], width, axis=1),
    ], axis=-1)


def direction_to_equirect(directions: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous (col, row) coordinates with pixel centers on integers."""
    d = np.asarray(directions, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)
    col = phi * width / (2.0 * np.pi) - 0.5
    row = theta * height / np.pi - 0.5
    return col, row


def equirect_pixel_direction(row: int, col: int, height: int, width: int) -> np.ndarray:
    theta = (row + 0.5) * np.pi / height
    phi = (col + 0.5) * 2.0 * np.pi / width
    return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
