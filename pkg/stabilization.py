"""
Placement stabilization.

Anchor points chosen in the first reference frame are tracked backward through
the target frames with optical flow; each target frame's camera pose is then
re-estimated by minimizing the anchors' reprojection error (Levenberg-Marquardt
on a local SE(3) update) and the placement pixel is recomputed under the
refined poses.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from errors import InsufficientAnchors, IoError, NonConvergence
from geometry import (CameraPose, backproject_pixels, orthonormalize, project_points,
                      rotation_from_rotvec)
from placement import PlacementTrack, build_track
from scene_io import ScenePackage, read_float_raster, write_float_raster

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 3
DEFAULT_WINDOW = 15
DEFAULT_ANCHORS = 16
CONFIDENCE_THRESHOLD = 0.05
FB_THRESHOLD = 1.0
DEFAULT_FLOW_POINTS = 250_000


@dataclass
class FlowField:
    """Dense displacement from ``frame_a`` to ``frame_b``: pixel x in a moves to x + flow[x] in b."""
    flow: np.ndarray
    confidence: np.ndarray
    frame_a: int = 0
    frame_b: int = 1

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2 or self.flow.shape[:2] != self.confidence.shape:
            raise ValueError(f"Flow {self.flow.shape} and confidence {self.confidence.shape} disagree")
        if not (np.all(np.isfinite(self.flow)) and np.all(np.isfinite(self.confidence))):
            raise ValueError("Flow field contains non-finite values")

    def sample(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Bilinear flow and confidence at (n, 2) subpixel points (u, v)."""
        coords = [points[:, 1], points[:, 0]]
        dx = ndimage.map_coordinates(self.flow[:, :, 0], coords, order=1, mode="nearest")
        dy = ndimage.map_coordinates(self.flow[:, :, 1], coords, order=1, mode="nearest")
        conf = ndimage.map_coordinates(self.confidence, coords, order=1, mode="nearest")
        return np.column_stack([dx, dy]), conf


@dataclass
class AnchorSet:
    """M world anchors with per-frame projected (p~) and observed (p^) pixels.

    ``projected`` covers frames 0..N (the N target frames plus the first reference frame); ``observed``
    and ``alive`` cover the N target frames.
    """
    world_points: np.ndarray
    projected: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None
    alive: Optional[np.ndarray] = None
    source_frame: int = 0

    @property
    def count(self) -> int:
        return len(self.world_points)


@dataclass
class PoseSolution:
    pose: CameraPose
    rms: float
    iterations: int
    converged: bool
    cost_history: List[float] = field(default_factory=list)
    anchors_used: int = 0


# --- optical flow ----------------------------------------------------------------------------

def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = cv2.cvtColor(image[:, :, :3], cv2.COLOR_RGB2GRAY)
    return image


def _to_uint8(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Both frames through one linear map onto 0..255 so brightness constancy survives."""
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return tuple(np.clip((x - lo) * scale + 0.5, 0, 255).astype(np.uint8) for x in (a, b))


def _grid_axis(size: int, stride: int) -> np.ndarray:
    axis = np.arange(0, size, stride, dtype=np.float64)
    if axis[-1] != size - 1:
        axis = np.append(axis, size - 1)
    return axis


def _min_eigen_confidence(gray: np.ndarray, window: int) -> np.ndarray:
    strength = cv2.cornerMinEigenVal(gray, blockSize=window, ksize=3)
    peak = float(strength.max())
    if peak <= 0:
        return np.zeros(gray.shape, dtype=np.float64)
    return np.clip(strength / peak, 0.0, 1.0).astype(np.float64)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, levels: int = DEFAULT_LEVELS,
                  window: int = DEFAULT_WINDOW, iterations: int = 30, epsilon: float = 0.01,
                  stride: Optional[int] = None, fb_threshold: float = FB_THRESHOLD,
                  frame_ids: Tuple[int, int] = (0, 1)) -> FlowField:
    """Dense pyramidal Lucas-Kanade flow from ``frame_a`` to ``frame_b``.

    Every grid point (every ``stride`` pixels; by default the smallest stride
    keeping the grid under DEFAULT_FLOW_POINTS) is tracked on its own with
    ``cv2.calcOpticalFlowPyrLK`` and checked by tracking back from ``frame_b``.
    Points that fail or miss the forward-backward check take the flow of the
    nearest good point and get zero confidence. The grid is then interpolated
    bilinearly to every pixel. Confidence is the structure tensor's minimum
    eigenvalue normalized to [0, 1].
    """
    a = _gray(frame_a)
    b = _gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"Frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    if stride is None:
        stride = max(1, int(np.ceil(np.sqrt(h * w / DEFAULT_FLOW_POINTS))))
    img_a, img_b = _to_uint8(a, b)

    xs, ys = _grid_axis(w, stride), _grid_axis(h, stride)
    gx, gy = np.meshgrid(xs, ys)
    p0 = np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float32).reshape(-1, 1, 2)
    lk_params = dict(winSize=(window, window), maxLevel=max(levels - 1, 0),
                     criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, iterations, epsilon))
    p1, status, _ = cv2.calcOpticalFlowPyrLK(img_a, img_b, p0, None, **lk_params)
    p0r, status_back, _ = cv2.calcOpticalFlowPyrLK(img_b, img_a, p1, None, **lk_params)

    shape = (len(ys), len(xs))
    grid_flow = (p1 - p0).reshape(shape + (2,)).astype(np.float64)
    back_error = np.abs(p0r - p0).reshape(shape + (2,)).max(axis=2)
    good = ((status.reshape(shape) == 1) & (status_back.reshape(shape) == 1)
            & (back_error < fb_threshold) & np.all(np.isfinite(grid_flow), axis=2))
    if not good.any():
        grid_flow[:] = 0.0
    elif not good.all():
        _, (iy, ix) = ndimage.distance_transform_edt(~good, return_indices=True)
        grid_flow = grid_flow[iy, ix]

    # fractional grid index of every pixel
    cy = np.interp(np.arange(h), ys, np.arange(len(ys)))
    cx = np.interp(np.arange(w), xs, np.arange(len(xs)))
    coords = np.meshgrid(cy, cx, indexing="ij")
    flow = np.dstack([ndimage.map_coordinates(grid_flow[:, :, k], coords, order=1, mode="nearest") for k in (0, 1)])
    support = ndimage.map_coordinates(good.astype(np.float64), coords, order=1, mode="nearest")
    confidence = _min_eigen_confidence(a, window) * np.clip(support, 0.0, 1.0)
    return FlowField(flow, confidence, *frame_ids)


def flow_path(flow_dir: Path, n: int) -> Path:
    return Path(flow_dir) / f"flow_{n}_{n + 1}.pfm"


def save_flow(flow_dir: Path, field: FlowField) -> Path:
    """Write as a 3-channel PFM: (dx, dy, confidence)."""
    Path(flow_dir).mkdir(parents=True, exist_ok=True)
    data = np.dstack([field.flow, field.confidence]).astype(np.float32)
    return write_float_raster(flow_path(flow_dir, field.frame_a), data)


def load_flow(flow_dir: Path, n: int) -> FlowField:
    data = read_float_raster(flow_path(flow_dir, n)).astype(np.float64)
    confidence = data[:, :, 2] if data.shape[2] > 2 else np.ones(data.shape[:2])
    return FlowField(data[:, :, :2], confidence, n, n + 1)


def compute_flows(scene: ScenePackage, levels: int = DEFAULT_LEVELS, window: int = DEFAULT_WINDOW,
                  flow_dir: Optional[Path] = None, jobs: Optional[int] = None) -> List[FlowField]:
    """Flows for the frame pairs (n, n+1), n = 0..N-1, loading precomputed files when present."""
    pairs = range(scene.n_target)

    def one(n: int) -> FlowField:
        if flow_dir is not None and flow_path(flow_dir, n).is_file():
            return load_flow(flow_dir, n)
        return estimate_flow(scene.frames[n], scene.frames[n + 1], levels, window, frame_ids=(n, n + 1))

    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        flows = list(pool.map(one, pairs))
    logger.info(f"Optical flow ready for {len(flows)} frame pairs")
    return flows


# --- anchors -----------------------------------------------------------------------------------

def select_anchor_points(scene: ScenePackage, allowed_classes: Iterable[int], frame: Optional[int] = None,
                         around_pixel: Optional[np.ndarray] = None, radius: Optional[float] = None,
                         count: int = DEFAULT_ANCHORS, min_distance: int = 5, window: int = 7) -> AnchorSet:
    """Pick the ``count`` strongest structure-tensor corners on allowed classes.

    Corners are taken in the first reference frame (index N) by default, restricted to a
    disc around ``around_pixel`` when given, and back-projected to world points
    through the depth map. Equal strengths are ordered by raster index.
    """
    n = scene.n_target if frame is None else frame
    gray = _gray(scene.frames[n])
    strength = cv2.cornerMinEigenVal(gray, blockSize=window, ksize=3).astype(np.float64)
    allowed = sorted(set(allowed_classes))
    eligible = (scene.depth_maps[n] > 0) & (strength > 0)
    if allowed:
        eligible &= np.isin(scene.seg_masks[n], allowed)
    border = window // 2 + 1
    eligible[:border, :] = eligible[-border:, :] = False
    eligible[:, :border] = eligible[:, -border:] = False
    if around_pixel is not None and radius is not None:
        vs, us = np.mgrid[0:gray.shape[0], 0:gray.shape[1]]
        eligible &= (us - around_pixel[0]) ** 2 + (vs - around_pixel[1]) ** 2 <= radius ** 2
    # local maxima only
    peaks = strength >= ndimage.maximum_filter(strength, size=3, mode="nearest")
    candidates = np.flatnonzero(eligible & peaks)
    order = candidates[np.lexsort((candidates, -strength.ravel()[candidates]))]

    chosen: List[Tuple[int, int]] = []
    width = gray.shape[1]
    for idx in order:
        v, u = divmod(int(idx), width)
        if all((u - cu) ** 2 + (v - cv) ** 2 >= min_distance ** 2 for cu, cv in chosen):
            chosen.append((u, v))
            if len(chosen) == count:
                break
    if not chosen:
        return AnchorSet(np.zeros((0, 4)), source_frame=n)
    pixels = np.array(chosen, dtype=np.float64)
    depths = scene.depth_maps[n][pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
    world = backproject_pixels(scene.intrinsics, scene.poses[n], pixels, depths)
    logger.info(f"Selected {len(world)} anchor points in frame {n}")
    return AnchorSet(np.column_stack([world, np.ones(len(world))]), source_frame=n)


def project_anchors(scene: ScenePackage, anchors: AnchorSet, poses: Optional[Sequence[CameraPose]] = None) -> AnchorSet:
    """Fill the anchors' projections into frames 0..N."""
    poses = list(poses if poses is not None else scene.poses)
    projected = np.stack([project_points(scene.intrinsics, poses[n], anchors.world_points)[0]
                          for n in range(scene.n_target + 1)])
    return replace(anchors, projected=projected)


def _warp_backward(points: np.ndarray, field: FlowField, iterations: int = 10, tolerance: float = 1e-4,
                   step: float = 0.5) -> np.ndarray:
    """Solve p_n + flow(p_n) = p_{n+1} for p_n.

    Newton iterations on the bilinear flow, with the flow Jacobian taken by
    central differences; a singular Jacobian falls back to the plain
    fixed-point step.
    """
    du = np.array([step, 0.0])
    dv = np.array([0.0, step])
    estimate = points - field.sample(points)[0]
    for _ in range(iterations):
        residual = estimate + field.sample(estimate)[0] - points
        if np.nanmax(np.abs(residual), initial=0.0) < tolerance:
            break
        dfu = (field.sample(estimate + du)[0] - field.sample(estimate - du)[0]) / (2.0 * step)
        dfv = (field.sample(estimate + dv)[0] - field.sample(estimate - dv)[0]) / (2.0 * step)
        a, b = 1.0 + dfu[:, 0], dfv[:, 0]
        c, d = dfu[:, 1], 1.0 + dfv[:, 1]
        det = a * d - b * c
        ok = np.abs(det) > 1e-6
        safe = np.where(ok, det, 1.0)
        delta_u = np.where(ok, (d * residual[:, 0] - b * residual[:, 1]) / safe, residual[:, 0])
        delta_v = np.where(ok, (a * residual[:, 1] - c * residual[:, 0]) / safe, residual[:, 1])
        estimate = estimate - np.column_stack([delta_u, delta_v])
    return estimate


def track_anchors(scene: ScenePackage, anchors: AnchorSet, flows: Optional[Sequence[FlowField]] = None,
                  confidence_threshold: float = CONFIDENCE_THRESHOLD, levels: int = DEFAULT_LEVELS,
                  window: int = DEFAULT_WINDOW) -> AnchorSet:
    """Observed pixels p^_n, chained backward from p~_{N+1} through the pair flows.

    An anchor that leaves the image or lands below ``confidence_threshold`` dies
    at that frame and stays dead for every earlier frame.
    """
    if anchors.projected is None:
        anchors = project_anchors(scene, anchors)
    N = scene.n_target
    if flows is None:
        flows = compute_flows(scene, levels, window)
    M = anchors.count
    observed = np.full((N, M, 2), np.nan)
    alive = np.zeros((N, M), dtype=bool)

    current = anchors.projected[N].copy()
    living = _inside(current, scene.width, scene.height)
    for n in range(N - 1, -1, -1):
        estimate = _warp_backward(current, flows[n])
        _, confidence = flows[n].sample(estimate)
        living &= _inside(estimate, scene.width, scene.height) & (confidence >= confidence_threshold)
        observed[n] = estimate
        alive[n] = living
        current = estimate
    dead = M - int(alive[0].sum()) if N else 0
    if dead:
        logger.info(f"{dead} of {M} anchors lost before frame 0")
    return replace(anchors, observed=observed, alive=alive)


def _inside(points: np.ndarray, width: int, height: int) -> np.ndarray:
    finite = np.all(np.isfinite(points), axis=1)
    return finite & (points[:, 0] >= 0) & (points[:, 0] <= width - 1) & (points[:, 1] >= 0) & (points[:, 1] <= height - 1)


# --- pose refinement -------------------------------------------------------------------------

def _residuals_and_jacobian(K: np.ndarray, R: np.ndarray, t: np.ndarray, X: np.ndarray,
                            observed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    Xc = X @ R.T + t
    p = Xc @ K.T
    uv = p[:, :2] / p[:, 2:3]
    r = (uv - observed).ravel()
    M = len(X)
    # d(uv)/d(Xc) rows: (K[0] - u K[2]) / p2 and (K[1] - v K[2]) / p2
    du = (K[0][None, :] - uv[:, 0:1] * K[2][None, :]) / p[:, 2:3]
    dv = (K[1][None, :] - uv[:, 1:2] * K[2][None, :]) / p[:, 2:3]
    # d(Xc)/d(omega) = -[Xc]_x ; d(Xc)/d(tau) = I
    skew = np.zeros((M, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -Xc[:, 2], Xc[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = Xc[:, 2], -Xc[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -Xc[:, 1], Xc[:, 0]
    J = np.zeros((2 * M, 6))
    J[0::2, :3] = -np.einsum("mi,mij->mj", du, skew)
    J[1::2, :3] = -np.einsum("mi,mij->mj", dv, skew)
    J[0::2, 3:] = du
    J[1::2, 3:] = dv
    return r, J


def solve_pose(K: np.ndarray, world_points: np.ndarray, observed: np.ndarray, init: CameraPose,
               max_iterations: int = 100, step_tolerance: float = 1e-12, initial_damping: float = 1e-3) -> PoseSolution:
    """Damped Gauss-Newton (Levenberg-Marquardt) on sum_i |p^_i - dehom(K [R|t] P_i)|^2.

    The update is an axis-angle rotation and a translation composed on the left:
    R <- exp(w) R, t <- exp(w) t + tau. Steps are accepted only when the cost
    decreases, and R is re-orthonormalized after every accepted step.
    """
    K = np.asarray(K, dtype=np.float64)
    X = world_points[:, :3] / world_points[:, 3:4] if world_points.shape[1] == 4 else world_points
    R, t = init.R.copy(), init.t.copy()
    r, J = _residuals_and_jacobian(K, R, t, X, observed)
    cost = float(r @ r)
    history = [cost]
    damping = initial_damping
    converged = cost <= 1e-24
    iterations = 0
    while not converged and iterations < max_iterations:
        iterations += 1
        H = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(30):
            A = H + damping * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            dR = rotation_from_rotvec(delta[:3])
            R_new = orthonormalize(dR @ R)
            t_new = dR @ t + delta[3:]
            r_new, J_new = _residuals_and_jacobian(K, R_new, t_new, X, observed)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                R, t, r, J, cost = R_new, t_new, r_new, J_new, cost_new
                damping = max(damping / 10.0, 1e-12)
                history.append(cost)
                accepted = True
                break
            damping *= 10.0
        if not accepted or np.linalg.norm(delta) < step_tolerance or cost <= 1e-24:
            converged = True
    rms = float(np.sqrt(cost / max(len(r), 1)))
    return PoseSolution(CameraPose(R, t), rms, iterations, converged, history, len(X))


def refine_pose(K: np.ndarray, anchors: AnchorSet, frame: int, init: CameraPose, max_iterations: int = 100,
                residual_threshold: float = 2.0) -> CameraPose:
    """Re-estimate the pose of target frame ``frame`` from its alive anchors.

    Raises:
        InsufficientAnchors: fewer than 4 alive anchors, or a rank-deficient configuration.
        NonConvergence: the iteration cap was hit with the RMS residual (per
            coordinate, pixels) above ``residual_threshold``; ``best`` holds the
            last iterate.
    """
    return solve_frame(K, anchors, frame, init, max_iterations, residual_threshold).pose


def solve_frame(K: np.ndarray, anchors: AnchorSet, frame: int, init: CameraPose, max_iterations: int = 100,
                residual_threshold: float = 2.0) -> PoseSolution:
    if anchors.observed is None or anchors.alive is None:
        raise InsufficientAnchors("Anchors have not been tracked")
    alive = anchors.alive[frame]
    if int(alive.sum()) < 4:
        raise InsufficientAnchors(f"Frame {frame}: {int(alive.sum())} alive anchors, need at least 4")
    points = anchors.world_points[alive]
    observed = anchors.observed[frame][alive]
    X = points[:, :3] / points[:, 3:4]
    _, J = _residuals_and_jacobian(np.asarray(K, dtype=np.float64), init.R, init.t, X, observed)
    if np.linalg.matrix_rank(J) < 6:
        raise InsufficientAnchors(f"Frame {frame}: anchors are not in general position")
    solution = solve_pose(K, points, observed, init, max_iterations)
    if not solution.converged and solution.rms > residual_threshold:
        raise NonConvergence(f"Frame {frame}: no convergence after {solution.iterations} iterations "
                             f"(rms {solution.rms:.3f} px)", best=solution.pose,
                             diagnostics={"rms": solution.rms, "iterations": solution.iterations})
    return solution


def stabilize_track(scene: ScenePackage, track: PlacementTrack, anchors: AnchorSet, allowed_classes: Iterable[int] = (),
                    max_iterations: int = 100, residual_threshold: float = 2.0,
                    jobs: Optional[int] = None) -> PlacementTrack:
    """Replace each target frame's pose by its refined pose and recompute the track.

    A frame whose refinement fails keeps its original pose and pixel; the
    failure is recorded in ``warnings``.
    """
    N = scene.n_target
    K = scene.intrinsics

    def one(n: int):
        try:
            return n, solve_frame(K, anchors, n, scene.poses[n], max_iterations, residual_threshold), None
        except (InsufficientAnchors, NonConvergence) as e:
            return n, None, e

    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        results = list(pool.map(one, range(N)))

    poses: List[CameraPose] = []
    warnings: List[Dict[str, Any]] = list(track.warnings)
    residuals: List[Dict[str, Any]] = []
    for n, solution, error in results:
        if solution is None:
            logger.warning(f"Frame {n}: keeping original pose ({error})")
            warnings.append({"frame": n, "stage": "stabilize", "error": type(error).__name__, "message": str(error)})
            poses.append(scene.poses[n])
            residuals.append({"frame": n, "anchors": int(anchors.alive[n].sum()) if anchors.alive is not None else 0,
                              "rms_before": None, "rms_after": None, "iterations": 0, "status": "fallback"})
            continue
        poses.append(solution.pose)
        residuals.append({"frame": n, "anchors": solution.anchors_used,
                          "rms_before": float(np.sqrt(solution.cost_history[0] / (2 * solution.anchors_used))),
                          "rms_after": solution.rms, "iterations": solution.iterations, "status": "refined"})

    stabilized = build_track(scene, track.anchor_world, allowed_classes, poses)
    stabilized.warnings = warnings
    stabilized.residuals = residuals
    return stabilized


def write_residual_report(path: Path, records: Sequence[Dict[str, Any]]) -> Path:
    """Per-frame residual CSV."""
    path = Path(path)
    columns = ["frame", "anchors", "rms_before", "rms_after", "iterations", "status"]
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for record in records:
                writer.writerow({k: ("" if record.get(k) is None else record.get(k)) for k in columns})
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path
