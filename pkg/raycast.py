"""
Triangle ray casting on the CPU.

A median-split bounding volume hierarchy is built once per mesh with numpy and
stored in flat arrays; traversal and Moller-Trumbore intersection run in numba
kernels that release the GIL, so frames can share one BVH across threads.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
HIT_EPSILON = 1e-9
BOX_PADDING = 1e-9


@dataclass(frozen=True)
class TriangleBVH:
    """Flat BVH over world-space triangles.

    Nodes are stored depth-first. A leaf has ``count > 0`` and covers
    ``order[start:start + count]``; an inner node has ``count == 0`` and children
    ``left`` and ``right``. ``depth`` counts edges on the longest root-to-leaf
    path; traversal stacks hold ``depth + 2`` entries.
    """
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    depth: int = 0

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    @property
    def is_empty(self) -> bool:
        return len(self.v0) == 0


def build_bvh(vertices: np.ndarray, triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> TriangleBVH:
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    corners = vertices[triangles] if len(triangles) else np.zeros((0, 3, 3))
    tri_min = corners.min(axis=1) if len(triangles) else np.zeros((0, 3))
    tri_max = corners.max(axis=1) if len(triangles) else np.zeros((0, 3))
    centroids = corners.mean(axis=1) if len(triangles) else np.zeros((0, 3))

    box_min, box_max, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(triangles))

    def new_node(lo: int, hi: int) -> int:
        idx = len(box_min)
        members = order[lo:hi]
        lo_corner = tri_min[members].min(axis=0) if hi > lo else np.zeros(3)
        hi_corner = tri_max[members].max(axis=0) if hi > lo else np.zeros(3)
        # padded so rounding in the slab test never culls a grazing hit
        pad = BOX_PADDING * (1.0 + np.maximum(np.abs(lo_corner), np.abs(hi_corner)))
        box_min.append(lo_corner - pad)
        box_max.append(hi_corner + pad)
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return idx

    root = new_node(0, len(triangles))
    depth = 0
    pending = [(root, 0, len(triangles), 0)]
    while pending:
        node, lo, hi, level = pending.pop()
        depth = max(depth, level)
        if hi - lo <= leaf_size:
            continue
        members = order[lo:hi]
        spread = centroids[members].max(axis=0) - centroids[members].min(axis=0)
        axis = int(np.argmax(spread))
        if spread[axis] <= 0:
            continue
        ranked = members[np.argsort(centroids[members, axis], kind="stable")]
        order[lo:hi] = ranked
        mid = (lo + hi) // 2
        count[node] = 0
        left[node] = new_node(lo, mid)
        right[node] = new_node(mid, hi)
        pending.append((right[node], mid, hi, level + 1))
        pending.append((left[node], lo, mid, level + 1))

    tri = triangles[order] if len(triangles) else triangles
    v0 = vertices[tri[:, 0]] if len(tri) else np.zeros((0, 3))
    e1 = vertices[tri[:, 1]] - v0 if len(tri) else np.zeros((0, 3))
    e2 = vertices[tri[:, 2]] - v0 if len(tri) else np.zeros((0, 3))
    bvh = TriangleBVH(
        np.ascontiguousarray(v0), np.ascontiguousarray(e1), np.ascontiguousarray(e2),
        np.array(box_min, dtype=np.float64).reshape(-1, 3), np.array(box_max, dtype=np.float64).reshape(-1, 3),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order.astype(np.int64), depth,
    )
    logger.debug(f"BVH built: {len(triangles)} triangles, {len(box_min)} nodes, depth {depth}")
    return bvh


def _safe_inverse(directions: np.ndarray) -> np.ndarray:
    d = np.where(np.abs(directions) < 1e-30, np.where(directions < 0, -1e-30, 1e-30), directions)
    return 1.0 / d


@njit(nogil=True, cache=True)
def _slab(o, inv, lo, hi, t_max):
    t0 = 0.0
    t1 = t_max
    for a in range(3):
        near = (lo[a] - o[a]) * inv[a]
        far = (hi[a] - o[a]) * inv[a]
        if near > far:
            near, far = far, near
        if near > t0:
            t0 = near
        if far < t1:
            t1 = far
        if t0 > t1:
            return False
    return True


@njit(nogil=True, cache=True)
def _triangle(o, d, v0, e1, e2, eps):
    # Moller-Trumbore; returns (t, b1, b2) with t = -1 on miss
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-14:
        return -1.0, 0.0, 0.0
    inv_det = 1.0 / det
    sx = o[0] - v0[0]
    sy = o[1] - v0[1]
    sz = o[2] - v0[2]
    b1 = (sx * px + sy * py + sz * pz) * inv_det
    if b1 < 0.0 or b1 > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    b2 = (d[0] * qx + d[1] * qy + d[2] * qz) * inv_det
    if b2 < 0.0 or b1 + b2 > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv_det
    if t <= eps:
        return -1.0, 0.0, 0.0
    return t, b1, b2


@njit(nogil=True, cache=True)
def _closest_kernel(origins, directions, inv, t_max, v0, e1, e2, box_min, box_max, left, right, start, count,
                    stack_size, out_t, out_tri, out_b1, out_b2):
    for r in range(origins.shape[0]):
        o = origins[r]
        d = directions[r]
        best = t_max[r]
        hit = -1
        hb1 = 0.0
        hb2 = 0.0
        stack = np.empty(stack_size, dtype=np.int64)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if not _slab(o, inv[r], box_min[node], box_max[node], best):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    t, b1, b2 = _triangle(o, d, v0[i], e1[i], e2[i], HIT_EPSILON)
                    if t > 0.0 and t < best:
                        best = t
                        hit = i
                        hb1 = b1
                        hb2 = b2
            else:
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        out_t[r] = best if hit >= 0 else np.inf
        out_tri[r] = hit
        out_b1[r] = hb1
        out_b2[r] = hb2


@njit(nogil=True, cache=True)
def _occluded_kernel(origins, directions, inv, t_max, v0, e1, e2, box_min, box_max, left, right, start, count,
                     stack_size, out):
    for r in range(origins.shape[0]):
        o = origins[r]
        d = directions[r]
        stack = np.empty(stack_size, dtype=np.int64)
        stack[0] = 0
        top = 1
        blocked = False
        while top > 0 and not blocked:
            top -= 1
            node = stack[top]
            if not _slab(o, inv[r], box_min[node], box_max[node], t_max[r]):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    t, b1, b2 = _triangle(o, d, v0[i], e1[i], e2[i], HIT_EPSILON)
                    if t > 0.0 and t < t_max[r]:
                        blocked = True
                        break
            else:
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        out[r] = blocked


def _prepare(origins: np.ndarray, directions: np.ndarray, t_max) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    directions = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape))
    limits = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(directions),)))
    return origins, directions, limits


def closest_hits(bvh: TriangleBVH, origins: np.ndarray, directions: np.ndarray,
                 t_max=np.inf) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest intersection per ray.

    Returns:
        (t, triangle, barycentrics): ``t`` is inf and ``triangle`` is -1 on a miss;
        ``triangle`` indexes the mesh's original triangle order; barycentrics
        are (b1, b2) of vertices 1 and 2.
    """
    origins, directions, limits = _prepare(origins, directions, t_max)
    n = len(directions)
    t = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 2))
    if bvh.is_empty or n == 0:
        return t, tri, bary
    b1 = np.zeros(n)
    b2 = np.zeros(n)
    _closest_kernel(origins, directions, _safe_inverse(directions), limits, bvh.v0, bvh.e1, bvh.e2,
                    bvh.box_min, bvh.box_max, bvh.left, bvh.right, bvh.start, bvh.count, bvh.depth + 2,
                    t, tri, b1, b2)
    hit = tri >= 0
    tri[hit] = bvh.order[tri[hit]]
    bary[:, 0], bary[:, 1] = b1, b2
    return t, tri, bary


def occluded(bvh: TriangleBVH, origins: np.ndarray, directions: np.ndarray, t_max=np.inf) -> np.ndarray:
    """True where a ray hits any triangle within (epsilon, t_max)."""
    origins, directions, limits = _prepare(origins, directions, t_max)
    out = np.zeros(len(directions), dtype=np.bool_)
    if bvh.is_empty or len(directions) == 0:
        return out
    _occluded_kernel(origins, directions, _safe_inverse(directions), limits, bvh.v0, bvh.e1, bvh.e2,
                     bvh.box_min, bvh.box_max, bvh.left, bvh.right, bvh.start, bvh.count, bvh.depth + 2,
                     out)
    return out
