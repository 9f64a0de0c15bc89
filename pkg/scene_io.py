"""
Scene, mesh and raster input/output.

A scene package is a JSON manifest plus per-frame assets (RGB frames, depth
maps, segmentation masks). Everything is validated on load and converted to
linear-light float arrays; outputs are written with deterministic formats so
identical runs produce byte-identical trees.

Manifest schema (paths relative to the manifest)::

    {
      "frame_rate": 10,
      "n_target": 5, "n_reference": 2,
      "pose_convention": "camera_to_world" | "world_to_camera",
      "decode_gamma": 2.2,                      # optional
      "intrinsics": [[fx, s, cx], [0, fy, cy], [0, 0, 1]],
      "classes": {"road": 1, "lane": 2},        # class name -> id
      "frames": [
        {"index": 0, "image": "rgb/0000.png", "depth": "depth/0000.pfm",
         "mask": "mask/0000.png", "rotation": [[...]], "translation": [...]}
      ],
      "sky_panorama": "sky.png",                # optional LDR equirect
      "side_views": [{"image": ..., "intrinsics": ..., "rotation": ...,
                      "translation": ...}]      # optional, same convention
    }
"""

import os

# must be set before OpenCV touches an EXR file
os.environ.setdefault("OPENCV_IO_ENABLE_OPENEXR", "1")

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, TYPE_CHECKING

import cv2
import numpy as np
import trimesh
from PIL import Image

from errors import (DegenerateMesh, DimensionMismatch, InvalidPose, InvalidRate,
                    IoError, MissingAsset, ParseError)
from geometry import CameraPose, is_rotation

if TYPE_CHECKING:
    from render_composite import CompositeOutput

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 2.2
FLOAT_SUFFIXES = {".pfm", ".exr", ".hdr"}
MATRIX_MAGIC = b"IAS-MAT1"
MANIFEST_NAME = "run_manifest.json"


# --- color encoding --------------------------------------------------------------------

def decode_display(values: np.ndarray, gamma: float = DEFAULT_GAMMA, max_value: float = 255.0) -> np.ndarray:
    """Display-encoded integers to linear light in [0, 1]."""
    return np.power(np.asarray(values, dtype=np.float64) / max_value, gamma)


def encode_display(linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Linear light to 8-bit display encoding (clipped, rounded half-up)."""
    x = np.clip(np.nan_to_num(np.asarray(linear, dtype=np.float64)), 0.0, 1.0)
    return np.floor(np.power(x, 1.0 / gamma) * 255.0 + 0.5).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# --- rasters ---------------------------------------------------------------------------------

def _require(path: Path, what: str = "asset") -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingAsset(path, what)
    return path


def read_image(path: Path, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """8-bit RGB image to linear float64 (H, W, 3)."""
    path = _require(path, "image")
    try:
        with Image.open(path) as image:
            if image.mode != "RGB":
                image = image.convert("RGB")
            data = np.asarray(image, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ParseError(f"Cannot decode image {path}: {e}") from e
    return decode_display(data, gamma)


def write_image(path: Path, linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> Path:
    return write_png8(path, encode_display(linear, gamma))


def write_png8(path: Path, data: np.ndarray) -> Path:
    path = Path(path)
    try:
        Image.fromarray(np.ascontiguousarray(data)).save(path, format="PNG")
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def read_mask(path: Path) -> np.ndarray:
    """8/16-bit single-channel class-id PNG to an int32 grid."""
    path = _require(path, "mask")
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ParseError(f"Cannot decode mask {path}")
    if data.ndim == 3:
        raise ParseError(f"Mask {path} must be single-channel, got {data.shape[2]} channels")
    return data.astype(np.int32)


def write_mask(path: Path, mask: np.ndarray) -> Path:
    mask = np.asarray(mask)
    dtype = np.uint8 if mask.size == 0 or mask.max() < 256 else np.uint16
    path = Path(path)
    if not cv2.imwrite(str(path), mask.astype(dtype)):
        raise IoError(f"Cannot write mask {path}")
    return path


def read_float_raster(path: Path) -> np.ndarray:
    """PFM / EXR / Radiance HDR to float32, channels in RGB order."""
    path = _require(path, "raster")
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED | cv2.IMREAD_ANYDEPTH)
    if data is None:
        raise ParseError(f"Cannot decode float raster {path}")
    data = data.astype(np.float32)
    if data.ndim == 3 and data.shape[2] >= 3:
        data = cv2.cvtColor(data[:, :, :3], cv2.COLOR_BGR2RGB)
    return data


def write_float_raster(path: Path, data: np.ndarray) -> Path:
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 2:
        data = np.concatenate([data, np.zeros_like(data[:, :, :1])], axis=2)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    params: List[int] = []
    if path.suffix.lower() == ".exr":
        params = [cv2.IMWRITE_EXR_TYPE, cv2.IMWRITE_EXR_TYPE_FLOAT]
    try:
        ok = cv2.imwrite(str(path), data, params)
    except cv2.error as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    if not ok:
        raise IoError(f"Cannot write {path}")
    return path


def read_raster(path: Path, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Dispatch on suffix: float formats stay linear, 8-bit images are linearized."""
    if Path(path).suffix.lower() in FLOAT_SUFFIXES:
        return read_float_raster(path)
    return read_image(path, gamma)


def write_raster(path: Path, linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> Path:
    """Counterpart of read_raster: float suffixes keep linear values, anything else is display-encoded PNG."""
    if Path(path).suffix.lower() in FLOAT_SUFFIXES:
        return write_float_raster(path, linear)
    return write_image(path, linear, gamma)


# --- float32 matrix files (descriptors, features) -------------------------------------------

def write_matrix_file(path: Path, matrix: np.ndarray) -> Path:
    """Header: 8-byte magic, uint32 d, uint32 count (little endian); then float32 rows."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype="<f4"))
    count, d = matrix.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(MATRIX_MAGIC)
            f.write(np.array([d, count], dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(matrix).tobytes())
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def read_matrix_file(path: Path) -> np.ndarray:
    path = _require(path, "matrix file")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MATRIX_MAGIC:
        raise ParseError(f"{path} is not a float32 matrix file")
    d, count = (int(v) for v in np.frombuffer(raw[8:16], dtype="<u4"))
    payload = np.frombuffer(raw[16:], dtype="<f4")
    if payload.size != d * count:
        raise ParseError(f"{path}: header says {count}x{d}, payload holds {payload.size} values")
    return payload.reshape(count, d).astype(np.float64)


# --- panoramas ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class HdrPanorama:
    """Equirectangular linear radiance, shape (H, W, 3) with W = 2H."""
    radiance: np.ndarray

    def __post_init__(self):
        r = np.array(self.radiance, dtype=np.float64)
        if r.ndim == 2:
            r = np.repeat(r[:, :, None], 3, axis=2)
        if r.ndim != 3 or r.shape[2] != 3:
            raise DimensionMismatch(f"Panorama must be (H, W, 3), got {r.shape}")
        if r.shape[1] != 2 * r.shape[0]:
            raise DimensionMismatch(f"Panorama width must be twice its height, got {r.shape[1]}x{r.shape[0]}")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("Panorama radiance must be finite and nonnegative")
        r.setflags(write=False)
        object.__setattr__(self, "radiance", r)

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    @classmethod
    def zeros(cls, height: int) -> "HdrPanorama":
        return cls(np.zeros((height, 2 * height, 3)))


def read_panorama(path: Path) -> HdrPanorama:
    return HdrPanorama(read_float_raster(path))


def write_panorama(path: Path, pano: HdrPanorama) -> Path:
    return write_raster(path, pano.radiance)


# --- meshes -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectMesh:
    """Triangle mesh in the object frame (meters) with a Lambertian material."""
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.6))
    uvs: Optional[np.ndarray] = None
    texture: Optional[np.ndarray] = None

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty(cls) -> "ObjectMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def transformed(self, pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
        """Vertices and normals carried into the frame of ``pose`` (object-to-world)."""
        return pose.apply(self.vertices), self.normals @ pose.R.T


def build_mesh(vertices: np.ndarray, triangles: np.ndarray, normals: Optional[np.ndarray] = None,
               albedo: Optional[Sequence[float]] = None, uvs: Optional[np.ndarray] = None,
               texture: Optional[np.ndarray] = None, allow_empty: bool = False,
               max_degenerate_fraction: float = 0.5, area_eps: float = 1e-12) -> ObjectMesh:
    """Validate raw arrays into an ObjectMesh, computing normals when absent.

    Raises:
        ParseError: malformed arrays or triangle indices out of range.
        DegenerateMesh: more than ``max_degenerate_fraction`` zero-area triangles.
    """
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(triangles).reshape(-1, 3)
    if F.size and not np.issubdtype(F.dtype, np.integer):
        if not np.all(F == np.round(F)):
            raise ParseError("Triangle indices must be integers")
    F = F.astype(np.int64)
    if len(F) == 0:
        if not allow_empty:
            raise ParseError("Mesh has no triangles")
        return ObjectMesh(V, F, np.zeros_like(V), np.asarray(albedo if albedo is not None else [0.6] * 3, dtype=np.float64))
    if F.min() < 0 or F.max() >= len(V):
        raise ParseError(f"Triangle index out of range [0, {len(V)})")
    if not np.all(np.isfinite(V)):
        raise ParseError("Vertex coordinates must be finite")

    areas = 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1)
    degenerate = float(np.mean(areas <= area_eps))
    if degenerate > max_degenerate_fraction:
        raise DegenerateMesh(f"{degenerate:.0%} of triangles have zero area")

    if normals is None:
        N = np.asarray(trimesh.Trimesh(vertices=V, faces=F, process=False).vertex_normals, dtype=np.float64)
    else:
        N = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if len(N) != len(V):
            raise ParseError(f"Got {len(N)} normals for {len(V)} vertices")
    lengths = np.linalg.norm(N, axis=1)
    # isolated vertices have no defined normal
    N = np.where(lengths[:, None] > 1e-12, N / np.maximum(lengths, 1e-300)[:, None], np.array([0.0, 0.0, 1.0]))

    rho = np.asarray(albedo if albedo is not None else [0.6, 0.6, 0.6], dtype=np.float64).reshape(3)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ParseError("Albedo must lie in [0, 1]")
    if uvs is not None:
        uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        if len(uvs) != len(V):
            uvs = None
    if texture is not None and uvs is None:
        texture = None
    return ObjectMesh(V, F, N, rho, uvs, None if texture is None else np.asarray(texture, dtype=np.float64))


def _material_albedo(visual: Any, gamma: float) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    """(albedo, uvs, texture) from a trimesh visual, each None when absent."""
    if not isinstance(visual, trimesh.visual.texture.TextureVisuals):
        return None, None, None
    material = getattr(visual, "material", None)
    albedo = None
    texture = None
    diffuse = getattr(material, "diffuse", None)
    if diffuse is None:
        diffuse = getattr(material, "baseColorFactor", None)
    if diffuse is not None:
        albedo = decode_display(np.asarray(diffuse, dtype=np.float64)[:3], gamma)
    image = getattr(material, "image", None)
    if image is None:
        image = getattr(material, "baseColorTexture", None)
    if image is not None:
        texture = decode_display(np.asarray(image.convert("RGB"), dtype=np.uint8), gamma)
    uvs = None if visual.uv is None else np.asarray(visual.uv, dtype=np.float64)
    return albedo, uvs, texture


def load_mesh(path: Path, albedo: Optional[Sequence[float]] = None, gamma: float = DEFAULT_GAMMA,
              allow_empty: bool = False) -> ObjectMesh:
    """Load an OBJ/PLY (or any trimesh-supported) triangle mesh.

    File normals are kept when present, otherwise computed. An explicit
    ``albedo`` overrides the file material.
    """
    path = _require(path, "mesh")
    try:
        loaded = trimesh.load(str(path), force="mesh", process=False)
    except Exception as e:
        raise ParseError(f"Cannot parse mesh {path}: {e}") from e
    if not isinstance(loaded, trimesh.Trimesh):
        if allow_empty:
            return ObjectMesh.empty()
        raise ParseError(f"{path} holds no triangle geometry")

    faces = np.asarray(loaded.faces)
    vertices = np.asarray(loaded.vertices)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise ParseError(f"{path}: triangle index out of range")
    normals = None
    if len(faces) and len(vertices):
        try:
            normals = np.asarray(loaded.vertex_normals)
        except (IndexError, ValueError) as e:
            raise ParseError(f"{path}: {e}") from e
    file_albedo, uvs, texture = _material_albedo(loaded.visual, gamma)
    mesh = build_mesh(vertices, faces, normals, albedo if albedo is not None else file_albedo,
                      uvs, texture, allow_empty=allow_empty)
    logger.info(f"Loaded mesh {path.name}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh


def save_mesh(path: Path, mesh: ObjectMesh) -> Path:
    path = Path(path)
    out = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, vertex_normals=mesh.normals, process=False)
    try:
        out.export(str(path))
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


# --- scene packages -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SideView:
    """A calibrated side-view LDR image used to stitch the environment panorama."""
    image: np.ndarray
    intrinsics: np.ndarray
    pose: CameraPose


@dataclass(frozen=True)
class ScenePackage:
    """Calibrated frame sequence; the first ``n_target`` frames receive the object."""
    frames: Tuple[np.ndarray, ...]
    intrinsics: np.ndarray
    poses: Tuple[CameraPose, ...]
    depth_maps: Tuple[np.ndarray, ...]
    seg_masks: Tuple[np.ndarray, ...]
    frame_rate: float
    n_target: int
    n_reference: int
    classes: Dict[str, int] = field(default_factory=dict)
    sky_panorama: Optional[np.ndarray] = None
    side_views: Tuple[SideView, ...] = ()
    decode_gamma: float = DEFAULT_GAMMA
    source: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", np.array(self.intrinsics, dtype=np.float64))
        validate_scene(self)
        for arr in (*self.frames, *self.depth_maps, *self.seg_masks, self.intrinsics):
            arr.setflags(write=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    @property
    def camera_centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])

    def class_ids(self, names: Iterable[Any]) -> set:
        """Resolve class names (or raw integer ids) against the manifest table."""
        ids = set()
        for name in names:
            if isinstance(name, (int, np.integer)):
                ids.add(int(name))
            elif str(name).isdigit():
                ids.add(int(name))
            elif name in self.classes:
                ids.add(int(self.classes[name]))
            else:
                raise KeyError(f"Unknown class '{name}'; known: {sorted(self.classes)}")
        return ids


def validate_scene(scene: ScenePackage) -> None:
    n = len(scene.frames)
    if n == 0:
        raise DimensionMismatch("Scene has no frames")
    if scene.n_reference < 1:
        raise DimensionMismatch(f"n_reference must be >= 1, got {scene.n_reference}")
    if scene.n_target < 1 or scene.n_target + scene.n_reference != n:
        raise DimensionMismatch(f"n_target + n_reference = {scene.n_target + scene.n_reference}, but {n} frames")
    if not (len(scene.poses) == len(scene.depth_maps) == len(scene.seg_masks) == n):
        raise DimensionMismatch("Frames, poses, depth maps and masks must have equal counts")
    shape = scene.frames[0].shape[:2]
    for i in range(n):
        for name, arr in (("frame", scene.frames[i]), ("depth", scene.depth_maps[i]), ("mask", scene.seg_masks[i])):
            if arr.shape[:2] != shape:
                raise DimensionMismatch(f"{name} {i} has shape {arr.shape[:2]}, expected {shape}")
    if np.asarray(scene.intrinsics).shape != (3, 3):
        raise DimensionMismatch("Intrinsics must be 3x3")
    if scene.frame_rate <= 0:
        raise DimensionMismatch("frame_rate must be positive")


def _pose_from_entry(entry: Dict[str, Any], convention: str, label: str) -> CameraPose:
    try:
        R = np.asarray(entry["rotation"], dtype=np.float64)
        t = np.asarray(entry["translation"], dtype=np.float64)
    except KeyError as e:
        raise ParseError(f"{label}: missing {e}") from e
    if R.shape != (3, 3) or t.shape != (3,):
        raise ParseError(f"{label}: rotation must be 3x3 and translation a 3-vector")
    if not is_rotation(R):
        raise InvalidPose(f"{label}: rotation is not orthonormal with det +1")
    if convention == "camera_to_world":
        return CameraPose(R, t).inverse()
    if convention == "world_to_camera":
        return CameraPose(R, t)
    raise ParseError(f"Unknown pose_convention '{convention}'")


def load_scene_package(manifest_path: Path, gamma: Optional[float] = None, jobs: Optional[int] = None,
                       min_frames: Optional[int] = None) -> ScenePackage:
    """Load and validate a scene package.

    Raises:
        MissingAsset: the manifest or a referenced file does not exist.
        DimensionMismatch: frames, depth maps and masks disagree in size or count.
        InvalidPose: a rotation is not orthonormal with determinant +1.
    """
    manifest_path = _require(manifest_path, "scene manifest")
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"Manifest {manifest_path} is not valid JSON: {e}") from e

    gamma = float(gamma if gamma is not None else manifest.get("decode_gamma", DEFAULT_GAMMA))
    convention = manifest.get("pose_convention", "camera_to_world")
    try:
        entries = sorted(manifest["frames"], key=lambda e: int(e["index"]))
        K = np.asarray(manifest["intrinsics"], dtype=np.float64)
        n_target = int(manifest["n_target"])
        n_reference = int(manifest["n_reference"])
        frame_rate = float(manifest["frame_rate"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"Manifest {manifest_path} is missing a required field: {e}") from e

    # existence first, so the error names the first missing file deterministically
    for entry in entries:
        for key in ("image", "depth", "mask"):
            if key not in entry:
                raise ParseError(f"Frame {entry.get('index')} has no '{key}' entry")
            _require(root / entry[key], key)

    poses = [_pose_from_entry(e, convention, f"frame {e['index']}") for e in entries]

    def load_frame(entry: Dict[str, Any]):
        return (read_image(root / entry["image"], gamma),
                read_float_raster(root / entry["depth"]).astype(np.float64),
                read_mask(root / entry["mask"]))

    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        loaded = list(pool.map(load_frame, entries))

    depth_maps = []
    for i, (_, depth, _) in enumerate(loaded):
        if depth.ndim == 3:
            depth = depth[:, :, 0]
        depth = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
        depth_maps.append(depth)

    sky = None
    if manifest.get("sky_panorama"):
        sky = read_image(root / manifest["sky_panorama"], gamma)
    side_views = tuple(
        SideView(read_image(root / v["image"], gamma), np.asarray(v["intrinsics"], dtype=np.float64),
                 _pose_from_entry(v, convention, f"side view {j}"))
        for j, v in enumerate(manifest.get("side_views", []))
    )

    scene = ScenePackage(
        frames=tuple(f for f, _, _ in loaded),
        intrinsics=K,
        poses=tuple(poses),
        depth_maps=tuple(depth_maps),
        seg_masks=tuple(m for _, _, m in loaded),
        frame_rate=frame_rate,
        n_target=n_target,
        n_reference=n_reference,
        classes={str(k): int(v) for k, v in manifest.get("classes", {}).items()},
        sky_panorama=sky,
        side_views=side_views,
        decode_gamma=gamma,
        source=str(manifest_path),
    )
    if min_frames is not None and scene.n_frames < min_frames:
        raise DimensionMismatch(f"Scene has {scene.n_frames} frames, at least {min_frames} required")
    logger.info(f"Loaded scene {manifest_path.name}: {scene.n_frames} frames "
                f"({n_target} target + {n_reference} reference) at {frame_rate:g} Hz, {scene.width}x{scene.height}")
    return scene


def camera_travel(scene: ScenePackage) -> float:
    """Total camera-center path length in meters."""
    centers = scene.camera_centers
    if len(centers) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(centers, axis=0), axis=1).sum())


def downsample_scene(scene: ScenePackage, target_rate: float) -> ScenePackage:
    """Keep every k-th frame so that frame_rate / k == target_rate.

    The target/reference split is carried over (at least one reference frame).
    """
    ratio = scene.frame_rate / float(target_rate)
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise InvalidRate(f"{scene.frame_rate:g} Hz is not an integer multiple of {target_rate:g} Hz")
    keep = list(range(0, scene.n_frames, stride))
    n_target = sum(1 for i in keep if i < scene.n_target)
    if len(keep) - n_target < 1:
        n_target -= 1
    if n_target < 1:
        raise InvalidRate(f"Downsampling to {target_rate:g} Hz leaves no target frames")
    return ScenePackage(
        frames=tuple(scene.frames[i] for i in keep),
        intrinsics=scene.intrinsics,
        poses=tuple(scene.poses[i] for i in keep),
        depth_maps=tuple(scene.depth_maps[i] for i in keep),
        seg_masks=tuple(scene.seg_masks[i] for i in keep),
        frame_rate=float(target_rate),
        n_target=n_target,
        n_reference=len(keep) - n_target,
        classes=dict(scene.classes),
        sky_panorama=scene.sky_panorama,
        side_views=scene.side_views,
        decode_gamma=scene.decode_gamma,
        source=scene.source,
    )


def _pose_entry(pose: CameraPose) -> Dict[str, Any]:
    inv = pose.inverse()
    return {"rotation": inv.R.tolist(), "translation": inv.t.tolist()}


def write_scene_package(out_dir: Path, scene: ScenePackage) -> Path:
    """Write a scene as manifest + assets (camera-to-world poses, PFM depth, PNG masks)."""
    out_dir = Path(out_dir)
    try:
        for sub in ("rgb", "depth", "mask"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create {out_dir}: {e}") from e
    gamma = scene.decode_gamma
    frames = []
    for i in range(scene.n_frames):
        names = {"image": f"rgb/{i:04d}.png", "depth": f"depth/{i:04d}.pfm", "mask": f"mask/{i:04d}.png"}
        write_image(out_dir / names["image"], scene.frames[i], gamma)
        write_float_raster(out_dir / names["depth"], scene.depth_maps[i])
        write_mask(out_dir / names["mask"], scene.seg_masks[i])
        frames.append({"index": i, **names, **_pose_entry(scene.poses[i])})
    manifest: Dict[str, Any] = {
        "frame_rate": scene.frame_rate,
        "n_target": scene.n_target,
        "n_reference": scene.n_reference,
        "pose_convention": "camera_to_world",
        "decode_gamma": gamma,
        "intrinsics": np.asarray(scene.intrinsics).tolist(),
        "classes": scene.classes,
        "frames": frames,
    }
    if scene.sky_panorama is not None:
        write_image(out_dir / "sky.png", scene.sky_panorama, gamma)
        manifest["sky_panorama"] = "sky.png"
    if scene.side_views:
        (out_dir / "side").mkdir(exist_ok=True)
        views = []
        for j, view in enumerate(scene.side_views):
            name = f"side/{j:02d}.png"
            write_image(out_dir / name, view.image, gamma)
            views.append({"image": name, "intrinsics": np.asarray(view.intrinsics).tolist(), **_pose_entry(view.pose)})
        manifest["side_views"] = views
    path = out_dir / "scene.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


# --- outputs ---------------------------------------------------------------------------------------

def config_hash(config: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON form."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_outputs(out_dir: Path, frames: Sequence["CompositeOutput"], run_record: Optional[Dict[str, Any]] = None,
                  gamma: float = DEFAULT_GAMMA) -> Path:
    """Write per-frame RGB, object mask and shadow mask PNGs plus the run manifest.

    The manifest records the config hash and every frame's placement pixel. No
    timestamps are written, so identical inputs give byte-identical trees.

    Raises:
        IoError: the directory or a file cannot be written.
    """
    out_dir = Path(out_dir)
    record = dict(run_record or {})
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame_entries = []
        for i, frame in enumerate(frames):
            index = int(getattr(frame, "frame_index", i))
            stem = f"frame_{index:04d}"
            names = {"rgb": f"{stem}_rgb.png", "object_mask": f"{stem}_object_mask.png",
                     "shadow_mask": f"{stem}_shadow_mask.png"}
            write_image(out_dir / names["rgb"], frame.rgb, gamma)
            write_png8(out_dir / names["object_mask"], encode_mask(frame.object_mask))
            write_png8(out_dir / names["shadow_mask"], encode_mask(frame.shadow_mask))
            for layer, data in sorted((getattr(frame, "debug_layers", None) or {}).items()):
                names[layer] = f"{stem}_{layer}.exr"
                write_float_raster(out_dir / names[layer], data)
            pixel = getattr(frame, "placement_pixel", None)
            frame_entries.append({
                "index": index,
                "files": names,
                "placement_pixel": None if pixel is None else [float(pixel[0]), float(pixel[1])],
            })
        record["frames"] = _jsonable(frame_entries) if "frames" not in record else _merge_frames(record["frames"], frame_entries)
        if "config_hash" not in record:
            record["config_hash"] = config_hash(record.get("config", {}))
        manifest_path = out_dir / MANIFEST_NAME
        manifest_path.write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True, allow_nan=False) + "\n",
                                 encoding="utf-8")
    except IoError:
        raise
    except OSError as e:
        raise IoError(f"Cannot write outputs to {out_dir}: {e}") from e
    logger.info(f"Wrote {len(frames)} composited frames and {MANIFEST_NAME} to {out_dir}")
    return manifest_path


def _merge_frames(existing: List[Dict[str, Any]], written: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    by_index = {int(e["index"]): dict(e) for e in existing}
    for entry in written:
        by_index.setdefault(entry["index"], {}).update(entry)
    return [_jsonable(by_index[k]) for k in sorted(by_index)]


def load_run_manifest(path: Path) -> Dict[str, Any]:
    path = _require(path, "run manifest")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
