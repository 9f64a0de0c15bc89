"""
HDR environment estimation.

Builds the lighting used by the renderer from a scene's sky panorama and side
views: a sun probability map and its radiance (sun model with transmittance
tau and sharpness beta), an inverse-tone-mapped sky, an environment stitched
from calibrated side views, and their merge. Learned estimators plug in as
external commands exchanging EXR files.
"""

import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage

from errors import BadPluginOutput, DimensionMismatch, OutOfRangeInput
from geometry import CameraPose, direction_to_equirect, equirect_directions, equirect_pixel_direction
from scene_io import DEFAULT_GAMMA, HdrPanorama, ScenePackage, SideView, read_float_raster, write_float_raster
from style_transfer import run_plugin

logger = logging.getLogger(__name__)

REC709 = np.array([0.2126, 0.7152, 0.0722])
DEFAULT_SUN_EXPONENT = 8.0
PLUGIN_KINDS = ("inpaint", "sky_hdr", "ldr_to_hdr")

View = Union[SideView, Tuple[np.ndarray, CameraPose, np.ndarray]]


@dataclass(frozen=True)
class SunModelParams:
    tau: float = 1.0
    beta: float = 0.05

    def __post_init__(self):
        for name in ("tau", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive, got {value}")

    @property
    def peak(self) -> float:
        return self.tau / (self.beta * math.sqrt(math.pi))


@dataclass(frozen=True)
class SunProbabilityMap:
    """Per-pixel probability x in [0, 1] that the sun lies in that panorama pixel."""
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionMismatch(f"Sun probability map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise OutOfRangeInput("Sun probabilities must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass
class LightingEstimate:
    """Everything the renderer needs plus the intermediates kept for the run record."""
    environment: HdrPanorama
    sky: HdrPanorama
    sun_probability: SunProbabilityMap
    sun_direction: np.ndarray
    coverage: Optional[np.ndarray] = None
    sources: Dict[str, str] = field(default_factory=dict)

    def summary(self) -> Dict[str, object]:
        return {
            "sun_direction": [float(c) for c in self.sun_direction],
            "panorama_size": [self.environment.height, self.environment.width],
            "mean_radiance": float(self.environment.radiance.mean()),
            "coverage_fraction": None if self.coverage is None else float(self.coverage.mean()),
            "sources": dict(self.sources),
        }


# --- sun -----------------------------------------------------------------------------------

def sun_radiance_map(prob: SunProbabilityMap, params: SunModelParams) -> HdrPanorama:
    """delta(x, tau, beta) = tau / (beta sqrt(pi)) * exp(-(1 - x)^2 / beta), replicated to RGB."""
    x = prob.values
    radiance = params.tau / (params.beta * math.sqrt(math.pi)) * np.exp(-((1.0 - x) ** 2) / params.beta)
    return HdrPanorama(np.repeat(radiance[:, :, None], 3, axis=2))


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[:, :, :3] @ REC709


def detect_sun_fallback(ldr_pano: np.ndarray, exponent: float = DEFAULT_SUN_EXPONENT) -> SunProbabilityMap:
    """Max-normalized luminance raised to ``exponent``; all-zero input gives zeros."""
    lum = luminance(ldr_pano)
    peak = float(lum.max(initial=0.0))
    if peak <= 0:
        return SunProbabilityMap(np.zeros(lum.shape))
    return SunProbabilityMap(np.clip(lum / peak, 0.0, 1.0) ** exponent)


def sun_direction(prob: SunProbabilityMap) -> np.ndarray:
    """World direction toward the most probable sun pixel; the first in raster order wins ties."""
    height, width = prob.shape
    row, col = np.unravel_index(int(np.argmax(prob.values)), prob.shape)
    return equirect_pixel_direction(int(row), int(col), height, width)


# --- tone mapping ---------------------------------------------------------------------------

def inverse_tone_map_array(ldr: np.ndarray, gamma: float = DEFAULT_GAMMA, scale: float = 1.0) -> np.ndarray:
    ldr = np.asarray(ldr, dtype=np.float64)
    if not np.all(np.isfinite(ldr)) or ldr.min(initial=0.0) < 0 or ldr.max(initial=0.0) > 1:
        raise OutOfRangeInput(f"LDR values must lie in [0, 1], got [{ldr.min():.4g}, {ldr.max():.4g}]")
    return scale * ldr ** gamma


def inverse_tone_map(ldr: np.ndarray, gamma: float = DEFAULT_GAMMA, scale: float = 1.0) -> HdrPanorama:
    """Power-law LDR to linear radiance: ``scale * ldr ** gamma`` per channel.

    Raises:
        OutOfRangeInput: any value outside [0, 1].
    """
    return HdrPanorama(inverse_tone_map_array(ldr, gamma, scale))


def to_display(linear: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Linear [0, 1] image back to display-encoded values."""
    return np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)


# --- stitching --------------------------------------------------------------------------------

def _view_parts(view: View) -> Tuple[np.ndarray, CameraPose, np.ndarray]:
    if isinstance(view, SideView):
        return view.image, view.pose, view.intrinsics
    image, pose, K = view
    return image, pose, K


def _edge_normals(K: np.ndarray, width: int, height: int) -> np.ndarray:
    """Unit normals (camera frame) of the four planes through the camera center and the image borders."""
    K_inv = np.linalg.inv(K)
    corners = np.array([[0, 0, 1], [width - 1, 0, 1], [width - 1, height - 1, 1], [0, height - 1, 1]], dtype=np.float64)
    rays = corners @ K_inv.T
    normals = np.array([np.cross(rays[i], rays[(i + 1) % 4]) for i in range(4)])
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _sample_bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    return np.stack([ndimage.map_coordinates(image[:, :, c], [v, u], order=1, mode="nearest")
                     for c in range(image.shape[2])], axis=-1)


def stitch_panorama(views: Sequence[View], height: int) -> Tuple[HdrPanorama, np.ndarray]:
    """Project calibrated views onto an equirectangular panorama.

    A panorama direction takes a view's bilinear sample when it lands inside
    that view's image in front of the camera. Overlapping views are blended
    with weights proportional to the angular distance to each view's nearest
    image border, normalized to sum to 1.

    Returns:
        (panorama, coverage) where uncovered pixels are 0 and ``coverage`` is
        the boolean mask of pixels with at least one contributing view.
    """
    width = 2 * height
    dirs = equirect_directions(height, width).reshape(-1, 3)
    accum = np.zeros((len(dirs), 3))
    weights = np.zeros(len(dirs))
    for image, pose, K in (_view_parts(v) for v in views):
        K = np.asarray(K, dtype=np.float64)
        h, w = image.shape[:2]
        d_cam = dirs @ pose.R.T
        front = d_cam[:, 2] > 1e-9
        p = d_cam @ K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            u = p[:, 0] / p[:, 2]
            v = p[:, 1] / p[:, 2]
        inside = front & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        if not inside.any():
            continue
        edge = np.abs(d_cam[inside] @ _edge_normals(K, w, h).T).min(axis=1)
        weight = np.maximum(np.arcsin(np.clip(edge, 0.0, 1.0)), 1e-12)
        sample = _sample_bilinear(image, u[inside], v[inside])
        if sample.shape[1] == 1:
            sample = np.repeat(sample, 3, axis=1)
        accum[inside] += weight[:, None] * sample[:, :3]
        weights[inside] += weight
    coverage = weights > 0
    accum[coverage] /= weights[coverage, None]
    logger.info(f"Stitched {len(views)} views into a {width}x{height} panorama "
                f"({100.0 * coverage.mean():.1f}% coverage)")
    return HdrPanorama(np.clip(accum, 0.0, None).reshape(height, width, 3)), coverage.reshape(height, width)


def fill_uncovered(pano: HdrPanorama, coverage: np.ndarray) -> HdrPanorama:
    """Replace uncovered pixels with the mean covered radiance."""
    if coverage.all() or not coverage.any():
        return pano
    radiance = pano.radiance.copy()
    radiance[~coverage] = radiance[coverage].mean(axis=0)
    return HdrPanorama(radiance)


# --- blending ------------------------------------------------------------------------------------

def blend_hdr(sun: HdrPanorama, sky: HdrPanorama) -> HdrPanorama:
    """L = L_sky + L_sun, clamped to finite nonnegative values."""
    if sun.radiance.shape != sky.radiance.shape:
        raise DimensionMismatch(f"Sun {sun.radiance.shape} and sky {sky.radiance.shape} panoramas differ")
    total = np.nan_to_num(sky.radiance + sun.radiance, nan=0.0, posinf=np.finfo(np.float64).max)
    return HdrPanorama(np.clip(total, 0.0, None))


def merge_environment(sky: HdrPanorama, environment: HdrPanorama, coverage: np.ndarray) -> HdrPanorama:
    """Environment radiance where the stitched views cover the sphere, the sky elsewhere."""
    if sky.radiance.shape != environment.radiance.shape or coverage.shape != sky.radiance.shape[:2]:
        raise DimensionMismatch("Sky, environment and coverage must share one panorama grid")
    return HdrPanorama(np.where(coverage[:, :, None], environment.radiance, sky.radiance))


def resize_panorama(pano: np.ndarray, height: int) -> np.ndarray:
    pano = np.asarray(pano, dtype=np.float32)
    if pano.shape[0] == height and pano.shape[1] == 2 * height:
        return pano.astype(np.float64)
    return cv2.resize(pano, (2 * height, height), interpolation=cv2.INTER_AREA).astype(np.float64)


def sample_environment(pano: HdrPanorama, directions: np.ndarray) -> np.ndarray:
    """Bilinear radiance lookup for (n, 3) world directions, wrapping in azimuth."""
    directions = np.atleast_2d(directions)
    col, row = direction_to_equirect(directions, pano.height, pano.width)
    padded = np.concatenate([pano.radiance[:, -1:], pano.radiance, pano.radiance[:, :1]], axis=1)
    padded = np.concatenate([padded[:1], padded, padded[-1:]], axis=0)
    coords = [row + 1.0, col + 1.0]
    return np.stack([ndimage.map_coordinates(padded[:, :, c], coords, order=1, mode="nearest")
                     for c in range(3)], axis=-1)


# --- plugins -----------------------------------------------------------------------------------------

def run_light_plugin(kind: str, command: str, inputs: Dict[str, np.ndarray], workdir: Optional[Path] = None,
                     timeout: float = 300.0, height: Optional[int] = None) -> HdrPanorama:
    """Run an external lighting estimator over EXR files.

    The command receives a workdir holding ``<name>.exr`` per input and a
    ``meta.json`` with the plugin kind; it must write ``output.exr``.
    """
    if kind not in PLUGIN_KINDS:
        raise ValueError(f"Unknown lighting plugin kind '{kind}', expected one of {PLUGIN_KINDS}")
    workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix=f"light_{kind}_"))
    workdir.mkdir(parents=True, exist_ok=True)
    for name, data in sorted(inputs.items()):
        write_float_raster(workdir / f"{name}.exr", data)
    (workdir / "meta.json").write_text(json.dumps({"kind": kind, "inputs": sorted(inputs)}, indent=2), encoding="utf-8")
    run_plugin(command, workdir, timeout)
    output = workdir / "output.exr"
    if not output.is_file():
        raise BadPluginOutput(f"Lighting plugin '{kind}' wrote no output.exr in {workdir}")
    try:
        radiance = read_float_raster(output)
    except Exception as e:
        raise BadPluginOutput(f"Lighting plugin '{kind}' output unreadable: {e}") from e
    if height is not None:
        radiance = resize_panorama(radiance, height)
    try:
        return HdrPanorama(np.clip(np.nan_to_num(radiance), 0.0, None))
    except DimensionMismatch as e:
        raise BadPluginOutput(f"Lighting plugin '{kind}' output is not a 2:1 panorama: {e}") from e


# --- orchestration -----------------------------------------------------------------------------------

def panorama_from_frame(scene: ScenePackage, frame: int, height: int) -> Tuple[HdrPanorama, np.ndarray]:
    """Stand-in environment when the package has neither a sky panorama nor side views."""
    pano, coverage = stitch_panorama([(scene.frames[frame], scene.poses[frame], scene.intrinsics)], height)
    return fill_uncovered(pano, coverage), coverage


def estimate_lighting(scene: ScenePackage, params: SunModelParams = SunModelParams(), gamma: float = DEFAULT_GAMMA,
                      scale: float = 1.0, sun_exponent: float = DEFAULT_SUN_EXPONENT, panorama_height: int = 64,
                      plugins: Optional[Dict[str, Optional[str]]] = None, timeout: float = 300.0,
                      workdir: Optional[Path] = None) -> LightingEstimate:
    """Build the rendering environment for a scene.

    The sky panorama (or, when absent, the first reference frame) gives the LDR
    sky: the sun probability comes from it, the sky radiance is its inverse tone
    mapping, and the two are blended additively. Side views, when present, are
    stitched and merged over the sky wherever they cover the sphere.
    """
    plugins = {k: v for k, v in (plugins or {}).items() if v}
    sources: Dict[str, str] = {}
    root = Path(workdir) if workdir else None

    def plugin_dir(kind: str) -> Optional[Path]:
        return None if root is None else root / kind

    if scene.sky_panorama is not None:
        ldr = to_display(resize_panorama(scene.sky_panorama, panorama_height), gamma)
        sources["sky"] = "sky_panorama"
    else:
        pano, _ = panorama_from_frame(scene, scene.n_target, panorama_height)
        ldr = to_display(pano.radiance, gamma)
        sources["sky"] = "reference_frame"
    if "inpaint" in plugins:
        inpainted = run_light_plugin("inpaint", plugins["inpaint"], {"input": ldr}, plugin_dir("inpaint"), timeout,
                                     panorama_height)
        ldr = np.clip(inpainted.radiance, 0.0, 1.0)
        sources["sky"] += "+inpaint"

    prob = detect_sun_fallback(ldr, sun_exponent)
    sun_dir = sun_direction(prob)
    if "sky_hdr" in plugins:
        sky_hdr = run_light_plugin("sky_hdr", plugins["sky_hdr"], {"input": ldr}, plugin_dir("sky_hdr"), timeout,
                                   panorama_height)
        sources["sky_hdr"] = "plugin"
    else:
        sky_hdr = inverse_tone_map(ldr, gamma, scale)
        sources["sky_hdr"] = "inverse_tone_map"
    sky = blend_hdr(sun_radiance_map(prob, params), sky_hdr)

    environment, coverage = sky, None
    if scene.side_views:
        stitched, coverage = stitch_panorama(scene.side_views, panorama_height)
        if "ldr_to_hdr" in plugins:
            stitched = run_light_plugin("ldr_to_hdr", plugins["ldr_to_hdr"], {"input": stitched.radiance},
                                        plugin_dir("ldr_to_hdr"), timeout, panorama_height)
            sources["environment"] = "side_views+ldr_to_hdr"
        else:
            stitched = HdrPanorama(scale * stitched.radiance)
            sources["environment"] = "side_views"
        environment = merge_environment(sky, stitched, coverage)

    logger.info(f"Lighting ready: sun direction {np.round(sun_dir, 4).tolist()}, "
                f"peak sun radiance {params.peak:.3f}")
    return LightingEstimate(environment, sky, prob, sun_dir, coverage, sources)


def save_lighting(out_dir: Path, estimate: LightingEstimate) -> List[Path]:
    """Write the environment, sky, sun probability and coverage rasters plus a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        write_float_raster(out_dir / "environment.exr", estimate.environment.radiance),
        write_float_raster(out_dir / "sky.exr", estimate.sky.radiance),
        write_float_raster(out_dir / "sun_probability.exr", estimate.sun_probability.values),
    ]
    if estimate.coverage is not None:
        written.append(write_float_raster(out_dir / "coverage.exr", estimate.coverage.astype(np.float32)))
    summary = out_dir / "lighting.json"
    summary.write_text(json.dumps(estimate.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(summary)
    return written
