"""
Style refinement support.

The WGAN objective and the masked gradient penalty are implemented as plain
numerical functions, the inpainting input triple is assembled from a composite
and its object mask, and external refinement networks run as subprocesses over
a small file contract:

    <workdir>/bg.png       composite with the object region blacked out (8-bit RGB)
    <workdir>/mask.png     object mask, 255 on the object, 0 elsewhere
    <workdir>/fg.png       composite with everything but the object blacked out
    <workdir>/meta.json    {"gamma", "width", "height", "working_size", "mask_convention"}
    command writes <workdir>/refined.png (same size as the inputs) and exits 0

Mask convention: the pipeline's object masks mark the object with 1. The
gradient penalty weights the gradient with (1 - m) and applies to foreground
pixels, so inside the penalty math m = 0 marks the foreground;
``foreground_mask_to_penalty_mask`` converts at the boundary.
"""

import json
import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image

from errors import (BadPluginOutput, DimensionMismatch, EmptyBatch, NonFiniteGradient, PluginNotFound,
                    PluginTimeout, ShapeMismatch)
from scene_io import DEFAULT_GAMMA, decode_display, encode_display, write_png8

logger = logging.getLogger(__name__)

DEFAULT_WORKING_SIZE = (256, 256)
DEFAULT_PLUGIN_TIMEOUT = 300.0


@dataclass(frozen=True)
class InpaintTriple:
    background_blacked: np.ndarray
    fg_mask: np.ndarray
    foreground_blacked: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.background_blacked + self.foreground_blacked


@dataclass
class StyleBatch:
    critic_real: Sequence[float]
    critic_fake: Sequence[float]
    lam: float = 10.0
    interpolates: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.critic_real = np.asarray(self.critic_real, dtype=np.float64).ravel()
        self.critic_fake = np.asarray(self.critic_fake, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.critic_real)) and np.all(np.isfinite(self.critic_fake))):
            raise ValueError("Critic scores must be finite")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def assemble_inpaint_inputs(composite: np.ndarray, object_mask: np.ndarray, threshold: float = 0.5) -> InpaintTriple:
    """Split a composite into background-only and object-only images.

    ``object_mask`` marks the object with values above ``threshold``. The two
    blacked images sum back to the composite exactly.
    """
    composite = np.asarray(composite)
    mask = np.asarray(object_mask)
    if mask.shape != composite.shape[:2]:
        raise DimensionMismatch(f"Mask {mask.shape} does not match composite {composite.shape[:2]}")
    fg = mask > threshold
    select = fg[:, :, None] if composite.ndim == 3 else fg
    zero = np.zeros((), dtype=composite.dtype)
    return InpaintTriple(
        background_blacked=np.where(select, zero, composite),
        fg_mask=fg.astype(np.uint8),
        foreground_blacked=np.where(select, composite, zero),
    )


def foreground_mask_to_penalty_mask(object_mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Pipeline masks (1 = object) to penalty masks (0 = foreground)."""
    return (np.asarray(object_mask) <= threshold).astype(np.float64)


# --- WGAN objective -------------------------------------------------------------------------

def wgan_losses(batch: StyleBatch) -> Tuple[float, float, float]:
    """(critic objective, critic loss, generator loss).

    objective = E[D(x)] - E[D(x~)], loss_D = -objective, loss_G = -E[D(x~)].
    """
    if batch.critic_real.size == 0 or batch.critic_fake.size == 0:
        raise EmptyBatch("Critic score batches must be nonempty")
    objective = float(batch.critic_real.mean() - batch.critic_fake.mean())
    return objective, -objective, -float(batch.critic_fake.mean())


def interpolate_samples(x_real: np.ndarray, x_fake: np.ndarray, u: float) -> np.ndarray:
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise ShapeMismatch(f"Real {x_real.shape} and fake {x_fake.shape} samples differ")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"Interpolation weight must lie in [0, 1], got {u}")
    if u == 1.0:
        return x_real.copy()
    if u == 0.0:
        return x_fake.copy()
    return u * x_real + (1.0 - u) * x_fake


Critic = Callable[[np.ndarray], float]


def numeric_gradient(critic: Critic, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    probe = x.copy()
    flat_probe = probe.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_probe.size):
        original = flat_probe[i]
        flat_probe[i] = original + step
        plus = float(critic(probe))
        flat_probe[i] = original - step
        minus = float(critic(probe))
        flat_probe[i] = original
        flat_grad[i] = (plus - minus) / (2.0 * step)
    return grad


def critic_gradient(critic: Critic, x: np.ndarray) -> np.ndarray:
    gradient = getattr(critic, "gradient", None)
    if callable(gradient):
        return np.asarray(gradient(x), dtype=np.float64)
    return numeric_gradient(critic, x)


def gradient_penalty(critic: Critic, x_hat: np.ndarray, m: np.ndarray, lam: float = 10.0) -> float:
    """lam * (|| grad D(x_hat) * (1 - m) ||_2 - 1)^2.

    ``m`` uses the penalty convention (0 = foreground) and broadcasts over
    trailing channel axes. Critics exposing ``gradient(x)`` are differentiated
    analytically, others by central differences.

    Raises:
        NonFiniteGradient: the critic gradient has NaN or inf entries.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    grad = critic_gradient(critic, x_hat)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("Critic gradient is not finite")
    weight = 1.0 - np.asarray(m, dtype=np.float64)
    while weight.ndim < grad.ndim:
        weight = weight[..., None]
    norm = float(np.linalg.norm((grad * weight).ravel()))
    return float(lam * (norm - 1.0) ** 2)


class LinearCritic:
    """D(x) = <a, x>."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> float:
        return float(np.sum(self.weights * x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.weights, np.shape(x)).copy()


class QuadraticCritic:
    """D(x) = 0.5 x^T A x + b^T x over the flattened sample."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64).ravel()

    def __call__(self, x: np.ndarray) -> float:
        v = np.asarray(x, dtype=np.float64).ravel()
        return float(0.5 * v @ self.A @ v + self.b @ v)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(x, dtype=np.float64).ravel()
        return (0.5 * (self.A + self.A.T) @ v + self.b).reshape(np.shape(x))


class TwoLayerCritic:
    """Fixed two-layer scalar network, D(x) = w2 . tanh(W1 x + b1) + b2, with seeded weights."""

    def __init__(self, input_size: int, hidden: int = 16, seed: int = 0, scale: float = 0.5):
        rng = np.random.default_rng(seed)
        self.W1 = rng.normal(0.0, scale / np.sqrt(input_size), size=(hidden, input_size))
        self.b1 = rng.normal(0.0, 0.1, size=hidden)
        self.w2 = rng.normal(0.0, scale / np.sqrt(hidden), size=hidden)
        self.b2 = float(rng.normal(0.0, 0.1))

    def __call__(self, x: np.ndarray) -> float:
        h = np.tanh(self.W1 @ np.asarray(x, dtype=np.float64).ravel() + self.b1)
        return float(self.w2 @ h + self.b2)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(self.W1 @ np.asarray(x, dtype=np.float64).ravel() + self.b1)
        return (self.W1.T @ (self.w2 * (1.0 - h * h))).reshape(np.shape(x))


# --- external refinement ------------------------------------------------------------------------

def run_plugin(command: str, workdir: Path, timeout: float = DEFAULT_PLUGIN_TIMEOUT) -> subprocess.CompletedProcess:
    """Run ``command`` with the workdir as its argument.

    A ``{workdir}`` placeholder in the command is substituted; otherwise the
    workdir is appended as the last argument.

    Raises:
        PluginNotFound: the executable cannot be resolved.
        PluginTimeout: the command ran longer than ``timeout`` seconds.
        BadPluginOutput: nonzero exit status.
    """
    workdir = Path(workdir)
    if "{workdir}" in command:
        argv = [part.replace("{workdir}", str(workdir)) for part in shlex.split(command)]
    else:
        argv = shlex.split(command) + [str(workdir)]
    if not argv:
        raise PluginNotFound("Empty plugin command")
    executable = argv[0]
    resolved = shutil.which(executable) or (executable if Path(executable).is_file() else None)
    if resolved is None:
        raise PluginNotFound(f"Plugin executable not found: {executable}")
    argv[0] = resolved
    logger.info(f"Running plugin: {' '.join(shlex.quote(a) for a in argv)}")
    try:
        result = subprocess.run(argv, cwd=str(workdir), capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired as e:
        raise PluginTimeout(f"Plugin {executable} exceeded {timeout:.0f}s") from e
    except OSError as e:
        raise PluginNotFound(f"Cannot execute plugin {executable}: {e}") from e
    if result.returncode != 0:
        tail = (result.stderr or "").strip().splitlines()[-5:]
        raise BadPluginOutput(f"Plugin {executable} exited with {result.returncode}: {' | '.join(tail)}")
    return result


def resize_for_plugin(image: np.ndarray, size: Optional[Tuple[int, int]],
                      interpolation: int = cv2.INTER_AREA) -> np.ndarray:
    """Resize to (width, height) for an external network; ``None`` keeps the image."""
    if size is None:
        return image
    width, height = int(size[0]), int(size[1])
    if image.shape[1] == width and image.shape[0] == height:
        return image
    return cv2.resize(image, (width, height), interpolation=interpolation)


def refine_frame_external(plugin_cmd: Optional[str], triple: InpaintTriple, workdir: Union[str, Path],
                          timeout: float = DEFAULT_PLUGIN_TIMEOUT, gamma: float = DEFAULT_GAMMA,
                          working_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Refine a composite with an external network.

    Returns the refined linear image. With no command configured the composite
    is returned unchanged and nothing is spawned.

    Raises:
        PluginNotFound, PluginTimeout, BadPluginOutput.
    """
    composite = triple.reconstruct()
    if not plugin_cmd:
        return composite
    height, width = composite.shape[:2]
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    refined_path = workdir / "refined.png"
    if refined_path.exists():
        refined_path.unlink()

    bg = resize_for_plugin(encode_display(triple.background_blacked, gamma), working_size)
    fg = resize_for_plugin(encode_display(triple.foreground_blacked, gamma), working_size)
    mask = resize_for_plugin((triple.fg_mask > 0).astype(np.uint8) * 255, working_size, cv2.INTER_NEAREST)
    write_png8(workdir / "bg.png", bg)
    write_png8(workdir / "mask.png", mask)
    write_png8(workdir / "fg.png", fg)
    meta = {"gamma": gamma, "width": width, "height": height,
            "working_size": None if working_size is None else list(working_size),
            "mask_convention": "255 = inserted object"}
    (workdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    run_plugin(plugin_cmd, workdir, timeout)

    if not refined_path.is_file():
        raise BadPluginOutput(f"Plugin wrote no refined.png in {workdir}")
    try:
        with Image.open(refined_path) as image:
            refined = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise BadPluginOutput(f"Cannot decode {refined_path}: {e}") from e
    expected = bg.shape[:2]
    if refined.shape[:2] != expected:
        raise BadPluginOutput(f"refined.png is {refined.shape[1]}x{refined.shape[0]}, "
                              f"expected {expected[1]}x{expected[0]}")
    if working_size is not None:
        refined = resize_for_plugin(refined, (width, height), cv2.INTER_LINEAR)
    return decode_display(refined, gamma)
