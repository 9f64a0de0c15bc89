"""
Fréchet distance between feature distributions and per-frame statistics.

Features come from an external embedding network as float32 matrix files; this
module only does the Gaussian summary and the closed-form distance.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import cv2
import numpy as np
from scipy import linalg

from errors import DimensionMismatch, EmptyInput, NumericalFailure
from lighting import luminance
from scene_io import read_matrix_file

logger = logging.getLogger(__name__)

CLAMP_RELATIVE = 1e-10


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance (zero matrix for a single sample)."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if X.size else X.reshape(0, 1)
    if X.shape[0] == 0:
        raise EmptyInput("No feature vectors")
    mean = X.mean(axis=0)
    if X.shape[0] == 1:
        cov = np.zeros((X.shape[1], X.shape[1]))
    else:
        cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
        cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, cov, X.shape[0])


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; tiny negative eigenvalues clamp to 0."""
    w, V = linalg.eigh(0.5 * (M + M.T))
    top = float(w.max(initial=0.0))
    if top <= 0:
        if w.size and w.min() < -CLAMP_RELATIVE * max(abs(float(w.min())), 1.0):
            raise NumericalFailure(f"Matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
        return np.zeros_like(M)
    if w.min() < -CLAMP_RELATIVE * top:
        raise NumericalFailure(f"Eigenvalue {w.min():.3g} is below the clamp threshold {-CLAMP_RELATIVE * top:.3g}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def fid_score(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken as the trace of the symmetric
    sqrt(S_a) S_b sqrt(S_a), which has the same eigenvalues.

    Raises:
        DimensionMismatch: feature dimensions differ.
        NumericalFailure: an eigen-decomposition is too far from PSD.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"Feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.covariance)
    middle = root_a @ b.covariance @ root_a
    cross = _psd_sqrt(middle)
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross))
    if not np.isfinite(value):
        raise NumericalFailure("Fréchet distance is not finite")
    return max(value, 0.0)


def fid_from_files(a_path: Path, b_path: Path) -> Dict[str, float]:
    """JSON-ready report {fid, n_a, n_b, d} for two feature matrix files."""
    A = read_matrix_file(a_path)
    B = read_matrix_file(b_path)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"{a_path} has d={A.shape[1]}, {b_path} has d={B.shape[1]}")
    fid = fid_score(feature_stats(A), feature_stats(B))
    logger.info(f"FID {fid:.6f} between {len(A)} and {len(B)} samples (d={A.shape[1]})")
    return {"fid": fid, "n_a": int(len(A)), "n_b": int(len(B)), "d": int(A.shape[1])}


def frame_statistics(image: np.ndarray) -> Dict[str, float]:
    """Mean luminance, RMS contrast, Laplacian-variance sharpness and a MAD noise estimate."""
    lum = luminance(np.asarray(image, dtype=np.float64)).astype(np.float32)
    lap = cv2.Laplacian(lum, cv2.CV_32F, ksize=3)
    residual = lap.astype(np.float64)
    noise = float(np.median(np.abs(residual - np.median(residual))) * 1.4826 / np.sqrt(20.0))
    return {
        "mean_luminance": float(lum.mean()),
        "rms_contrast": float(lum.std()),
        "sharpness": float(residual.var()),
        "noise_sigma": noise,
    }
