#!/usr/bin/env python3
"""
Tests for the Fréchet feature distance and frame statistics.
"""

import json

import numpy as np
import pytest

from errors import DimensionMismatch, EmptyInput, NumericalFailure
from metrics import FeatureStats, feature_stats, fid_from_files, fid_score, frame_statistics
from scene_io import write_matrix_file


def test_identical_sets_have_zero_distance():
    features = np.random.default_rng(0).normal(size=(200, 6))
    stats = feature_stats(features)
    assert fid_score(stats, stats) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("mu,s", [(0.0, 2.0), (1.5, 1.0), (-2.0, 0.5)])
def test_one_dimensional_closed_form(mu, s):
    a = FeatureStats(np.array([0.0]), np.array([[1.0]]))
    b = FeatureStats(np.array([mu]), np.array([[s * s]]))
    assert fid_score(a, b) == pytest.approx(mu * mu + 1.0 + s * s - 2.0 * s)


def test_diagonal_covariances():
    a = FeatureStats(np.zeros(3), np.diag([1.0, 4.0, 9.0]))
    b = FeatureStats(np.ones(3), np.diag([4.0, 1.0, 9.0]))
    # sum (sqrt(a_i) - sqrt(b_i))^2 plus the mean term
    assert fid_score(a, b) == pytest.approx(3.0 + 1.0 + 1.0 + 0.0)
    assert fid_score(a, b) == pytest.approx(fid_score(b, a))


def _gaussian_features(rng, n=400, d=16, shift=0.0):
    mixing = rng.normal(size=(d, d)) / np.sqrt(d)
    return rng.normal(size=(n, d)) @ mixing + shift + rng.normal(size=d)


def test_fid_is_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a = feature_stats(_gaussian_features(rng))
        b = feature_stats(_gaussian_features(rng, shift=0.5))
        assert fid_score(a, b) > 0.1
        assert abs(fid_score(a, b) - fid_score(b, a)) <= 1e-9


def test_fid_is_rotation_invariant():
    rng = np.random.default_rng(6)
    for _ in range(10):
        A = _gaussian_features(rng)
        B = _gaussian_features(rng, shift=1.0)
        Q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        offset = rng.normal(size=16)
        base = fid_score(feature_stats(A), feature_stats(B))
        rotated = fid_score(feature_stats(A @ Q.T + offset), feature_stats(B @ Q.T + offset))
        assert abs(rotated - base) <= 1e-6


def test_feature_stats():
    stats = feature_stats(np.array([[1.0, 2.0], [3.0, 6.0]]))
    assert np.allclose(stats.mean, [2.0, 4.0])
    assert np.allclose(stats.covariance, [[2.0, 4.0], [4.0, 8.0]])
    assert stats.count == 2
    single = feature_stats(np.array([[1.0, 2.0]]))
    assert not single.covariance.any()
    with pytest.raises(EmptyInput):
        feature_stats(np.zeros((0, 3)))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        fid_score(FeatureStats(np.zeros(2), np.eye(2)), FeatureStats(np.zeros(3), np.eye(3)))


def test_non_psd_covariance_fails():
    bad = FeatureStats(np.zeros(2), np.diag([-1.0, 1.0]))
    with pytest.raises(NumericalFailure):
        fid_score(bad, FeatureStats(np.zeros(2), np.eye(2)))


def test_fid_from_files(tmp_path):
    rng = np.random.default_rng(1)
    a = write_matrix_file(tmp_path / "a.bin", rng.normal(size=(300, 4)))
    b = write_matrix_file(tmp_path / "b.bin", rng.normal(loc=1.0, size=(250, 4)))
    report = fid_from_files(a, b)
    assert (report["n_a"], report["n_b"], report["d"]) == (300, 250, 4)
    # mean shift of 1 in four dimensions dominates
    assert report["fid"] == pytest.approx(4.0, abs=0.8)
    json.dumps(report)

    c = write_matrix_file(tmp_path / "c.bin", rng.normal(size=(10, 3)))
    with pytest.raises(DimensionMismatch):
        fid_from_files(a, c)


def test_frame_statistics():
    flat = frame_statistics(np.full((16, 16, 3), 0.5))
    assert flat["mean_luminance"] == pytest.approx(0.5, abs=1e-6)
    assert flat["rms_contrast"] == pytest.approx(0.0, abs=1e-6)
    assert flat["sharpness"] == pytest.approx(0.0, abs=1e-9)

    noisy = frame_statistics(np.random.default_rng(2).random((32, 32, 3)))
    assert noisy["sharpness"] > 0 and noisy["noise_sigma"] > 0
