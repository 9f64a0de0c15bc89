#!/usr/bin/env python3
"""
Tests for the visual vocabulary, histograms and video queries.
"""

import numpy as np
import pytest

from errors import DimensionMismatch, InsufficientData, MissingAsset
from retrieval import (VideoHistogram, build_index, build_vocabulary, compute_idf, encode_histogram,
                       load_descriptor_dir, load_index, query_by_words, query_videos, raw_patch_descriptors,
                       save_index)
from scene_io import write_matrix_file

CENTERS = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])


def _blobs(seed: int = 0, per_cluster: int = 40) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.concatenate([c + rng.normal(scale=0.3, size=(per_cluster, 2)) for c in CENTERS])


def _corpus(seed: int = 0):
    rng = np.random.default_rng(seed)
    # each video dominated by one cluster
    return {f"video_{i}": np.concatenate([CENTERS[i % 3] + rng.normal(scale=0.3, size=(30, 2)),
                                          CENTERS[(i + 1) % 3] + rng.normal(scale=0.3, size=(5, 2))])
            for i in range(6)}


def test_vocabulary_finds_separated_clusters():
    vocab = build_vocabulary(_blobs(), k=3, seed=0)
    found = sorted(map(tuple, np.round(vocab.centroids)))
    assert found == sorted(map(tuple, CENTERS))
    assert vocab.iterations >= 1
    # Lloyd iterations never increase the inertia
    assert all(b <= a + 1e-9 for a, b in zip(vocab.inertia_history, vocab.inertia_history[1:]))


def test_vocabulary_is_seeded():
    data = np.random.default_rng(3).normal(size=(200, 4))
    first = build_vocabulary(data, k=5, seed=11)
    second = build_vocabulary(data, k=5, seed=11)
    assert np.array_equal(first.centroids, second.centroids)


def test_vocabulary_needs_enough_descriptors():
    with pytest.raises(InsufficientData):
        build_vocabulary(np.zeros((2, 3)), k=3)
    with pytest.raises(InsufficientData):
        build_vocabulary(np.zeros((5, 3)), k=0)


def test_histogram_counts_every_descriptor():
    vocab = build_vocabulary(_blobs(), k=3, seed=0)
    hist = encode_histogram(_blobs(seed=1, per_cluster=7), vocab, "v")
    assert hist.total == 21
    assert sorted(hist.counts.tolist()) == [7.0, 7.0, 7.0]
    assert encode_histogram(np.zeros((0, 2)), vocab).total == 0
    with pytest.raises(DimensionMismatch):
        encode_histogram(np.zeros((4, 3)), vocab)


def test_query_returns_itself_first():
    index = build_index(_corpus(), k=3, seed=0)
    query = next(h for h in index.histograms if h.video_id == "video_4")
    ranked = query_videos(index.histograms, query, top_n=3)
    assert ranked[0] == ("video_4", pytest.approx(1.0))
    # same dominant cluster ranks next
    assert ranked[1][0] == "video_1"
    assert len(ranked) == 3


def test_query_ties_order_by_id():
    histograms = [VideoHistogram("b", np.array([1.0, 0.0])), VideoHistogram("a", np.array([2.0, 0.0])),
                  VideoHistogram("c", np.array([0.0, 1.0]))]
    ranked = query_videos(histograms, VideoHistogram("q", np.array([3.0, 0.0])))
    assert [vid for vid, _ in ranked] == ["a", "b", "c"]
    assert ranked[2][1] == 0.0
    # an empty query scores everything zero
    assert all(score == 0.0 for _, score in query_videos(histograms, VideoHistogram("q", np.zeros(2))))


def test_query_by_words():
    histograms = [VideoHistogram("x", np.array([1.0, 3.0, 0.0])), VideoHistogram("y", np.array([4.0, 0.0, 4.0])),
                  VideoHistogram("z", np.zeros(3))]
    ranked = query_by_words(histograms, [1, 2])
    assert ranked == [("x", 0.75), ("y", 0.5), ("z", 0.0)]


def test_idf_weights_rare_words():
    histograms = [VideoHistogram("a", np.array([1.0, 1.0])), VideoHistogram("b", np.array([1.0, 0.0]))]
    idf = compute_idf(histograms)
    # smoothed: ln((1 + n) / (1 + df)) + 1
    assert idf[0] == pytest.approx(1.0)
    assert idf[1] == pytest.approx(np.log(3.0 / 2.0) + 1.0)


def test_index_file_reloads(tmp_path):
    index = build_index(_corpus(), k=3, seed=0, use_idf=True)
    loaded = load_index(save_index(tmp_path / "index.npz", index))
    assert loaded.ids == index.ids
    assert loaded.use_idf
    assert np.allclose(loaded.idf, index.idf)
    assert np.array_equal(loaded.vocabulary.centroids, index.vocabulary.centroids)
    for a, b in zip(loaded.histograms, index.histograms):
        assert np.array_equal(a.counts, b.counts)
    with pytest.raises(MissingAsset):
        load_index(tmp_path / "missing.npz")


def test_descriptor_directory(tmp_path):
    for vid, desc in _corpus().items():
        write_matrix_file(tmp_path / f"{vid}.bin", desc)
    videos = load_descriptor_dir(tmp_path)
    assert sorted(videos) == [f"video_{i}" for i in range(6)]
    assert videos["video_0"].shape == (35, 2)
    (tmp_path / "empty").mkdir()
    with pytest.raises(InsufficientData):
        load_descriptor_dir(tmp_path / "empty")
    with pytest.raises(MissingAsset):
        load_descriptor_dir(tmp_path / "nowhere")


def test_raw_patch_descriptors_are_normalized():
    rng = np.random.default_rng(0)
    image = rng.random((32, 24, 3))
    desc = raw_patch_descriptors(image, patch=8, stride=8)
    assert desc.shape == (12, 64)
    assert np.allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-6)
    assert not raw_patch_descriptors(np.full((8, 8), 0.5)).any()
