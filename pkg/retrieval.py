"""
Bag-of-visual-words video retrieval.

Per-video descriptor matrices are clustered into a visual vocabulary with
seeded k-means (k-means++ initialization), each video is encoded as a word
frequency histogram, and queries are ranked by cosine similarity.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from sklearn.feature_extraction.text import TfidfTransformer

from errors import DimensionMismatch, InsufficientData, IoError, MissingAsset, ParseError
from scene_io import read_matrix_file

logger = logging.getLogger(__name__)

DESCRIPTOR_SUFFIX = ".bin"


@dataclass
class Vocabulary:
    centroids: np.ndarray
    iterations: int = 0
    inertia: float = 0.0
    inertia_history: List[float] = field(default_factory=list)
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class VideoHistogram:
    video_id: str
    counts: np.ndarray

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass
class RetrievalIndex:
    vocabulary: Vocabulary
    histograms: List[VideoHistogram]
    use_idf: bool = False
    idf: Optional[np.ndarray] = None

    @property
    def ids(self) -> List[str]:
        return [h.video_id for h in self.histograms]


def _assign(X: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row; np.argmin keeps the lowest index on ties."""
    d2 = cdist(X, centroids, metric="sqeuclidean")
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(X)), labels]


def build_vocabulary(descriptors: np.ndarray, k: int, seed: int = 0, max_iterations: int = 300) -> Vocabulary:
    """Seeded k-means with k-means++ initialization (Lloyd iterations).

    Iterates until assignments stop changing or ``max_iterations``. An empty
    cluster keeps its previous centroid.

    Raises:
        InsufficientData: fewer descriptors than words, or k < 1.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        X = X.reshape(len(X), -1)
    if k < 1 or len(X) < k:
        raise InsufficientData(f"Need at least k={k} descriptors, got {len(X)}")
    centroids, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    labels, dist = _assign(X, centroids)
    history = [float(dist.sum())]
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        updated = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                updated[j] = X[members].mean(axis=0)
        centroids = updated
        new_labels, dist = _assign(X, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    logger.info(f"Vocabulary of {k} words from {len(X)} descriptors: {iterations} iterations, "
                f"inertia {history[-1]:.6g}")
    return Vocabulary(centroids, iterations, history[-1], history, seed)


def encode_histogram(video_descriptors: np.ndarray, vocab: Vocabulary, video_id: str = "") -> VideoHistogram:
    X = np.asarray(video_descriptors, dtype=np.float64)
    if X.size == 0:
        return VideoHistogram(video_id, np.zeros(vocab.k))
    X = np.atleast_2d(X)
    if X.shape[1] != vocab.dim:
        raise DimensionMismatch(f"Descriptors have d={X.shape[1]}, vocabulary has d={vocab.dim}")
    labels, _ = _assign(X, vocab.centroids)
    return VideoHistogram(video_id, np.bincount(labels, minlength=vocab.k).astype(np.float64))


def compute_idf(histograms: Sequence[VideoHistogram]) -> np.ndarray:
    counts = np.array([h.counts for h in histograms])
    return TfidfTransformer(smooth_idf=True).fit(counts).idf_


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def query_videos(histograms: Sequence[VideoHistogram], query: VideoHistogram, top_n: Optional[int] = None,
                 idf: Optional[np.ndarray] = None) -> List[Tuple[str, float]]:
    """Rank videos by cosine similarity to ``query``; equal scores order by video id."""
    weight = np.ones_like(query.counts) if idf is None else idf
    q = query.counts * weight
    scored = []
    for h in histograms:
        if h.counts.shape != query.counts.shape:
            raise DimensionMismatch(f"Histogram {h.video_id} has {h.counts.size} bins, query has {query.counts.size}")
        scored.append((h.video_id, _cosine(h.counts * weight, q)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored if top_n is None else scored[:top_n]


def query_by_words(histograms: Sequence[VideoHistogram], word_ids: Iterable[int],
                   top_n: Optional[int] = None) -> List[Tuple[str, float]]:
    """Rank videos by the summed relative frequency of the given visual words."""
    words = sorted(set(int(w) for w in word_ids))
    scored = []
    for h in histograms:
        total = h.total
        score = float(h.counts[words].sum() / total) if total > 0 and words else 0.0
        scored.append((h.video_id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored if top_n is None else scored[:top_n]


def raw_patch_descriptors(image: np.ndarray, patch: int = 8, stride: int = 8) -> np.ndarray:
    """Zero-mean, unit-norm grayscale patches as descriptors (constant patches map to zeros)."""
    image = np.asarray(image, dtype=np.float32)
    gray = cv2.cvtColor(image[:, :, :3], cv2.COLOR_RGB2GRAY) if image.ndim == 3 else image
    h, w = gray.shape
    rows = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            rows.append(gray[y:y + patch, x:x + patch].ravel())
    if not rows:
        return np.zeros((0, patch * patch))
    P = np.array(rows, dtype=np.float64)
    P -= P.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    return np.divide(P, norms, out=np.zeros_like(P), where=norms > 1e-12)


def load_descriptor_dir(directory: Path) -> Dict[str, np.ndarray]:
    """All ``*.bin`` matrix files in ``directory``, keyed by file stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingAsset(directory, "descriptor directory")
    files = sorted(directory.glob(f"*{DESCRIPTOR_SUFFIX}"))
    if not files:
        raise InsufficientData(f"No {DESCRIPTOR_SUFFIX} descriptor files in {directory}")
    return {f.stem: read_matrix_file(f) for f in files}


def encode_corpus(videos: Mapping[str, np.ndarray], vocab: Vocabulary, jobs: Optional[int] = None) -> List[VideoHistogram]:
    ids = sorted(videos)
    with ThreadPoolExecutor(max_workers=jobs or os.cpu_count()) as pool:
        return list(pool.map(lambda vid: encode_histogram(videos[vid], vocab, vid), ids))


def build_index(videos: Mapping[str, np.ndarray], k: int, seed: int = 0, use_idf: bool = False,
                jobs: Optional[int] = None) -> RetrievalIndex:
    nonempty = [np.atleast_2d(videos[v]) for v in sorted(videos) if np.size(videos[v])]
    if not nonempty:
        raise InsufficientData("No descriptors to build a vocabulary from")
    vocab = build_vocabulary(np.concatenate(nonempty), k, seed)
    histograms = encode_corpus(videos, vocab, jobs)
    idf = compute_idf(histograms) if use_idf else None
    return RetrievalIndex(vocab, histograms, use_idf, idf)


def save_index(path: Path, index: RetrievalIndex) -> Path:
    """Single ``.npz`` file holding the vocabulary, histograms and ids."""
    path = Path(path)
    try:
        with open(path, "wb") as f:
            np.savez(
                f,
                centroids=index.vocabulary.centroids,
                inertia_history=np.asarray(index.vocabulary.inertia_history, dtype=np.float64),
                meta=np.array([index.vocabulary.iterations, index.vocabulary.seed, int(index.use_idf)], dtype=np.int64),
                ids=np.array(index.ids, dtype=str),
                counts=np.array([h.counts for h in index.histograms]).reshape(len(index.histograms), index.vocabulary.k),
                idf=np.zeros(0) if index.idf is None else index.idf,
            )
    except OSError as e:
        raise IoError(f"Cannot write index {path}: {e}") from e
    logger.info(f"Saved retrieval index with {len(index.histograms)} videos to {path}")
    return path


def load_index(path: Path) -> RetrievalIndex:
    path = Path(path)
    if not path.is_file():
        raise MissingAsset(path, "retrieval index")
    try:
        with np.load(path, allow_pickle=False) as data:
            history = data["inertia_history"].tolist()
            iterations, seed, use_idf = (int(v) for v in data["meta"])
            vocab = Vocabulary(data["centroids"], iterations, history[-1] if history else 0.0, history, seed)
            histograms = [VideoHistogram(str(vid), counts) for vid, counts in zip(data["ids"], data["counts"])]
            idf = data["idf"] if data["idf"].size else None
    except (KeyError, ValueError, OSError) as e:
        raise ParseError(f"{path} is not a retrieval index: {e}") from e
    return RetrievalIndex(vocab, histograms, bool(use_idf), idf)
