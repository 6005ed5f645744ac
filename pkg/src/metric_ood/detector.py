"""Embedding-space classification and OOD scoring.

The OOD score of an embedding is minus its Euclidean distance to the nearest
class centroid, so higher means more in-distribution and 0 is the maximum.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .losses import softmax


@dataclass(frozen=True)
class ClassCentroids:
    class_ids: tuple  # ascending, so argmin ties resolve to the lowest id
    centers: np.ndarray

    def __post_init__(self):
        if len(self.class_ids) != len(self.centers):
            raise ConfigurationError("one center per class required")
        if not np.all(np.isfinite(self.centers)):
            raise ConfigurationError("centroids must be finite")

    @property
    def dim(self):
        return self.centers.shape[1]


def compute_centroids(embeddings, labels, class_ids=None):
    """Mean embedding of every class; ``class_ids`` defaults to the labels present."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    class_ids = sorted(int(c) for c in class_ids)
    missing = [c for c in class_ids if not np.any(labels == c)]
    if missing:
        raise ConfigurationError(f"classes without training samples: {missing}")
    centers = np.stack([emb[labels == c].mean(axis=0) for c in class_ids])
    return ClassCentroids(tuple(class_ids), centers)


def _distances(embeddings, centroids):
    if len(centroids.class_ids) == 0:
        raise UsageError("empty centroid set")
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[1] != centroids.dim:
        raise UsageError(f"embedding dim {emb.shape[1]} != centroid dim {centroids.dim}")
    diff = emb[:, None, :] - centroids.centers[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def ood_scores(embeddings, centroids):
    return -_distances(embeddings, centroids).min(axis=1)


def ood_score(embedding, centroids):
    return float(ood_scores(embedding, centroids)[0])


def classify_batch(embeddings, centroids):
    idx = _distances(embeddings, centroids).argmin(axis=1)
    return np.asarray(centroids.class_ids)[idx]


def classify(embedding, centroids):
    return int(classify_batch(embedding, centroids)[0])


def max_softmax_scores(logits):
    return softmax(np.atleast_2d(logits)).max(axis=1)


def max_softmax_score(logits):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size < 2:
        raise UsageError("need at least two logits")
    return float(max_softmax_scores(logits)[0])


# -- PCA ------------------------------------------------------------------------------


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors in columns. Stops once the off-diagonal Frobenius norm drops
    below ``tol`` times the matrix norm.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise UsageError("matrix must be square")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    # negligible against the matrix; rotating would overflow theta
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="mergesort")
    return w[order], v[:, order]


@dataclass
class PCAResult:
    projected: np.ndarray  # (N, k)
    explained_variance_ratio: np.ndarray  # (k,)
    components: np.ndarray  # (k, d), zero rows where degenerate
    mean: np.ndarray
    degenerate: np.ndarray  # (k,) bool


def pca_project(embeddings, k=3, rank_tol=1e-12):
    """Project onto the top-``k`` principal axes of the sample covariance.

    Each axis is signed so its largest-magnitude coordinate is positive.
    Axes beyond the covariance rank are returned as zeros and flagged in
    ``degenerate``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if not (n > k and d >= k and k >= 1):
        raise UsageError(f"need N > k and d >= k, got N={n}, d={d}, k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    w, v = jacobi_eigh(cov)
    w, v = w[:k], v[:, :k].copy()
    total = float(np.trace(cov))
    degenerate = w <= rank_tol * max(w.max(initial=0.0), 0.0) if total > 0 else np.ones(k, dtype=bool)
    degenerate = degenerate | (w <= 0)
    for j in range(k):
        col = v[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            v[:, j] = -col
    v[:, degenerate] = 0.0
    ratio = np.where(degenerate, 0.0, w / total if total > 0 else 0.0)
    proj = xc @ v
    return PCAResult(proj, ratio, v.T, mean, degenerate)


def write_pca_csv(path, projected, labels, origins):
    k = projected.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"component_{i + 1}" for i in range(k)] + ["label", "origin"])
        for row, lab, org in zip(projected, labels, origins):
            w.writerow([repr(float(c)) for c in row] + [int(lab), org])
