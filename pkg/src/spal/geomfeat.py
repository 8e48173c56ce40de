"""Exact kNN graphs, local covariance eigenvalues, and geometric features.

Per-point features are linearity, planarity and scatterness derived from the
descending eigenvalues (l1, l2, l3) of the neighbor-offset covariance
C = M^T M / n with offsets taken about the query point:

    f1 = (l1 - l2) / l1,  f2 = (l2 - l3) / l1,  f3 = l3 / l1

so f1 + f2 + f3 = 1 and all lie in [0, 1]. Neighborhoods with l1 below a tiny
threshold map to the pure-scatter value (0, 0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class NeighborGraph:
    """Exact k nearest neighbors per point, self excluded.

    Rows are sorted ascending by distance; equal distances are ordered by
    point index, and the k-th place is won by the lower index.
    """

    k: int
    neighbors: np.ndarray  # (N, k_eff) int64
    distances: np.ndarray  # (N, k_eff) float64

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k_eff(self) -> int:
        return self.neighbors.shape[1]


def _points_of(cloud) -> np.ndarray:
    pts = getattr(cloud, "points", cloud)
    return np.ascontiguousarray(np.asarray(pts, dtype=np.float64))


def _brute_row(pts: np.ndarray, i: int, k_eff: int) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((pts - pts[i]) ** 2).sum(axis=1)
    d2[i] = np.inf
    order = np.lexsort((np.arange(len(pts)), d2))[:k_eff]
    return order, np.sqrt(d2[order])


def knn(cloud, k: int) -> NeighborGraph:
    """Exact k nearest neighbors by Euclidean distance (kd-tree backed).

    Rows where the kd-tree answer could be tie-ambiguous are recomputed
    exactly, so results match a brute-force (distance, index) sort.
    """
    pts = _points_of(cloud)
    n = len(pts)
    if n < 2:
        raise ValueError("knn needs at least 2 points")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, n - 1)
    tree = cKDTree(pts)
    kq = min(n, k_eff + 2)
    dist, idx = tree.query(pts, k=kq)

    neighbors = idx[:, 1 : k_eff + 1].astype(np.int64)
    distances = dist[:, 1 : k_eff + 1].copy()

    # fast path is valid when self sits in column 0 and the non-self window is
    # strictly increasing (no ties inside the kept block or at its edge); the
    # window holds one candidate beyond k_eff whenever one exists
    self_first = idx[:, 0] == np.arange(n)
    ok = self_first & np.all(np.diff(dist[:, 1:], axis=1) > 0, axis=1)
    for i in np.flatnonzero(~ok):
        neighbors[i], distances[i] = _brute_row(pts, i, k_eff)
    return NeighborGraph(k=k, neighbors=neighbors, distances=distances)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigenvalues, closed form


def _sym3_eigvals(cov: np.ndarray) -> np.ndarray:
    """Descending eigenvalues of symmetric 3x3 matrices, shape (..., 3, 3).

    Trigonometric closed form; round-off negatives are clamped to zero.
    """
    a11, a22, a33 = cov[..., 0, 0], cov[..., 1, 1], cov[..., 2, 2]
    a12, a13, a23 = cov[..., 0, 1], cov[..., 0, 2], cov[..., 1, 2]
    q = (a11 + a22 + a33) / 3.0
    p1 = a12**2 + a13**2 + a23**2
    p2 = (a11 - q) ** 2 + (a22 - q) ** 2 + (a33 - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    safe_p = np.where(p > 0, p, 1.0)
    b11, b22, b33 = (a11 - q) / safe_p, (a22 - q) / safe_p, (a33 - q) / safe_p
    b12, b13, b23 = a12 / safe_p, a13 / safe_p, a23 / safe_p
    detb = (
        b11 * (b22 * b33 - b23**2)
        - b12 * (b12 * b33 - b23 * b13)
        + b13 * (b12 * b23 - b22 * b13)
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    eigs = np.stack([e1, e2, e3], axis=-1)
    eigs = np.where(p[..., None] > 0, eigs, np.stack([q, q, q], axis=-1))
    # already-diagonal matrices are exact: just sort the diagonal
    diag = np.stack([a11, a22, a33], axis=-1)
    eigs = np.where((p1 == 0)[..., None], diag, eigs)
    eigs = np.maximum(eigs, 0.0)
    # guard against round-off inversions
    eigs.sort(axis=-1)
    return eigs[..., ::-1]


def covariance_eigenvalues(cloud, graph: NeighborGraph, index: int) -> tuple[float, float, float]:
    """Eigenvalues of the neighbor-offset covariance at one point, descending."""
    pts = _points_of(cloud)
    if not 0 <= index < len(pts):
        raise ValueError(f"index {index} out of range")
    offsets = pts[graph.neighbors[index]] - pts[index]
    cov = offsets.T @ offsets / len(offsets)
    e = _sym3_eigvals(cov)
    return float(e[0]), float(e[1]), float(e[2])


def geometric_features(eigs, eps: float = DEGENERATE_EPS) -> tuple[float, float, float]:
    """Map descending eigenvalues to (linearity, planarity, scatterness)."""
    l1, l2, l3 = (float(v) for v in eigs)
    if not (l1 >= l2 >= l3):
        raise ValueError(f"eigenvalues must be sorted descending, got {(l1, l2, l3)}")
    if l3 < -eps:
        raise ValueError("negative eigenvalue")
    l3 = max(l3, 0.0)
    if l1 < eps:
        return 0.0, 0.0, 1.0
    return (l1 - l2) / l1, (l2 - l3) / l1, l3 / l1


def geometric_distance(g_i, g_j) -> float:
    """Euclidean distance between two geometric feature vectors."""
    return float(np.linalg.norm(np.asarray(g_i, float) - np.asarray(g_j, float)))


@dataclass(frozen=True)
class GeometricFeatureSet:
    """Per-point covariance eigenvalues and geometric features."""

    eigenvalues: np.ndarray  # (N, 3) descending
    features: np.ndarray  # (N, 3) in [0, 1], rows sum to 1

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _features_from_eigs(eigs: np.ndarray, eps: float = DEGENERATE_EPS) -> np.ndarray:
    l1 = eigs[..., 0]
    safe = np.where(l1 >= eps, l1, 1.0)
    f = np.stack(
        [
            (eigs[..., 0] - eigs[..., 1]) / safe,
            (eigs[..., 1] - eigs[..., 2]) / safe,
            eigs[..., 2] / safe,
        ],
        axis=-1,
    )
    degenerate = l1 < eps
    f[degenerate] = (0.0, 0.0, 1.0)
    return f


def compute_features(cloud, graph: NeighborGraph | None = None, k: int = 10) -> GeometricFeatureSet:
    """Vectorized eigenvalues + features for every point of a sample."""
    pts = _points_of(cloud)
    if graph is None:
        graph = knn(pts, k)
    offsets = pts[graph.neighbors] - pts[:, None, :]  # (N, k_eff, 3)
    cov = np.einsum("nki,nkj->nij", offsets, offsets) / graph.k_eff
    eigs = _sym3_eigvals(cov)
    return GeometricFeatureSet(eigenvalues=eigs, features=_features_from_eigs(eigs))


# ---------------------------------------------------------------------------
# feature cache files: raw little-endian float64, N x 6 (l1 l2 l3 f1 f2 f3)


def save_features(path, feats: GeometricFeatureSet) -> None:
    arr = np.hstack([feats.eigenvalues, feats.features]).astype("<f8")
    Path(path).write_bytes(arr.tobytes())


def load_features(path) -> GeometricFeatureSet:
    blob = Path(path).read_bytes()
    if len(blob) % 48 != 0:
        raise ValueError(f"{path}: not an N x 6 float64 feature cache")
    arr = np.frombuffer(blob, dtype="<f8").reshape(-1, 6)
    return GeometricFeatureSet(eigenvalues=arr[:, :3].copy(), features=arr[:, 3:].copy())
