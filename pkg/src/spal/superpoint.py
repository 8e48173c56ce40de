"""Affinity graphs and recursive normalized-cut super-point clustering.

Edge weights combine a spatial and a geometric-feature Gaussian:

    a_ij = exp(-|p_i - p_j|^2 / 2 s_s^2) + gamma * exp(-|g_i - g_j|^2 / 2 s_g^2)

over the symmetric closure of the coordinate kNN graph. Bandwidths default to
the median heuristic (s^2 = median squared distance over retained edges / 2).

Clustering splits the largest cluster two ways until K clusters exist. Each
split thresholds the Fiedler vector of the symmetric normalized Laplacian of
the induced subgraph at the candidate value minimizing the Ncut objective.
Disconnected subgraphs are separated into components before any eigenwork.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .geomfeat import GeometricFeatureSet, knn
from .pcio import Dataset, PointCloud

DENSE_LIMIT = 512  # dense eigensolver below, inverse iteration above
FULL_SWEEP_LIMIT = 2048  # all thresholds below, 64 quantiles above
FIEDLER_TOL = 1e-8
FIEDLER_MAX_ITER = 5000
INVERSE_SHIFT = 1e-3


@dataclass(frozen=True)
class AffinityParams:
    sigma_s: float
    sigma_g: float
    gamma: float
    k_graph: int
    color_gamma: float = 0.0
    sigma_c: float = 0.0


@dataclass(frozen=True)
class AffinityGraph:
    """Sparse symmetric affinity graph; edges stored once with i < j."""

    n: int
    edges: np.ndarray  # (E, 2) int64, i < j
    weights: np.ndarray  # (E,) float64, > 0
    params: AffinityParams

    def to_csr(self) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix(
            (
                np.concatenate([self.weights, self.weights]),
                (np.concatenate([i, j]), np.concatenate([j, i])),
            ),
            shape=(self.n, self.n),
        )
        return a.tocsr()


def _gauss(d2: np.ndarray, sigma_sq: float) -> np.ndarray:
    if sigma_sq <= 0:
        # degenerate bandwidth: zero distances keep weight 1, the rest vanish
        return (d2 == 0).astype(np.float64)
    return np.exp(-d2 / (2.0 * sigma_sq))


def build_affinity(
    cloud: PointCloud,
    feats: GeometricFeatureSet,
    k_graph: int = 10,
    gamma: float = 0.1,
    sigma_s: float | None = None,
    sigma_g: float | None = None,
    color_gamma: float = 0.0,
    sigma_c: float | None = None,
) -> AffinityGraph:
    """Affinity over the symmetric closure of the k_graph-NN coordinate graph."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    pts = cloud.points
    n = len(pts)
    if feats.n != n:
        raise ValueError("features not aligned with cloud")
    graph = knn(pts, k_graph)
    src = np.repeat(np.arange(n, dtype=np.int64), graph.k_eff)
    dst = graph.neighbors.reshape(-1)
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
    i, j = edges[:, 0], edges[:, 1]

    d2_s = ((pts[i] - pts[j]) ** 2).sum(axis=1)
    d2_g = ((feats.features[i] - feats.features[j]) ** 2).sum(axis=1)
    s_s2 = sigma_s**2 if sigma_s is not None else float(np.median(d2_s)) / 2.0
    s_g2 = sigma_g**2 if sigma_g is not None else float(np.median(d2_g)) / 2.0
    w = _gauss(d2_s, s_s2) + gamma * _gauss(d2_g, s_g2)
    # keep weights strictly positive even for pathological bandwidths
    w = np.maximum(w, np.finfo(np.float64).tiny)

    s_c2 = 0.0
    if color_gamma > 0:
        if cloud.colors is None:
            raise ValueError("color_gamma set but cloud has no colors")
        d2_c = ((cloud.colors[i] - cloud.colors[j]) ** 2).sum(axis=1)
        s_c2 = sigma_c**2 if sigma_c is not None else float(np.median(d2_c)) / 2.0
        w = w + color_gamma * _gauss(d2_c, s_c2)

    params = AffinityParams(
        sigma_s=float(np.sqrt(s_s2)),
        sigma_g=float(np.sqrt(s_g2)),
        gamma=gamma,
        k_graph=k_graph,
        color_gamma=color_gamma,
        sigma_c=float(np.sqrt(s_c2)),
    )
    return AffinityGraph(n=n, edges=edges, weights=w, params=params)


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class SuperPointPartition:
    """Disjoint cover of a sample's points into K non-empty clusters."""

    assignment: np.ndarray  # (N,) int64 in [0, K)
    K: int
    members: tuple[np.ndarray, ...]

    @classmethod
    def from_assignment(cls, assignment: np.ndarray) -> "SuperPointPartition":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.ndim != 1 or len(assignment) == 0:
            raise ValueError("assignment must be a non-empty 1-d array")
        if assignment.min() < 0:
            raise ValueError("negative cluster index")
        # canonicalize: relabel clusters by smallest member index
        first_seen, canonical = np.unique(assignment, return_inverse=True)
        k = len(first_seen)
        firsts = np.full(k, len(assignment), dtype=np.int64)
        np.minimum.at(firsts, canonical, np.arange(len(assignment)))
        rank = np.empty(k, dtype=np.int64)
        rank[np.argsort(firsts, kind="stable")] = np.arange(k)
        assignment = rank[canonical]
        order = np.argsort(assignment, kind="stable")
        bounds = np.searchsorted(assignment[order], np.arange(k + 1))
        members = tuple(order[bounds[c] : bounds[c + 1]] for c in range(k))
        return cls(assignment=assignment, K=k, members=members)

    @property
    def n(self) -> int:
        return len(self.assignment)


@dataclass(frozen=True)
class OracleLabelEntry:
    """Majority-vote annotation of one super-point."""

    majority_label: int
    noise_count: int
    size: int


def assign_majority_label(
    partition: SuperPointPartition, cloud: PointCloud, cluster: int
) -> OracleLabelEntry:
    """Majority label of a cluster; ties go to the smallest class index."""
    if not 0 <= cluster < partition.K:
        raise ValueError(f"cluster {cluster} out of range")
    labels = cloud.gt_labels[partition.members[cluster]]
    counts = np.bincount(labels)
    majority = int(np.argmax(counts))
    return OracleLabelEntry(
        majority_label=majority,
        noise_count=int(len(labels) - counts[majority]),
        size=int(len(labels)),
    )


def majority_labels(partition: SuperPointPartition, cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (majority_label, noise_count) arrays over all clusters."""
    c = int(cloud.gt_labels.max()) + 1
    counts = np.bincount(
        partition.assignment * c + cloud.gt_labels, minlength=partition.K * c
    ).reshape(partition.K, c)
    majority = counts.argmax(axis=1)
    noise = counts.sum(axis=1) - counts[np.arange(partition.K), majority]
    return majority.astype(np.int64), noise.astype(np.int64)


def noise_rate(dataset: Dataset, partitions: list[SuperPointPartition]) -> float:
    """Fraction of points whose broadcast majority label differs from ground truth."""
    if len(partitions) != len(dataset.samples):
        raise ValueError("partitions not aligned with dataset")
    total_noise = 0
    total_points = 0
    for cloud, part in zip(dataset.samples, partitions):
        if part.n != cloud.n:
            raise ValueError(f"partition for {cloud.id!r} has wrong point count")
        _, noise = majority_labels(part, cloud)
        total_noise += int(noise.sum())
        total_points += cloud.n
    return total_noise / total_points


# ---------------------------------------------------------------------------
# normalized cut


def _fiedler_dense(members, e_u, e_v, w, degrees):
    m = len(members)
    a = np.zeros((m, m))
    a[e_u, e_v] = w
    a[e_v, e_u] = w
    dinv = 1.0 / np.sqrt(degrees)
    lap = -(a * dinv[:, None] * dinv[None, :])
    np.fill_diagonal(lap, 1.0)
    _, vecs = scipy.linalg.eigh(lap, subset_by_index=(1, 1))
    return vecs[:, 0]


def _fiedler_inverse_iteration(m, e_u, e_v, w, degrees, rng):
    dinv = 1.0 / np.sqrt(degrees)
    wn = w * dinv[e_u] * dinv[e_v]
    a_norm = sp.coo_matrix(
        (np.concatenate([wn, wn]), (np.concatenate([e_u, e_v]), np.concatenate([e_v, e_u]))),
        shape=(m, m),
    ).tocsr()
    lap = sp.identity(m, format="csc") - a_norm.tocsc()
    solver = splu((lap + INVERSE_SHIFT * sp.identity(m, format="csc")).tocsc())
    v0 = np.sqrt(degrees)
    v0 /= np.linalg.norm(v0)
    x = rng.standard_normal(m)
    x -= (v0 @ x) * v0
    x /= np.linalg.norm(x)
    for _ in range(FIEDLER_MAX_ITER):
        x = solver.solve(x)
        x -= (v0 @ x) * v0
        x /= np.linalg.norm(x)
        lx = x - a_norm @ x
        theta = x @ lx
        if np.linalg.norm(lx - theta * x) < FIEDLER_TOL:
            break
    return x


def _sweep_threshold(order, e_u, e_v, w, degrees):
    """Minimum-Ncut prefix split of the vertices sorted by Fiedler value.

    Returns the size t of the left side (vertices order[:t])."""
    m = len(order)
    pos = np.empty(m, dtype=np.int64)
    pos[order] = np.arange(m)
    assoc_a = np.cumsum(degrees[order])
    total = assoc_a[-1]
    assoc_b = total - assoc_a
    pu, pv = pos[e_u], pos[e_v]
    lo = np.minimum(pu, pv)
    hi = np.maximum(pu, pv)
    delta = np.zeros(m)
    np.add.at(delta, lo, w)
    np.add.at(delta, hi, -w)
    cut = np.cumsum(delta)
    ts = np.arange(m - 1)
    if m > FULL_SWEEP_LIMIT:
        ts = np.unique(np.linspace(0, m - 2, 64).round().astype(np.int64))
    with np.errstate(divide="ignore", invalid="ignore"):
        ncut = cut[ts] / assoc_a[ts] + cut[ts] / assoc_b[ts]
    ncut = np.where(np.isfinite(ncut), ncut, np.inf)
    best = int(ts[int(np.argmin(ncut))])
    return best + 1


def _split_cluster(members, e_u, e_v, w, rng):
    """Two-way split of one cluster. Edge endpoints are local indices."""
    m = len(members)
    if m == 2:
        return members[:1], members[1:]
    degrees = np.bincount(
        np.concatenate([e_u, e_v]), weights=np.concatenate([w, w]), minlength=m
    )
    adj = sp.coo_matrix(
        (np.concatenate([w, w]), (np.concatenate([e_u, e_v]), np.concatenate([e_v, e_u]))),
        shape=(m, m),
    ).tocsr()
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        left_mask = labels == labels[0]
        return members[left_mask], members[~left_mask]
    if m <= DENSE_LIMIT:
        v = _fiedler_dense(members, e_u, e_v, w, degrees)
    else:
        v = _fiedler_inverse_iteration(m, e_u, e_v, w, degrees, rng)
    order = np.argsort(v, kind="stable")
    t = _sweep_threshold(order, e_u, e_v, w, degrees)
    left_mask = np.zeros(m, dtype=bool)
    left_mask[order[:t]] = True
    return members[left_mask], members[~left_mask]


class _Cluster:
    __slots__ = ("members", "e_u", "e_v", "w")

    def __init__(self, members, e_u, e_v, w):
        self.members = members  # sorted global indices
        self.e_u = e_u  # local endpoint indices into members
        self.e_v = e_v
        self.w = w

    def key(self):
        return (-len(self.members), int(self.members[0]))


def _snapshot(clusters, n):
    assignment = np.empty(n, dtype=np.int64)
    ordered = sorted(clusters, key=lambda c: int(c.members[0]))
    for cid, cluster in enumerate(ordered):
        assignment[cluster.members] = cid
    return SuperPointPartition.from_assignment(assignment)


def normalized_cut_schedule(
    graph: AffinityGraph, Ks: list[int], seed: int
) -> dict[int, SuperPointPartition]:
    """Partitions at several cluster counts from one recursive-bisection run.

    Recursive bisection is nested, so the partition at a smaller K is a state
    the run to the largest K passes through.
    """
    n = graph.n
    targets = sorted(set(int(k) for k in Ks))
    if targets[0] < 1:
        raise ValueError("K must be >= 1")
    if targets[-1] > n:
        raise ValueError(f"K={targets[-1]} exceeds point count {n}")
    rng = np.random.default_rng(seed)

    ncomp, comp_labels = connected_components(graph.to_csr(), directed=False)
    if ncomp > targets[0]:
        raise ValueError(f"graph has {ncomp} components, more than K={targets[0]}")

    edges, weights = graph.edges, graph.weights
    clusters = []
    for c in range(ncomp):
        members = np.flatnonzero(comp_labels == c)
        mask = np.zeros(n, dtype=bool)
        mask[members] = True
        keep = mask[edges[:, 0]] & mask[edges[:, 1]]
        e = edges[keep]
        e_u = np.searchsorted(members, e[:, 0])
        e_v = np.searchsorted(members, e[:, 1])
        clusters.append(_Cluster(members, e_u, e_v, weights[keep]))

    heap = [(c.key(), c) for c in clusters]
    heapq.heapify(heap)
    out: dict[int, SuperPointPartition] = {}
    pending = list(targets)
    while pending and pending[0] == len(heap):
        out[pending.pop(0)] = _snapshot([c for _, c in heap], n)
    while pending:
        _, cluster = heapq.heappop(heap)
        left, right = _split_cluster(
            cluster.members, cluster.e_u, cluster.e_v, cluster.w, rng
        )
        gu = cluster.members[cluster.e_u]
        gv = cluster.members[cluster.e_v]
        mask = np.zeros(n, dtype=bool)
        mask[left] = True
        on_left = mask[gu] & mask[gv]
        on_right = ~mask[gu] & ~mask[gv]
        for side, keep in ((np.sort(left), on_left), (np.sort(right), on_right)):
            su = np.searchsorted(side, gu[keep])
            sv = np.searchsorted(side, gv[keep])
            child = _Cluster(side, su, sv, cluster.w[keep])
            heapq.heappush(heap, (child.key(), child))
        while pending and pending[0] == len(heap):
            out[pending.pop(0)] = _snapshot([c for _, c in heap], n)
    return out


def normalized_cut(graph: AffinityGraph, K: int, seed: int) -> SuperPointPartition:
    """Recursive two-way normalized cut into exactly K clusters."""
    return normalized_cut_schedule(graph, [K], seed)[int(K)]


# ---------------------------------------------------------------------------
# partition files: one cluster index per line


def save_partition(path, partition: SuperPointPartition) -> None:
    Path(path).write_text("\n".join(str(int(c)) for c in partition.assignment) + "\n")


def load_partition(path) -> SuperPointPartition:
    lines = Path(path).read_text().split()
    return SuperPointPartition.from_assignment(np.asarray([int(x) for x in lines]))
