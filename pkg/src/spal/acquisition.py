"""Click-budget accounting and the acquisition scores driving active selection.

Candidates are scored with three terms: feature diversity D (minimum distance
to the labeled set in feature space), uncertainty E (mean posterior entropy)
and shape diversity S (shared by every unit of a shape). The combined score is

    score = (1 - beta) * D + beta * E + delta * S

after per-round min-max normalization of each term over the candidate pool
(normalization can be switched off to reproduce the raw combination).

Units are identified by (sample_id, index): the index is a point index, a
super-point cluster index, or -1 for whole-shape units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelOutput
from .pcio import PointCloud
from .superpoint import SuperPointPartition, assign_majority_label

GRANULARITIES = ("point", "superpoint", "shape")

UnitId = tuple[str, int]
SHAPE_INDEX = -1


def click_cost(unit: UnitId, granularity: str, shape_costs: dict[str, int] | None = None) -> int:
    """Clicks charged for annotating one unit: 1 except for whole shapes."""
    if granularity in ("point", "superpoint"):
        return 1
    if granularity == "shape":
        if shape_costs is None or unit[0] not in shape_costs:
            raise ValueError(f"no shape cost configured for {unit[0]!r}")
        return int(shape_costs[unit[0]])
    raise ValueError(f"unknown granularity {granularity!r}")


class LabelPool:
    """Ledger of labeled/unlabeled units, their click costs and the budget.

    Mutation happens only through label_unit, which enforces spent <= budget
    and rejects double labeling.
    """

    def __init__(self, granularity: str, budget: int, units: dict[UnitId, int]):
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        if not units:
            raise ValueError("empty unit universe")
        self.granularity = granularity
        self.budget = int(budget)
        self.spent = 0
        self._costs = dict(units)
        self._labels: dict[UnitId, object] = {}
        self._noise: dict[UnitId, int] = {}
        self._sizes: dict[UnitId, int] = {}

    @property
    def n_units(self) -> int:
        return len(self._costs)

    def cost(self, unit: UnitId) -> int:
        return self._costs[unit]

    def remaining(self) -> int:
        return self.budget - self.spent

    def is_labeled(self, unit: UnitId) -> bool:
        return unit in self._labels

    def labeled_ids(self) -> list[UnitId]:
        return sorted(self._labels)

    def unlabeled_ids(self) -> list[UnitId]:
        return sorted(u for u in self._costs if u not in self._labels)

    def recorded_label(self, unit: UnitId):
        return self._labels[unit]

    def touched_samples(self) -> set[str]:
        return {u[0] for u in self._labels}

    def raise_budget(self, budget: int) -> None:
        if budget < self.spent:
            raise ValueError(f"budget {budget} below spent {self.spent}")
        self.budget = int(budget)

    def label_unit(self, unit: UnitId, recorded, noise: int = 0, size: int = 1) -> None:
        if unit not in self._costs:
            raise KeyError(f"unknown unit {unit!r}")
        if unit in self._labels:
            raise ValueError(f"unit {unit!r} already labeled")
        cost = self._costs[unit]
        if self.spent + cost > self.budget:
            raise ValueError(
                f"labeling {unit!r} would overdraw the budget "
                f"({self.spent} + {cost} > {self.budget})"
            )
        self._labels[unit] = recorded
        self._noise[unit] = int(noise)
        self._sizes[unit] = int(size)
        self.spent += cost

    def labeled_noise_rate(self) -> float:
        """Noise fraction among currently labeled points (broadcast labels)."""
        total = sum(self._sizes.values())
        if total == 0:
            return 0.0
        return sum(self._noise.values()) / total

    def point_labels(
        self,
        cloud: PointCloud,
        partition: SuperPointPartition | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast recorded labels of one sample to point level."""
        idx_list: list[np.ndarray] = []
        lab_list: list[np.ndarray] = []
        for unit, rec in self._labels.items():
            if unit[0] != cloud.id:
                continue
            if self.granularity == "point":
                idx_list.append(np.asarray([unit[1]], dtype=np.int64))
                lab_list.append(np.asarray([rec], dtype=np.int64))
            elif self.granularity == "superpoint":
                if partition is None:
                    raise ValueError("superpoint pool needs the sample's partition")
                members = partition.members[unit[1]]
                idx_list.append(members)
                lab_list.append(np.full(len(members), int(rec), dtype=np.int64))
            else:
                idx_list.append(np.arange(cloud.n, dtype=np.int64))
                lab_list.append(np.asarray(rec, dtype=np.int64))
        if not idx_list:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        idx = np.concatenate(idx_list)
        lab = np.concatenate(lab_list)
        order = np.argsort(idx, kind="stable")
        return idx[order], lab[order]


def build_units(
    samples: list[PointCloud],
    granularity: str,
    partitions: dict[str, SuperPointPartition] | None = None,
    shape_costs: dict[str, int] | None = None,
) -> dict[UnitId, int]:
    """Enumerate the unit universe with click costs for one granularity."""
    units: dict[UnitId, int] = {}
    for cloud in samples:
        if granularity == "point":
            for i in range(cloud.n):
                units[(cloud.id, i)] = 1
        elif granularity == "superpoint":
            if partitions is None or cloud.id not in partitions:
                raise ValueError(f"missing partition for sample {cloud.id!r}")
            for c in range(partitions[cloud.id].K):
                units[(cloud.id, c)] = 1
        elif granularity == "shape":
            cost = shape_costs.get(cloud.id, cloud.n) if shape_costs else cloud.n
            units[(cloud.id, SHAPE_INDEX)] = int(cost)
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
    return units


# ---------------------------------------------------------------------------
# score primitives


def pooled_feature(features: np.ndarray, members, mode: str = "mean") -> np.ndarray:
    """Componentwise mean or max over the member rows."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("empty member set")
    rows = features[members]
    if mode == "mean":
        return rows.mean(axis=0)
    if mode == "max":
        return rows.max(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def diversity_score(candidate_feature: np.ndarray, labeled_features: np.ndarray) -> float:
    """Minimum L2 distance to the labeled set; +inf when nothing is labeled."""
    labeled_features = np.atleast_2d(np.asarray(labeled_features, dtype=np.float64))
    if labeled_features.size == 0:
        return float("inf")
    d = np.linalg.norm(labeled_features - np.asarray(candidate_feature, float), axis=1)
    return float(d.min())


def entropy(posterior: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(posterior, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def _entropy_rows(posteriors: np.ndarray) -> np.ndarray:
    p = np.maximum(posteriors, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=1)


def uncertainty_score(posteriors: np.ndarray, members) -> float:
    """Mean per-point entropy over the member rows."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("empty member set")
    return float(_entropy_rows(posteriors[members]).mean())


def shape_diversity_score(shape_feature: np.ndarray, labeled_shape_features: np.ndarray) -> float:
    """Minimum L2 distance of a pooled shape feature to the labeled shapes'."""
    return diversity_score(shape_feature, labeled_shape_features)


def al_score(d: float, e: float, s: float, beta: float, delta: float) -> float:
    """Affine combination of already-normalized D/E/S components."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return (1.0 - beta) * d + beta * e + delta * s


def _minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant or undefined terms become 0."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if not finite.any():
        return np.zeros_like(v)
    lo, hi = v[finite].min(), v[finite].max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    out = (v - lo) / (hi - lo)
    return np.where(finite, out, 0.0)


def combine_scores(
    d: np.ndarray,
    e: np.ndarray,
    s: np.ndarray,
    beta: float,
    delta: float,
    normalize: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vector D/E/S combination over the candidate pool.

    Returns the (possibly normalized) components and the combined score. A
    term that is +inf everywhere (empty labeled set) contributes zero, so the
    ranking falls back to the remaining terms."""
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if normalize:
        dn, en, sn = _minmax(d), _minmax(e), _minmax(s)
    else:
        dn = np.where(np.isfinite(d), d, 0.0)
        en = e
        sn = np.where(np.isfinite(s), s, 0.0)
    combined = (1.0 - beta) * dn + beta * en + delta * sn
    return dn, en, sn, combined


@dataclass(frozen=True)
class AcquisitionScore:
    """D/E/S components (as combined) and the final score of one unit."""

    unit: UnitId
    d: float
    e: float
    s: float
    combined: float


def _min_dist_to_set(cands: np.ndarray, labeled: np.ndarray, block: int = 256) -> np.ndarray:
    """Row-wise min distance from cands to the labeled set, blockwise exact."""
    if labeled.size == 0:
        return np.full(len(cands), np.inf)
    out = np.empty(len(cands))
    for start in range(0, len(cands), block):
        chunk = cands[start : start + block]
        d2 = ((chunk[:, None, :] - labeled[None, :, :]) ** 2).sum(axis=2)
        out[start : start + block] = np.sqrt(d2.min(axis=1))
    return out


def score_candidates(
    pool: LabelPool,
    outputs: dict[str, ModelOutput],
    partitions: dict[str, SuperPointPartition] | None,
    beta: float,
    delta: float,
    normalize: bool = True,
    sp_pool: str = "mean",
    shape_pool: str = "max",
) -> list[AcquisitionScore]:
    """Score every unlabeled unit from frozen model outputs.

    Shape features are pooled with shape_pool over all points of the sample;
    the labeled-shape set is frozen for the whole batch."""
    candidates = pool.unlabeled_ids()
    if not candidates:
        raise ValueError("no unlabeled units to score")
    sample_ids = sorted(outputs)
    feats = {sid: outputs[sid].features for sid in sample_ids}
    posts = {sid: outputs[sid].posteriors for sid in sample_ids}

    # shape-level diversity, shared by every unit of a shape
    shape_feat = {sid: feats[sid].max(axis=0) if shape_pool == "max" else feats[sid].mean(axis=0) for sid in sample_ids}
    touched = pool.touched_samples()
    labeled_shape = np.asarray([shape_feat[sid] for sid in sample_ids if sid in touched])
    s_by_sample = {
        sid: shape_diversity_score(shape_feat[sid], labeled_shape) for sid in sample_ids
    }

    if pool.granularity == "superpoint":
        unit_feat = []
        unit_e = []
        for sid, c in candidates:
            members = partitions[sid].members[c]
            unit_feat.append(pooled_feature(feats[sid], members, sp_pool))
            unit_e.append(uncertainty_score(posts[sid], members))
        labeled_feat = np.asarray(
            [
                pooled_feature(feats[sid], partitions[sid].members[c], sp_pool)
                for sid, c in pool.labeled_ids()
            ]
        )
        d_arr = _min_dist_to_set(np.asarray(unit_feat), labeled_feat)
        e_arr = np.asarray(unit_e)
    elif pool.granularity == "point":
        labeled_feat = np.asarray([feats[sid][i] for sid, i in pool.labeled_ids()])
        unit_feat = np.asarray([feats[sid][i] for sid, i in candidates])
        d_arr = _min_dist_to_set(unit_feat, labeled_feat)
        e_arr = np.asarray([_entropy_rows(posts[sid][i : i + 1])[0] for sid, i in candidates])
    else:  # shape granularity: averaged per-point diversity and uncertainty
        labeled_rows = [feats[sid] for sid in sorted(touched)]
        labeled_feat = np.vstack(labeled_rows) if labeled_rows else np.empty((0, 1))
        d_arr = np.empty(len(candidates))
        e_arr = np.empty(len(candidates))
        for row, (sid, _) in enumerate(candidates):
            d_arr[row] = float(_min_dist_to_set(feats[sid], labeled_feat).mean())
            e_arr[row] = float(_entropy_rows(posts[sid]).mean())

    s_arr = np.asarray([s_by_sample[sid] for sid, _ in candidates])
    dn, en, sn, combined = combine_scores(d_arr, e_arr, s_arr, beta, delta, normalize)
    return [
        AcquisitionScore(unit=u, d=float(dn[i]), e=float(en[i]), s=float(sn[i]), combined=float(combined[i]))
        for i, u in enumerate(candidates)
    ]


def candidate_unit_features(
    pool: LabelPool,
    outputs: dict[str, ModelOutput],
    partitions: dict[str, SuperPointPartition] | None,
    sp_pool: str = "mean",
) -> tuple[list[UnitId], np.ndarray, np.ndarray]:
    """Per-unit features of unlabeled units plus the labeled feature matrix.

    Supports point and superpoint granularity (whole-shape units have no
    single feature under the averaged-diversity definition)."""
    candidates = pool.unlabeled_ids()
    if pool.granularity == "point":
        unit_feat = np.asarray([outputs[sid].features[i] for sid, i in candidates])
        labeled = np.asarray([outputs[sid].features[i] for sid, i in pool.labeled_ids()])
    elif pool.granularity == "superpoint":
        unit_feat = np.asarray(
            [
                pooled_feature(outputs[sid].features, partitions[sid].members[c], sp_pool)
                for sid, c in candidates
            ]
        )
        labeled = np.asarray(
            [
                pooled_feature(outputs[sid].features, partitions[sid].members[c], sp_pool)
                for sid, c in pool.labeled_ids()
            ]
        )
    else:
        raise ValueError("greedy recompute needs point or superpoint granularity")
    return candidates, unit_feat, labeled


def greedy_recompute_order(
    scores: list[AcquisitionScore],
    unit_features: dict[UnitId, np.ndarray],
    labeled_features: np.ndarray,
    n_query: int,
    beta: float,
    delta: float,
    normalize: bool = True,
) -> list[UnitId]:
    """Classic core-set behavior: re-evaluate D after each pick.

    Distances to the labeled set are updated incrementally with each picked
    unit's feature; E and S stay frozen."""
    units = [sc.unit for sc in scores]
    feats = np.asarray([unit_features[u] for u in units])
    d = _min_dist_to_set(feats, np.asarray(labeled_features))
    e = np.asarray([sc.e for sc in scores])
    s = np.asarray([sc.s for sc in scores])
    picked: list[UnitId] = []
    alive = np.ones(len(units), dtype=bool)
    for _ in range(min(n_query, len(units))):
        _, _, _, combined = combine_scores(d, e, s, beta, delta, normalize=normalize)
        combined = np.where(alive, combined, -np.inf)
        best = min(
            (i for i in range(len(units)) if alive[i]),
            key=lambda i: (-combined[i], units[i]),
        )
        picked.append(units[best])
        alive[best] = False
        d = np.minimum(d, np.linalg.norm(feats - feats[best], axis=1))
    return picked


def select_query(
    scores: list[AcquisitionScore], n_query: int, pool: LabelPool
) -> list[UnitId]:
    """Top-scoring unlabeled units, budget-truncated; ties break by unit id.

    Pure selection: labeling (and click charging) happens via oracle_label."""
    if n_query < 1:
        raise ValueError("n_query must be >= 1")
    candidates = [sc for sc in scores if not pool.is_labeled(sc.unit)]
    if not candidates:
        raise ValueError("empty unlabeled pool")
    ranked = sorted(candidates, key=lambda sc: (-sc.combined, sc.unit))
    picked: list[UnitId] = []
    planned = 0
    for sc in ranked:
        if len(picked) == n_query:
            break
        cost = pool.cost(sc.unit)
        if pool.spent + planned + cost > pool.budget:
            break
        picked.append(sc.unit)
        planned += cost
    return picked


def oracle_label(
    pool: LabelPool,
    cloud: PointCloud,
    unit: UnitId,
    partition: SuperPointPartition | None = None,
) -> None:
    """Simulated annotator: record ground-truth-derived labels, charge clicks."""
    if unit[0] != cloud.id:
        raise ValueError(f"unit {unit!r} does not belong to sample {cloud.id!r}")
    if pool.granularity == "point":
        pool.label_unit(unit, int(cloud.gt_labels[unit[1]]), size=1)
    elif pool.granularity == "superpoint":
        if partition is None:
            raise ValueError("superpoint labeling needs the sample's partition")
        entry = assign_majority_label(partition, cloud, unit[1])
        pool.label_unit(unit, entry.majority_label, noise=entry.noise_count, size=entry.size)
    else:
        pool.label_unit(unit, cloud.gt_labels.copy(), size=cloud.n)


# ---------------------------------------------------------------------------
# pool files


def save_pool(path, pool: LabelPool) -> None:
    lines = [
        "spal-pool 1",
        f"granularity {pool.granularity}",
        f"budget {pool.budget}",
        f"spent {pool.spent}",
    ]
    for unit in pool.labeled_ids():
        sid, idx = unit
        if any(ch.isspace() for ch in sid):
            raise ValueError(f"sample id {sid!r} contains whitespace")
        rec = pool.recorded_label(unit)
        if pool.granularity == "shape":
            payload = " ".join(str(int(x)) for x in rec)
        else:
            payload = str(int(rec))
        noise = pool._noise.get(unit, 0)
        size = pool._sizes.get(unit, 1)
        lines.append(f"unit {sid} {idx} {noise} {size} {payload}")
    Path(path).write_text("\n".join(lines) + "\n")


def pool_granularity(path) -> str:
    """Read just the granularity header of a pool file."""
    for line in Path(path).read_text().splitlines():
        if line.startswith("granularity "):
            return line.split()[1]
    raise ValueError(f"{path}: missing granularity header")


def load_pool(path, units: dict[UnitId, int]) -> LabelPool:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("spal-pool"):
        raise ValueError(f"{path}: not a pool file")
    version = lines[0].split()[1]
    if version != "1":
        raise ValueError(f"{path}: unsupported pool version {version}")
    header = {}
    body = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, rest = ln.split(maxsplit=1)
        if key == "unit":
            body.append(rest)
        else:
            header[key] = rest
    pool = LabelPool(header["granularity"], int(header["budget"]), units)
    for rest in body:
        tok = rest.split()
        sid, idx, noise, size = tok[0], int(tok[1]), int(tok[2]), int(tok[3])
        if pool.granularity == "shape":
            rec = np.asarray([int(x) for x in tok[4:]], dtype=np.int64)
        else:
            rec = int(tok[4])
        pool.label_unit((sid, idx), rec, noise=noise, size=size)
    if pool.spent != int(header["spent"]):
        raise ValueError(f"{path}: spent mismatch ({pool.spent} != {header['spent']})")
    return pool
