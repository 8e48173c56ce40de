"""Pluggable segmentation model contract and the built-in per-point MLP.

The contract consumed by acquisition is ``forward(model, cloud) -> ModelOutput``
with softmax posteriors and penultimate features. The built-in model is a
plain numpy MLP over handcrafted per-point inputs (coordinates, geometric
features, their neighborhood mean/max pools, optional color), trained by Adam
on cross entropy over labeled points plus a nuclear-norm consistency term that
pushes per-super-point posterior matrices toward rank one:

    l_nc(f_S) = sum of singular values of f_S / N_S
    l_total  = l_ce + lambda_nc * mean over super-points of l_nc
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .geomfeat import GeometricFeatureSet, NeighborGraph, compute_features, knn
from .pcio import PointCloud
from .superpoint import SuperPointPartition

CHECKPOINT_MAGIC = b"SPMC"
POSTERIOR_FLOOR = 1e-12
SINGULAR_EPS = 1e-8


@dataclass(frozen=True)
class ModelOutput:
    posteriors: np.ndarray  # (N, C), rows on the simplex
    features: np.ndarray  # (N, d) penultimate activations


class SegmentationModel(Protocol):
    """Anything with posteriors and features per point plugs into selection."""

    num_classes: int

    def forward(self, cloud: PointCloud) -> ModelOutput: ...


@dataclass(frozen=True)
class MlpSpec:
    """Built-in per-point MLP: input recipe, hidden widths, class count."""

    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    use_color: bool = False
    knn_k: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden) or not self.hidden:
            raise ValueError("hidden widths must be >= 1")

    @property
    def input_dim(self) -> int:
        # xyz + g + mean_k(g) + max_k(g), optionally rgb
        return 12 + (3 if self.use_color else 0)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]


def point_inputs(
    cloud: PointCloud,
    feats: GeometricFeatureSet | None = None,
    graph: NeighborGraph | None = None,
    use_color: bool = False,
    k: int = 10,
) -> np.ndarray:
    """Handcrafted per-point input rows for the built-in MLP."""
    if graph is None:
        graph = knn(cloud.points, k)
    if feats is None:
        feats = compute_features(cloud, graph)
    g = feats.features
    neigh_g = g[graph.neighbors]  # (N, k_eff, 3)
    cols = [cloud.points, g, neigh_g.mean(axis=1), neigh_g.max(axis=1)]
    if use_color:
        if cloud.colors is None:
            raise ValueError("model expects colors but cloud has none")
        cols.append(cloud.colors)
    return np.hstack(cols)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class MlpModel:
    """Per-point MLP with ReLU hiddens; final layer zero-initialized so an
    untrained model emits uniform posteriors."""

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @classmethod
    def init(cls, spec: MlpSpec, seed: int = 0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        dims = [spec.input_dim, *spec.hidden, spec.num_classes]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            if i == len(dims) - 2:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward_inputs(self, inputs: np.ndarray) -> ModelOutput:
        if inputs.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"input dim {inputs.shape[1]} != model dim {self.spec.input_dim}"
            )
        h = inputs
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        logits = h @ self.weights[-1] + self.biases[-1]
        return ModelOutput(posteriors=_softmax(logits), features=h)

    def forward(self, cloud: PointCloud) -> ModelOutput:
        return self.forward_inputs(
            point_inputs(cloud, use_color=self.spec.use_color, k=self.spec.knn_k)
        )


def forward(model: SegmentationModel, cloud: PointCloud) -> ModelOutput:
    return model.forward(cloud)


# ---------------------------------------------------------------------------
# nuclear-norm consistency loss


# singular values of a rank-deficient matrix are unresolvable below
# ~sqrt(machine eps) * sigma_max once the Gram matrix is formed; square roots
# of the round-off eigenvalues land there, so the Gram routes floor them out
GRAM_SIGMA_FLOOR = 1e-7


def nuclear_loss(f: np.ndarray) -> float:
    """Mean-normalized nuclear norm via eigenvalues of the C x C Gram matrix."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    gram = f.T @ f
    eig = np.linalg.eigvalsh(gram)
    sigma = np.sqrt(np.maximum(eig, 0.0))
    sigma = sigma[sigma >= GRAM_SIGMA_FLOOR * max(1.0, float(sigma.max(initial=0.0)))]
    return float(sigma.sum() / f.shape[0])


def nuclear_loss_gradient(f: np.ndarray) -> np.ndarray:
    """Subgradient U V^T / N from the thin SVD, dropping singular values < 1e-8."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    u, s, vt = np.linalg.svd(f, full_matrices=False)
    keep = s >= SINGULAR_EPS * max(1.0, float(s.max(initial=0.0)))
    return (u[:, keep] @ vt[keep]) / f.shape[0]


def _nuclear_batch(
    posteriors: np.ndarray,
    partition: SuperPointPartition,
    cluster_mask: np.ndarray | None = None,
):
    """Nuclear loss mean and gradient over super-points, vectorized.

    cluster_mask restricts the average to the marked clusters (all by
    default). Returns (mean loss, d(mean loss)/d posteriors)."""
    f = posteriors
    k = partition.K
    order = np.argsort(partition.assignment, kind="stable")
    sizes = np.bincount(partition.assignment, minlength=k).astype(np.float64)
    starts = np.zeros(k, dtype=np.int64)
    starts[1:] = np.cumsum(sizes[:-1]).astype(np.int64)
    outer = f[order][:, :, None] * f[order][:, None, :]
    grams = np.add.reduceat(outer, starts, axis=0)  # (K, C, C)
    eig, vec = np.linalg.eigh(grams)
    sigma = np.sqrt(np.maximum(eig, 0.0))
    cutoff = GRAM_SIGMA_FLOOR * np.maximum(1.0, sigma.max(axis=1, keepdims=True))
    sigma = np.where(sigma >= cutoff, sigma, 0.0)
    include = np.ones(k, dtype=bool) if cluster_mask is None else cluster_mask
    n_inc = int(include.sum())
    if n_inc == 0:
        return 0.0, np.zeros_like(f)
    loss = float((sigma.sum(axis=1) / sizes)[include].mean())
    inv = np.where(sigma > 0.0, 1.0 / np.maximum(sigma, SINGULAR_EPS), 0.0)
    # M_k = V diag(inv) V^T; grad rows of cluster k are f_row @ M_k / (size_k * n_inc)
    m = np.einsum("kij,kj,klj->kil", vec, inv, vec)
    scale = (include / (sizes * n_inc))[partition.assignment]
    grad = np.einsum("nc,ncd->nd", f, m[partition.assignment]) * scale[:, None]
    return loss, grad


def total_loss(
    output: ModelOutput,
    labeled_idx: np.ndarray,
    labels: np.ndarray,
    partition: SuperPointPartition,
    lambda_nc: float,
) -> float:
    """Mean cross entropy over labeled points + lambda_nc * mean nuclear loss."""
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise ValueError("labeled subset is empty")
    f = output.posteriors
    ce = float(
        -np.log(np.maximum(f[labeled_idx, np.asarray(labels, dtype=np.int64)], POSTERIOR_FLOOR)).mean()
    )
    if lambda_nc == 0:
        return ce
    nc = float(np.mean([nuclear_loss(f[m]) for m in partition.members]))
    return ce + lambda_nc * nc


# ---------------------------------------------------------------------------
# augmentation


def deviation_matrix(rng: np.random.Generator, g_std: float) -> np.ndarray:
    """T = I + G with Gaussian G, resampled until det(T) > 0.1."""
    t = np.eye(3) + rng.normal(0.0, g_std, size=(3, 3))
    while np.linalg.det(t) <= 0.1:
        t = np.eye(3) + rng.normal(0.0, g_std, size=(3, 3))
    return t


_AXES = {"x": 0, "y": 1, "z": 2}


def mirror_matrix(axis) -> np.ndarray:
    m = np.eye(3)
    m[_AXES.get(axis, axis), _AXES.get(axis, axis)] = -1.0
    return m


def augment(
    cloud: PointCloud,
    g_std: float,
    mirror_axis=None,
    seed: int = 0,
) -> PointCloud:
    """Linear deviation-matrix augmentation plus optional coin-flip mirroring."""
    if g_std < 0:
        raise ValueError("g_std must be >= 0")
    rng = np.random.default_rng(seed)
    pts = cloud.points @ deviation_matrix(rng, g_std)
    if mirror_axis is not None and rng.random() < 0.5:
        pts = pts @ mirror_matrix(mirror_axis)
    return replace(cloud, points=pts)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    batch_size: int = 1
    lambda_nc: float = 1.0
    augment: bool = False
    seed: int = 0
    g_std: float = 0.05
    mirror_axis: str | None = "x"
    nuclear_on_labeled: bool = True  # include labeled super-points in the consistency term

    def __post_init__(self):
        if self.lambda_nc < 0:
            raise ValueError("lambda_nc must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + eps)


def _backward(model: MlpModel, inputs: np.ndarray, dlogits: np.ndarray):
    """Gradients of sum(dlogits * logits) through the MLP."""
    acts = [inputs]
    h = inputs
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = dlogits
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w[layer] = acts[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * (acts[layer] > 0)
    return grads_w, grads_b


@dataclass
class _SampleBatch:
    inputs: np.ndarray
    labeled_idx: np.ndarray
    labels: np.ndarray
    partition: SuperPointPartition | None
    cluster_mask: np.ndarray | None


def _sample_grads(model: MlpModel, batch: _SampleBatch, lambda_nc: float):
    out = model.forward_inputs(batch.inputs)
    f = out.posteriors
    dlogits = np.zeros_like(f)
    loss = 0.0
    if batch.labeled_idx.size:
        idx, lab = batch.labeled_idx, batch.labels
        floored = np.maximum(f[idx, lab], POSTERIOR_FLOOR)
        loss += float(-np.log(floored).mean())
        dce = f[idx].copy()
        dce[np.arange(len(idx)), lab] -= 1.0
        dlogits[idx] += dce / len(idx)
    if lambda_nc > 0 and batch.partition is not None:
        nc, dnc = _nuclear_batch(f, batch.partition, batch.cluster_mask)
        loss += lambda_nc * nc
        spread = lambda_nc * dnc
        # backprop dL/df through the row softmax
        dlogits += f * (spread - (spread * f).sum(axis=1, keepdims=True))
    return loss, _backward(model, batch.inputs, dlogits)


def train(
    model: MlpModel,
    samples: list[PointCloud],
    labeled: dict[str, tuple[np.ndarray, np.ndarray]],
    partitions: dict[str, SuperPointPartition] | None,
    config: TrainConfig,
    inputs: dict[str, np.ndarray] | None = None,
) -> MlpModel:
    """Mini-batch Adam on cross entropy + nuclear consistency.

    labeled maps sample id -> (point indices, broadcast labels). Samples
    without labeled points are skipped; batches are whole samples. Precomputed
    per-sample input rows may be passed (ignored when augmenting, which must
    re-featurize the deformed cloud). Returns a trained copy, deterministic
    for a fixed config seed.
    """
    used = [s for s in samples if labeled.get(s.id, (np.empty(0),))[0].size > 0]
    if not used:
        raise ValueError("no labeled points to train on")
    trained = model.copy()
    if config.epochs == 0:
        return trained
    rng = np.random.default_rng(config.seed)
    spec = trained.spec

    def make_batch(cloud: PointCloud) -> _SampleBatch:
        idx, lab = labeled[cloud.id]
        idx = np.asarray(idx, dtype=np.int64)
        part = partitions.get(cloud.id) if partitions else None
        mask = None
        if part is not None and not config.nuclear_on_labeled:
            mask = np.ones(part.K, dtype=bool)
            mask[np.unique(part.assignment[idx])] = False
        if inputs is not None and not config.augment and cloud.id in inputs:
            x = inputs[cloud.id]
        else:
            x = point_inputs(cloud, use_color=spec.use_color, k=spec.knn_k)
        return _SampleBatch(
            inputs=x,
            labeled_idx=idx,
            labels=np.asarray(lab, dtype=np.int64),
            partition=part,
            cluster_mask=mask,
        )

    batches = None
    if not config.augment:
        batches = {s.id: make_batch(s) for s in used}

    params = trained.weights + trained.biases
    opt = _Adam(params, config.learning_rate)
    nw = len(trained.weights)
    for epoch in range(config.epochs):
        order = rng.permutation(len(used))
        for start in range(0, len(order), max(config.batch_size, 1)):
            chunk = order[start : start + max(config.batch_size, 1)]
            acc_w = [np.zeros_like(w) for w in trained.weights]
            acc_b = [np.zeros_like(b) for b in trained.biases]
            batch_loss = 0.0
            for oi in chunk:
                cloud = used[oi]
                if config.augment:
                    aug_seed = int(
                        np.random.SeedSequence([config.seed, epoch, int(oi)]).generate_state(1)[0]
                    )
                    batch = make_batch(
                        augment(cloud, config.g_std, config.mirror_axis, seed=aug_seed)
                    )
                else:
                    batch = batches[cloud.id]
                loss, (gw, gb) = _sample_grads(trained, batch, config.lambda_nc)
                batch_loss += loss
                for a, g in zip(acc_w, gw):
                    a += g
                for a, g in zip(acc_b, gb):
                    a += g
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            scale = 1.0 / len(chunk)
            grads = [g * scale for g in acc_w] + [g * scale for g in acc_b]
            opt.step(params, grads)
    return trained


# ---------------------------------------------------------------------------
# checkpoints: magic, version, json spec, flat float64 parameters


def save_model(path, model: MlpModel) -> None:
    spec = {
        "num_classes": model.spec.num_classes,
        "hidden": list(model.spec.hidden),
        "use_color": model.spec.use_color,
        "knn_k": model.spec.knn_k,
    }
    blob = json.dumps(spec).encode()
    flat = np.concatenate(
        [w.reshape(-1) for w in model.weights] + [b.reshape(-1) for b in model.biases]
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_model(path) -> MlpModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, spec_len = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    spec_d = json.loads(blob[12 : 12 + spec_len].decode())
    spec = MlpSpec(
        num_classes=spec_d["num_classes"],
        hidden=tuple(spec_d["hidden"]),
        use_color=spec_d["use_color"],
        knn_k=spec_d["knn_k"],
    )
    flat = np.frombuffer(blob, dtype="<f8", offset=12 + spec_len)
    dims = [spec.input_dim, *spec.hidden, spec.num_classes]
    weights, biases = [], []
    pos = 0
    for i in range(len(dims) - 1):
        size = dims[i] * dims[i + 1]
        weights.append(flat[pos : pos + size].reshape(dims[i], dims[i + 1]).copy())
        pos += size
    for i in range(len(dims) - 1):
        biases.append(flat[pos : pos + dims[i + 1]].copy())
        pos += dims[i + 1]
    if pos != len(flat):
        raise ValueError(f"{path}: parameter count mismatch")
    return MlpModel(spec, weights, biases)
