"""End-to-end active learning loop, evaluation metrics, sweeps and reports.

A run walks a click-budget schedule: random-initialize the pool, then per
milestone select (strategy-scored or random) until the milestone is reached,
retrain from scratch, and evaluate mIoU on the held-out split. Everything is
deterministic per seed; reruns of the same config produce byte-identical CSVs
(wall times live in the JSON summary only).

Test-split ground truth is sequestered in a LabelVault: pipeline code sees
zeroed labels, and vault reads while locked raise.
"""

from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import acquisition as acq
from . import geomfeat, model as model_mod, pcio, superpoint

STRATEGIES = ("random", "coreset", "entropy", "ours")
REPORT_SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "strategy",
    "granularity",
    "milestone",
    "seed",
    "miou",
    "per_class_iou",
    "spent",
    "labeled_units",
    "labeled_noise_rate",
]


# ---------------------------------------------------------------------------
# metrics


def miou(predictions, gt, num_classes: int) -> tuple[float, np.ndarray]:
    """Global category-wise mean IoU over aligned per-point class arrays.

    Classes absent from both prediction and ground truth are excluded from
    the mean (their per-class entry is NaN)."""
    pred = np.asarray(predictions, dtype=np.int64)
    g = np.asarray(gt, dtype=np.int64)
    if pred.shape != g.shape or pred.ndim != 1:
        raise ValueError("predictions and gt must be aligned 1-d arrays")
    if pred.size == 0:
        raise ValueError("empty input")
    c = int(num_classes)
    conf = np.bincount(g * c + pred, minlength=c * c).reshape(c, c)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(c, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    return float(per_class[present].mean()), per_class


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 0.01
    epochs: int = 80
    batch_size: int = 1
    use_color: bool = False


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    g_std: float = 0.05
    mirror_axis: str | None = "x"


@dataclass(frozen=True)
class SynthConfig:
    n_shapes: int = 30
    n_points: int = 512
    num_classes: int = 4
    seed: int = 0
    jitter: float = 0.002
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    granularity: str = "superpoint"
    strategy: str = "ours"
    beta: float = 0.25
    delta: float = 1.0
    lambda_nc: float = 1.0
    gamma: float = 0.1
    k: int = 10
    K: int = 500
    milestones: tuple[int, ...] = (128, 256, 512)
    init_budget: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_query: int | None = None
    normalize_scores: bool = True
    greedy_recompute: bool = False
    dataset_path: str | None = None
    dataset_format: str = "text"
    synth: SynthConfig | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    test_fraction: float = 0.2
    instance_average: bool = False
    nuclear_on_labeled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.granularity not in acq.GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.milestones:
            raise ValueError("need at least one milestone")
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ValueError("milestones must be strictly ascending")
        if self.init_budget >= self.milestones[0]:
            raise ValueError("init_budget must be below the first milestone")
        if self.dataset_path is None and self.synth is None:
            raise ValueError("config needs a dataset path or a synth section")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        dataset = d.pop("dataset", {})
        kwargs = {}
        if "path" in dataset and dataset["path"]:
            kwargs["dataset_path"] = dataset["path"]
            kwargs["dataset_format"] = dataset.get("format", "text")
        if "synth" in dataset and dataset["synth"]:
            kwargs["synth"] = SynthConfig(**dataset["synth"])
        if "model" in d:
            m = dict(d.pop("model"))
            if "hidden" in m:
                m["hidden"] = tuple(m["hidden"])
            kwargs["model"] = ModelConfig(**m)
        if "augment" in d:
            kwargs["augment"] = AugmentConfig(**d.pop("augment"))
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def effective_beta_delta(self) -> tuple[float, float]:
        """Strategy baselines are exact special cases of the combined score."""
        if self.strategy == "coreset":
            return 0.0, 0.0
        if self.strategy == "entropy":
            return 1.0, 0.0
        return self.beta, self.delta


# ---------------------------------------------------------------------------
# test-label sequestration


class LabelVault:
    """Holds held-out ground truth; reads while locked raise and are counted."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}
        self._unlocked = False
        self.reads = 0
        self.blocked_reads = 0

    def deposit(self, sid: str, labels: np.ndarray) -> None:
        self._store[sid] = np.asarray(labels, dtype=np.int64).copy()

    @contextmanager
    def unlocked(self):
        self._unlocked = True
        try:
            yield self
        finally:
            self._unlocked = False

    def fetch(self, sid: str) -> np.ndarray:
        if not self._unlocked:
            self.blocked_reads += 1
            raise RuntimeError("test labels fetched outside an evaluation phase")
        self.reads += 1
        return self._store[sid]


def sequester_test_labels(samples: list[pcio.PointCloud]) -> tuple[list[pcio.PointCloud], LabelVault]:
    """Zero the gt labels of the given samples; true labels go into the vault."""
    vault = LabelVault()
    stripped = []
    for s in samples:
        vault.deposit(s.id, s.gt_labels)
        stripped.append(replace(s, gt_labels=np.zeros(s.n, dtype=np.int64)))
    return stripped, vault


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ReportRow:
    strategy: str
    granularity: str
    milestone: int
    seed: int
    miou: float
    per_class_iou: tuple[float, ...]
    spent: int
    labeled_units: int
    labeled_noise_rate: float
    wall_time_s: float


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)

    def extend(self, other: "Report") -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path) -> None:
        """Deterministic CSV: wall time is deliberately excluded."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in sorted(self.rows, key=lambda r: (r.strategy, r.granularity, r.milestone, r.seed)):
                writer.writerow(
                    [
                        r.strategy,
                        r.granularity,
                        r.milestone,
                        r.seed,
                        f"{r.miou:.10g}",
                        ";".join(f"{v:.10g}" for v in r.per_class_iou),
                        r.spent,
                        r.labeled_units,
                        f"{r.labeled_noise_rate:.10g}",
                    ]
                )

    def summary(self) -> dict:
        groups: dict[tuple, list[ReportRow]] = {}
        for r in self.rows:
            groups.setdefault((r.strategy, r.granularity, r.milestone), []).append(r)
        out = []
        for (strategy, granularity, milestone), rows in sorted(groups.items()):
            vals = np.asarray([r.miou for r in rows])
            out.append(
                {
                    "strategy": strategy,
                    "granularity": granularity,
                    "milestone": milestone,
                    "n_seeds": len(rows),
                    "miou_mean": float(vals.mean()),
                    "miou_std": float(vals.std(ddof=1)) if len(rows) > 1 else 0.0,
                    "wall_time_s": float(sum(r.wall_time_s for r in rows)),
                }
            )
        return {"schema_version": REPORT_SCHEMA_VERSION, "groups": out}

    def write_summary_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# artifact cache (features, graphs, partitions shared across runs)


class ArtifactCache:
    def __init__(self):
        self.store: dict = {}

    def get_or(self, key, builder):
        if key not in self.store:
            self.store[key] = builder()
        return self.store[key]


def _load_or_generate(config: ExperimentConfig) -> pcio.Dataset:
    if config.dataset_path is not None:
        return pcio.load_dataset(config.dataset_path, format=config.dataset_format)
    sc = config.synth
    spec = pcio.benchmark_spec(
        n_shapes=sc.n_shapes,
        n_points=sc.n_points,
        num_classes=sc.num_classes,
        seed=sc.seed,
        jitter=sc.jitter,
        test_fraction=sc.test_fraction,
    )
    return pcio.generate_synthetic(spec, seed=sc.seed)


def _test_split_ids(dataset: pcio.Dataset, fraction: float) -> tuple[str, ...]:
    if dataset.test_ids:
        return dataset.test_ids
    ids = sorted(s.id for s in dataset.samples)
    n_test = max(1, int(round(fraction * len(ids))))
    return tuple(ids[-n_test:])


def _round_seed(run_seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([run_seed, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# single-seed run


class _RunContext:
    """Prepared per-seed artifacts: features, partitions, inputs, vault."""

    def __init__(self, config: ExperimentConfig, dataset: pcio.Dataset, seed: int, cache: ArtifactCache):
        self.config = config
        self.seed = seed
        test_ids = set(_test_split_ids(dataset, config.test_fraction))
        raw_train = [s for s in dataset.samples if s.id not in test_ids]
        raw_test = [s for s in dataset.samples if s.id in test_ids]
        if not raw_test:
            raise ValueError("missing test split")
        self.num_classes = dataset.num_classes
        self.train = raw_train
        self.test, self.vault = sequester_test_labels(raw_test)

        needs_partitions = config.granularity == "superpoint" or config.lambda_nc > 0
        self.partitions: dict[str, superpoint.SuperPointPartition] = {}
        self.inputs: dict[str, np.ndarray] = {}
        use_color = config.model.use_color
        for s in raw_train:
            feats, graph = cache.get_or(
                ("feat", s.id, config.k), lambda s=s: _feat_graph(s, config.k)
            )
            self.inputs[s.id] = cache.get_or(
                ("in", s.id, config.k, use_color),
                lambda s=s, f=feats, g=graph: model_mod.point_inputs(s, f, g, use_color),
            )
            if needs_partitions:
                self.partitions[s.id] = cache.get_or(
                    ("part", s.id, config.k, config.K, config.gamma, seed),
                    lambda s=s, f=feats: superpoint.normalized_cut(
                        superpoint.build_affinity(s, f, k_graph=config.k, gamma=config.gamma),
                        min(config.K, s.n),
                        seed,
                    ),
                )
        self.test_inputs = {}
        for s in self.test:
            feats, graph = cache.get_or(
                ("feat", s.id, config.k), lambda s=s: _feat_graph(s, config.k)
            )
            self.test_inputs[s.id] = cache.get_or(
                ("in", s.id, config.k, use_color),
                lambda s=s, f=feats, g=graph: model_mod.point_inputs(s, f, g, use_color),
            )
        self.units = acq.build_units(
            raw_train, config.granularity, self.partitions or None
        )
        self.by_id = {s.id: s for s in raw_train}

    def model_spec(self) -> model_mod.MlpSpec:
        return model_mod.MlpSpec(
            num_classes=self.num_classes,
            hidden=self.config.model.hidden,
            use_color=self.config.model.use_color,
            knn_k=self.config.k,
        )

    def train_model(self, pool: acq.LabelPool, round_tag: int, spec=None) -> model_mod.MlpModel:
        cfg = self.config
        spec = spec or self.model_spec()
        seed = _round_seed(self.seed, round_tag)
        net = model_mod.MlpModel.init(spec, seed=seed)
        labeled = {
            s.id: pool.point_labels(s, self.partitions.get(s.id)) for s in self.train
        }
        tc = model_mod.TrainConfig(
            epochs=cfg.model.epochs,
            learning_rate=cfg.model.learning_rate,
            batch_size=cfg.model.batch_size,
            lambda_nc=cfg.lambda_nc,
            augment=cfg.augment.enabled,
            g_std=cfg.augment.g_std,
            mirror_axis=cfg.augment.mirror_axis,
            seed=seed,
            nuclear_on_labeled=cfg.nuclear_on_labeled,
        )
        return model_mod.train(
            net, self.train, labeled, self.partitions or None, tc, inputs=self.inputs
        )

    def outputs(self, net) -> dict[str, model_mod.ModelOutput]:
        return {sid: net.forward_inputs(x) for sid, x in self.inputs.items()}

    def evaluate(self, net) -> tuple[float, np.ndarray]:
        preds, gts = [], []
        with self.vault.unlocked():
            for s in self.test:
                out = net.forward_inputs(self.test_inputs[s.id])
                preds.append(out.posteriors.argmax(axis=1))
                gts.append(self.vault.fetch(s.id))
        if self.config.instance_average:
            per = [miou(p, g, self.num_classes) for p, g in zip(preds, gts)]
            mean = float(np.mean([m for m, _ in per]))
            per_class = np.nanmean(np.stack([pc for _, pc in per]), axis=0)
            return mean, per_class
        return miou(np.concatenate(preds), np.concatenate(gts), self.num_classes)

    def label_units(self, pool: acq.LabelPool, ids) -> None:
        for uid in ids:
            cloud = self.by_id[uid[0]]
            acq.oracle_label(pool, cloud, uid, self.partitions.get(uid[0]))

    def random_selection(self, pool: acq.LabelPool, n_query: int, rng) -> list[acq.UnitId]:
        ids = pool.unlabeled_ids()
        order = rng.permutation(len(ids))
        picked, planned = [], 0
        for oi in order:
            if len(picked) == n_query:
                break
            uid = ids[oi]
            cost = pool.cost(uid)
            if pool.spent + planned + cost > pool.budget:
                continue
            picked.append(uid)
            planned += cost
        return picked


def _feat_graph(cloud, k):
    graph = geomfeat.knn(cloud.points, k)
    return geomfeat.compute_features(cloud, graph), graph


def initialize_pool(ctx: "_RunContext", config: ExperimentConfig, seed: int) -> acq.LabelPool:
    """Random, strategy-independent pool initialization up to init_budget."""
    pool = acq.LabelPool(config.granularity, config.init_budget, ctx.units)
    min_cost = min(ctx.units.values())
    if config.init_budget < min_cost:
        raise ValueError(
            f"init budget {config.init_budget} smaller than one unit's cost {min_cost}"
        )
    init_rng = np.random.default_rng([seed, 101])
    ctx.label_units(pool, ctx.random_selection(pool, pool.n_units, init_rng))
    return pool


def _run_seed(
    config: ExperimentConfig,
    dataset: pcio.Dataset,
    seed: int,
    cache: ArtifactCache,
    trainee_spec=None,
    strategy_label: str | None = None,
) -> list[ReportRow]:
    ctx = _RunContext(config, dataset, seed, cache)
    beta, delta = config.effective_beta_delta()
    pool = initialize_pool(ctx, config, seed)
    selector = ctx.train_model(pool, round_tag=0)
    rows = []
    for mi, milestone in enumerate(config.milestones):
        pool.raise_budget(milestone)
        step = 0
        while pool.spent < milestone and pool.unlabeled_ids():
            gap = milestone - pool.spent
            n = min(config.n_query, gap) if config.n_query else gap
            if config.strategy == "random":
                sel_rng = np.random.default_rng([seed, 202, mi, step])
                ids = ctx.random_selection(pool, n, sel_rng)
            else:
                outputs = ctx.outputs(selector)
                scores = acq.score_candidates(
                    pool,
                    outputs,
                    ctx.partitions or None,
                    beta,
                    delta,
                    normalize=config.normalize_scores,
                )
                if config.greedy_recompute:
                    ids = _greedy_pick(config, pool, outputs, ctx.partitions or None, scores, n, beta, delta)
                else:
                    ids = acq.select_query(scores, n, pool)
            if not ids:
                break
            ctx.label_units(pool, ids)
            step += 1
            if config.n_query and pool.spent < milestone:
                selector = ctx.train_model(pool, round_tag=1000 * (mi + 1) + step)
        t0 = time.perf_counter()
        selector = ctx.train_model(pool, round_tag=mi + 1)
        evaluated = selector
        if trainee_spec is not None and trainee_spec != ctx.model_spec():
            # same round seed as the selector so identical specs coincide
            evaluated = ctx.train_model(pool, round_tag=mi + 1, spec=trainee_spec)
        score, per_class = ctx.evaluate(evaluated)
        rows.append(
            ReportRow(
                strategy=strategy_label or config.strategy,
                granularity=config.granularity,
                milestone=milestone,
                seed=seed,
                miou=score,
                per_class_iou=tuple(float(v) for v in per_class),
                spent=pool.spent,
                labeled_units=len(pool.labeled_ids()),
                labeled_noise_rate=pool.labeled_noise_rate(),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    assert ctx.vault.blocked_reads == 0
    return rows


def _greedy_pick(config, pool, outputs, partitions, scores, n, beta, delta):
    """Core-set style within-batch D recomputation, budget-truncated."""
    ids, unit_feat, labeled_feat = acq.candidate_unit_features(
        pool, outputs, partitions
    )
    feat_by_unit = dict(zip(ids, unit_feat))
    order = acq.greedy_recompute_order(
        scores, feat_by_unit, labeled_feat, n, beta, delta,
        normalize=config.normalize_scores,
    )
    picked, planned = [], 0
    for uid in order:
        cost = pool.cost(uid)
        if pool.spent + planned + cost > pool.budget:
            break
        picked.append(uid)
        planned += cost
    return picked


def run_experiment(config: ExperimentConfig, cache: ArtifactCache | None = None) -> Report:
    """Run the full schedule for every seed; deterministic per config."""
    dataset = _load_or_generate(config)
    cache = cache or ArtifactCache()
    report = Report()
    for seed in config.seeds:
        report.rows.extend(_run_seed(config, dataset, seed, cache))
    return report


# ---------------------------------------------------------------------------
# sweeps and transfer


SWEEP_AXES = ("beta", "delta", "lambda_nc", "K")


def sweep(
    config: ExperimentConfig, axis: str, values, cache: ArtifactCache | None = None
) -> dict[float, Report]:
    """One run per axis value with shared seeds; returns value -> report."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r} (valid: {SWEEP_AXES})")
    cache = cache or ArtifactCache()
    out = {}
    for v in values:
        cfg = replace(config, **{axis: type(getattr(config, axis))(v)})
        out[v] = run_experiment(cfg, cache)
    return out


def sweep_csv(results: dict, path, axis: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis] + CSV_COLUMNS)
        for v in sorted(results):
            for r in sorted(
                results[v].rows, key=lambda r: (r.strategy, r.granularity, r.milestone, r.seed)
            ):
                writer.writerow(
                    [
                        v,
                        r.strategy,
                        r.granularity,
                        r.milestone,
                        r.seed,
                        f"{r.miou:.10g}",
                        ";".join(f"{x:.10g}" for x in r.per_class_iou),
                        r.spent,
                        r.labeled_units,
                        f"{r.labeled_noise_rate:.10g}",
                    ]
                )


def transfer(
    config: ExperimentConfig,
    selector_model: ModelConfig,
    trainee_model: ModelConfig,
    cache: ArtifactCache | None = None,
) -> Report:
    """Select with model A, train/evaluate model B; compare against random+B."""
    dataset = _load_or_generate(config)
    cache = cache or ArtifactCache()
    report = Report()
    sel_cfg = replace(config, model=selector_model)
    rnd_cfg = replace(config, model=trainee_model, strategy="random")
    for seed in config.seeds:
        trainee_spec = model_mod.MlpSpec(
            num_classes=dataset.num_classes,
            hidden=trainee_model.hidden,
            use_color=trainee_model.use_color,
            knn_k=config.k,
        )
        report.rows.extend(
            _run_seed(sel_cfg, dataset, seed, cache, trainee_spec=trainee_spec, strategy_label="transfer")
        )
        report.rows.extend(
            _run_seed(rnd_cfg, dataset, seed, cache, strategy_label="random")
        )
    return report
