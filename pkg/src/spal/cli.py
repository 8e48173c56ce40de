"""Command line interface: file-based pipeline stages plus experiment drivers."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import acquisition as acq
from . import geomfeat, harness, model as model_mod, pcio, superpoint


def _cmd_gen_synth(args):
    spec = pcio.SynthSpec.load(args.spec)
    dataset = pcio.generate_synthetic(spec, seed=args.seed)
    pcio.export_dataset(dataset, args.out, format=args.format)
    print(f"wrote {len(dataset)} samples to {args.out}")


def _cmd_split_blocks(args):
    dataset = pcio.load_dataset(args.infile, format=args.format)
    scene = dataset.samples[0]
    blocks = pcio.split_blocks(scene, args.block_size, args.points, seed=args.seed)
    pcio.export_dataset(blocks, args.out, format=args.format)
    print(f"wrote {len(blocks)} blocks to {args.out}")


def _cmd_features(args):
    dataset = pcio.load_dataset(args.infile, format=args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cloud in dataset.samples:
        feats = geomfeat.compute_features(cloud, k=args.k)
        geomfeat.save_features(out / f"{cloud.id}.feat", feats)
    print(f"wrote {len(dataset)} feature caches to {out}")


def _load_features_or_compute(cloud, feat_dir, k):
    if feat_dir:
        path = Path(feat_dir) / f"{cloud.id}.feat"
        if path.exists():
            return geomfeat.load_features(path)
    return geomfeat.compute_features(cloud, k=k)


def _cmd_cluster(args):
    dataset = pcio.load_dataset(args.infile, format=args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cloud in dataset.samples:
        feats = _load_features_or_compute(cloud, args.features, args.k_graph)
        graph = superpoint.build_affinity(
            cloud, feats, k_graph=args.k_graph, gamma=args.gamma
        )
        part = superpoint.normalized_cut(graph, min(args.k_clusters, cloud.n), args.seed)
        superpoint.save_partition(out / f"{cloud.id}.part", part)
    print(f"wrote {len(dataset)} partitions to {out}")


def _load_partitions(dataset, part_dir):
    parts = {}
    for cloud in dataset.samples:
        path = Path(part_dir) / f"{cloud.id}.part"
        if path.exists():
            parts[cloud.id] = superpoint.load_partition(path)
    return parts


def _cmd_noise_rate(args):
    dataset = pcio.load_dataset(args.infile, format=args.format)
    parts = _load_partitions(dataset, args.partitions)
    ordered = [parts[c.id] for c in dataset.samples]
    rate = superpoint.noise_rate(dataset, ordered)
    print(f"{100.0 * rate:.4f}")


def _cmd_train(args):
    dataset = pcio.load_dataset(args.data, format=args.format)
    parts = _load_partitions(dataset, args.partitions) if args.partitions else {}
    train_samples = dataset.train_samples()
    granularity = acq.pool_granularity(args.pool)
    units = acq.build_units(train_samples, granularity, parts or None)
    pool = acq.load_pool(args.pool, units)
    spec = model_mod.MlpSpec(
        num_classes=dataset.num_classes,
        hidden=tuple(int(h) for h in args.hidden.split(",")),
        knn_k=args.k,
    )
    net = model_mod.MlpModel.init(spec, seed=args.seed)
    labeled = {s.id: pool.point_labels(s, parts.get(s.id)) for s in train_samples}
    cfg = model_mod.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        lambda_nc=args.lambda_nc,
        seed=args.seed,
    )
    net = model_mod.train(net, train_samples, labeled, parts or None, cfg)
    model_mod.save_model(args.out, net)
    print(f"checkpoint written to {args.out}")


def _cmd_select(args):
    dataset = pcio.load_dataset(args.data, format=args.format)
    parts = _load_partitions(dataset, args.partitions) if args.partitions else {}
    train_samples = dataset.train_samples()
    granularity = acq.pool_granularity(args.pool)
    units = acq.build_units(train_samples, granularity, parts or None)
    pool = acq.load_pool(args.pool, units)
    net = model_mod.load_model(args.model)
    outputs = {s.id: net.forward(s) for s in train_samples}
    scores = acq.score_candidates(
        pool, outputs, parts or None, args.beta, args.delta
    )
    ids = acq.select_query(scores, args.n_query, pool)
    by_id = {s.id: s for s in train_samples}
    for uid in ids:
        acq.oracle_label(pool, by_id[uid[0]], uid, parts.get(uid[0]))
        print(f"selected {uid[0]} {uid[1]}")
    acq.save_pool(args.out or args.pool, pool)


def _cmd_run(args):
    config = harness.ExperimentConfig.load(args.config)
    report = harness.run_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_summary_json(out / "summary.json")
    print(f"report written to {out}")


def _cmd_sweep(args):
    config = harness.ExperimentConfig.load(args.config)
    values = [float(v) if args.axis != "K" else int(v) for v in args.values.split(",")]
    results = harness.sweep(config, args.axis, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.sweep_csv(results, out / f"sweep_{args.axis}.csv", args.axis)
    print(f"sweep written to {out}")


def _cmd_eval(args):
    dataset = pcio.load_dataset(args.data, format=args.format)
    net = model_mod.load_model(args.model)
    test = dataset.test_samples() or list(dataset.samples)
    preds, gts = [], []
    for s in test:
        preds.append(net.forward(s).posteriors.argmax(axis=1))
        gts.append(s.gt_labels)
    score, per_class = harness.miou(
        np.concatenate(preds), np.concatenate(gts), dataset.num_classes
    )
    print(f"miou {score:.6f}")
    for c, iou in enumerate(per_class):
        print(f"class_{c} {iou:.6f}")


def _cmd_transfer(args):
    from dataclasses import replace

    config = harness.ExperimentConfig.load(args.config)
    selector = replace(config.model, hidden=tuple(int(h) for h in args.selector.split(",")))
    trainee = replace(config.model, hidden=tuple(int(h) for h in args.trainee.split(",")))
    report = harness.transfer(config, selector, trainee)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "transfer.csv")
    report.write_summary_json(out / "transfer_summary.json")
    print(f"transfer report written to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_format(sp):
        sp.add_argument("--format", choices=["text", "binary"], default="text")

    sp = sub.add_parser("gen-synth", help="generate a synthetic dataset from a spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_gen_synth)

    sp = sub.add_parser("split-blocks", help="split a scene into grid blocks")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--block-size", type=float, required=True)
    sp.add_argument("--points", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    add_format(sp)
    sp.set_defaults(func=_cmd_split_blocks)

    sp = sub.add_parser("features", help="compute per-point geometric features")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--out", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_features)

    sp = sub.add_parser("cluster", help="cluster samples into super-points")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--k-clusters", type=int, default=500)
    sp.add_argument("--gamma", type=float, default=0.1)
    sp.add_argument("--k-graph", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--features", default=None, help="optional feature cache dir")
    sp.add_argument("--out", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_cluster)

    sp = sub.add_parser("noise-rate", help="labeled-data noise percentage of partitions")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--partitions", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_noise_rate)

    sp = sub.add_parser("train", help="train the built-in model from a pool")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--partitions", default=None)
    sp.add_argument("--lambda-nc", dest="lambda_nc", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--hidden", default="64,64")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--out", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("select", help="score and label the next query batch")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--partitions", default=None)
    sp.add_argument("--beta", type=float, default=0.25)
    sp.add_argument("--delta", type=float, default=1.0)
    sp.add_argument("--n-query", dest="n_query", type=int, required=True)
    sp.add_argument("--out", default=None, help="pool file to write (default: in place)")
    add_format(sp)
    sp.set_defaults(func=_cmd_select)

    sp = sub.add_parser("run", help="run an experiment config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=_cmd_run)

    sp = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", choices=harness.SWEEP_AXES, required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--out", default="runs/sweep")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    add_format(sp)
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("transfer", help="select with model A, train model B")
    sp.add_argument("--config", required=True)
    sp.add_argument("--selector", required=True, help="selector hidden widths, e.g. 64,64")
    sp.add_argument("--trainee", required=True, help="trainee hidden widths")
    sp.add_argument("--out", default="runs/transfer")
    sp.set_defaults(func=_cmd_transfer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
