import json

import pytest
import yaml

from spal.cli import main
from spal.pcio import benchmark_spec, export_dataset, load_dataset


@pytest.fixture
def synth_dir(tmp_path):
    spec = benchmark_spec(n_shapes=4, n_points=96, num_classes=4, seed=2)
    spec_path = tmp_path / "spec.yaml"
    spec.save(spec_path)
    out = tmp_path / "data"
    main(["gen-synth", "--spec", str(spec_path), "--seed", "5", "--out", str(out)])
    return out


def test_gen_synth_writes_dataset(synth_dir):
    ds = load_dataset(synth_dir, format="text")
    assert len(ds) == 4
    assert all(s.n == 96 for s in ds.samples)


def test_features_cluster_noise_rate(tmp_path, synth_dir, capsys):
    feat_dir = tmp_path / "feats"
    main(["features", "--in", str(synth_dir), "--k", "8", "--out", str(feat_dir)])
    assert len(list(feat_dir.glob("*.feat"))) == 4
    part_dir = tmp_path / "parts"
    main([
        "cluster", "--in", str(synth_dir), "--k-clusters", "12", "--gamma", "0.1",
        "--k-graph", "8", "--seed", "1", "--features", str(feat_dir), "--out", str(part_dir),
    ])
    assert len(list(part_dir.glob("*.part"))) == 4
    capsys.readouterr()
    main(["noise-rate", "--in", str(synth_dir), "--partitions", str(part_dir)])
    out = capsys.readouterr().out.strip()
    assert 0.0 <= float(out) <= 100.0


def test_split_blocks(tmp_path, rng):
    from spal.pcio import Dataset, PointCloud

    pts = rng.uniform(0, 1, size=(300, 3)) * [2.0, 1.0, 0.3]
    pts[0, :2] = [0, 0]
    pts[1, :2] = [2.0, 1.0]
    scene = PointCloud(id="scene", points=pts, gt_labels=rng.integers(0, 3, size=300))
    scene_dir = tmp_path / "scene"
    export_dataset(Dataset(samples=(scene,), num_classes=3), scene_dir)
    out = tmp_path / "blocks"
    main([
        "split-blocks", "--in", str(scene_dir / "scene.txt"), "--block-size", "1.0",
        "--points", "64", "--out", str(out), "--seed", "0",
    ])
    blocks = load_dataset(out, format="text")
    assert len(blocks) == 2
    assert all(b.n == 64 for b in blocks.samples)


def test_train_select_eval_cycle(tmp_path, synth_dir, capsys):
    part_dir = tmp_path / "parts"
    main([
        "cluster", "--in", str(synth_dir), "--k-clusters", "8",
        "--k-graph", "8", "--seed", "0", "--out", str(part_dir),
    ])
    # seed a pool with a couple of labeled super-points
    from spal import acquisition as acq
    from spal.cli import _load_partitions

    ds = load_dataset(synth_dir, format="text")
    parts = _load_partitions(ds, part_dir)
    train_samples = ds.train_samples()
    units = acq.build_units(train_samples, "superpoint", parts)
    pool = acq.LabelPool("superpoint", 50, units)
    first = train_samples[0]
    acq.oracle_label(pool, first, (first.id, 0), parts[first.id])
    acq.oracle_label(pool, first, (first.id, 1), parts[first.id])
    pool_path = tmp_path / "pool.txt"
    acq.save_pool(pool_path, pool)

    ckpt = tmp_path / "model.ckpt"
    main([
        "train", "--data", str(synth_dir), "--pool", str(pool_path),
        "--partitions", str(part_dir), "--epochs", "4", "--hidden", "8",
        "--k", "8", "--seed", "0", "--out", str(ckpt),
    ])
    assert ckpt.exists()

    capsys.readouterr()
    main([
        "select", "--model", str(ckpt), "--pool", str(pool_path), "--data", str(synth_dir),
        "--partitions", str(part_dir),
        "--n-query", "3", "--out", str(tmp_path / "pool2.txt"),
    ])
    out = capsys.readouterr().out
    assert out.count("selected") == 3
    pool2 = acq.load_pool(tmp_path / "pool2.txt", units)
    assert len(pool2.labeled_ids()) == 5

    capsys.readouterr()
    main(["eval", "--model", str(ckpt), "--data", str(synth_dir)])
    out = capsys.readouterr().out
    assert out.startswith("miou")


def test_run_and_sweep(tmp_path, capsys):
    cfg = {
        "dataset": {"synth": {"n_shapes": 4, "n_points": 96, "num_classes": 4, "seed": 2}},
        "granularity": "superpoint",
        "strategy": "random",
        "K": 8,
        "k": 8,
        "milestones": [6, 10],
        "init_budget": 2,
        "seeds": [0],
        "model": {"hidden": [8], "epochs": 3},
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "run"
    main(["run", "--config", str(cfg_path), "--out", str(out)])
    assert (out / "report.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == 1

    sweep_out = tmp_path / "sw"
    main([
        "sweep", "--config", str(cfg_path), "--axis", "lambda_nc",
        "--values", "0,1", "--out", str(sweep_out),
    ])
    assert (sweep_out / "sweep_lambda_nc.csv").exists()


def test_transfer_cli(tmp_path):
    cfg = {
        "dataset": {"synth": {"n_shapes": 4, "n_points": 96, "num_classes": 4, "seed": 2}},
        "granularity": "superpoint",
        "strategy": "ours",
        "K": 8,
        "k": 8,
        "milestones": [6],
        "init_budget": 2,
        "seeds": [0],
        "model": {"hidden": [8], "epochs": 3},
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "tr"
    main([
        "transfer", "--config", str(cfg_path), "--selector", "8",
        "--trainee", "6", "--out", str(out),
    ])
    assert (out / "transfer.csv").exists()
