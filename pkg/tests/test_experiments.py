"""Experiment drivers and CLI: file layout, determinism, exit codes.

All configs here are deliberately tiny so each run finishes in about a
second; they exercise plumbing, not model quality.
"""

import json

import numpy as np
import pytest

from fusionlab import cli
from fusionlab.config import resolve
from fusionlab.continual import read_record_csv
from fusionlab.data import make_synthetic_stream, save_idx
from fusionlab.experiments import (
    config_digest,
    read_trace_csv,
    run_experiment,
    write_trace_csv,
)

FUSION_RAW = {
    "kind": "fusion_meml",
    "seeds": [0],
    "dataset.num_classes": 8,
    "dataset.min_per_class": 8,
    "dataset.max_per_class": 12,
    "dataset.image_size": 10,
    "dataset.train_classes": 5,
    "dataset.test_classes": 3,
    "embed.epochs": 2,
    "embed.latent_dim": 8,
    "embed.hidden": 16,
    "cluster.k": 4,
    "cluster.max_iters": 10,
    "tasks.query_random_count": 4,
    "model.conv_filters": [8, 8],
    "model.conv_strides": [2, 1],
    "model.head_hidden": 16,
    "train.steps": 25,
    "test.shots_per_class": 4,
}

CL_RAW = {
    "kind": "cl_bench",
    "seeds": [0],
    "dataset.num_classes": 4,
    "dataset.train_per_class": 30,
    "dataset.test_per_class": 10,
    "dataset.image_size": 12,
    "cl.methods": ["naive", "er", "meml"],
    "cl.buffer_capacity": 60,
    "cl.hidden": [32],
}


def make_config(raw, out_dir, **overrides):
    merged = {**raw, "out_dir": str(out_dir), **overrides}
    cfg, issues = resolve(merged)
    assert issues == [], issues
    return cfg


def write_config_file(path, raw, out_dir, **overrides):
    path.write_text(json.dumps({**raw, "out_dir": str(out_dir), **overrides}))
    return path


def test_fusion_run_layout(tmp_path):
    out = run_experiment(make_config(FUSION_RAW, tmp_path / "run"))
    for name in ("config.json", "manifest.json", "aggregate.json"):
        assert (out / name).is_file()
    for name in ("loss_trace.png", "meta_test.png"):
        assert (out / "figures" / name).stat().st_size > 0
    seed_dir = out / "seed_0"
    for name in ("trace.csv", "meta_test.csv", "model.ckpt", "tasks.bin"):
        assert (seed_dir / name).is_file()

    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["kind"] == "fusion_meml"
    assert agg["seeds"] == [0]
    points = agg["meta_test_mean"]
    assert [p[0] for p in points] == sorted(p[0] for p in points)
    assert points[-1][0] == 3  # ends at the full test class count
    assert agg["final_accuracy_mean"] == agg["per_seed"]["0"]["final_accuracy"]

    trace = read_trace_csv(seed_dir / "trace.csv")
    assert len(trace) == 25 and np.all(np.isfinite(trace))


def test_fusion_manifest_records_digest(tmp_path):
    out = run_experiment(make_config(FUSION_RAW, tmp_path / "run"))
    manifest = json.loads((out / "manifest.json").read_text())
    resolved = json.loads((out / "config.json").read_text())
    assert manifest["config_digest"] == config_digest(resolved)
    assert manifest["package_version"]


def test_aggregate_bytes_identical_across_runs(tmp_path):
    first = run_experiment(make_config(FUSION_RAW, tmp_path / "a"))
    second = run_experiment(make_config(FUSION_RAW, tmp_path / "b"))
    assert (first / "aggregate.json").read_bytes() == (second / "aggregate.json").read_bytes()


def test_seed_override_replaces_config_seeds(tmp_path):
    cfg = make_config(FUSION_RAW, tmp_path / "run")
    out = run_experiment(cfg, seed_override=[5])
    assert (out / "seed_5").is_dir()
    assert not (out / "seed_0").exists()
    written = json.loads((out / "config.json").read_text())
    assert written["seeds"] == [5]


def test_cl_bench_layout_and_records(tmp_path):
    out = run_experiment(make_config(CL_RAW, tmp_path / "run"))
    agg = json.loads((out / "aggregate.json").read_text())
    assert set(agg["methods"]) == {"naive", "er", "meml"}
    for method in ("naive", "er", "meml"):
        matrix, random_init = read_record_csv(out / "seed_0" / f"{method}_record.csv")
        assert matrix.shape == (2, 2)  # 4 classes, 2 per task
        assert len(random_init) == 2
        metrics = json.loads((out / "seed_0" / f"{method}_metrics.json").read_text())
        assert set(metrics) == {"final_acc", "fwt", "bwt", "forgetting"}
        assert metrics["final_acc"] == pytest.approx(
            agg["methods"][method]["per_seed"]["0"]["final_acc"]
        )
        assert (out / "figures" / f"{method}_matrix.png").stat().st_size > 0
    assert (out / "figures" / "final_accuracy.png").is_file()
    assert (out / "figures" / "stream_accuracy.png").is_file()


def test_cl_bench_idx_source(tmp_path, monkeypatch):
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    train, test = make_synthetic_stream(4, 20, 8, image_size=12, seed=7)
    save_idx(train, data_dir / "train-images.idx", data_dir / "train-labels.idx")
    save_idx(test, data_dir / "test-images.idx", data_dir / "test-labels.idx")
    monkeypatch.setenv("FUSIONLAB_DATA_DIR", str(data_dir))
    cfg = make_config(
        CL_RAW,
        tmp_path / "run",
        **{
            "dataset.source": "idx",
            "dataset.images": "train-images.idx",
            "dataset.labels": "train-labels.idx",
            "dataset.test_images": "test-images.idx",
            "dataset.test_labels": "test-labels.idx",
            "cl.methods": ["naive"],
        },
    )
    out = run_experiment(cfg)
    agg = json.loads((out / "aggregate.json").read_text())
    assert "naive" in agg["methods"]


def test_ablation_inner_modes(tmp_path):
    cfg = make_config(
        FUSION_RAW,
        tmp_path / "run",
        kind="ablation_single_vs_multi",
        **{"train.steps": 20, "ablation.inner_modes": ["meta_example", "trajectory"]},
    )
    out = run_experiment(cfg)
    for mode in ("meta_example", "trajectory"):
        assert (out / "seed_0" / f"trace_{mode}.csv").is_file()
        assert (out / "seed_0" / f"meta_test_{mode}.csv").is_file()
    agg = json.loads((out / "aggregate.json").read_text())
    # one pooled step per task vs one step per support sample
    assert agg["modes"]["meta_example"]["inner_steps_per_task_mean"] == 1.0
    assert agg["modes"]["trajectory"]["inner_steps_per_task_mean"] > 2.0


def test_ablation_balance_modes(tmp_path):
    cfg = make_config(
        FUSION_RAW,
        tmp_path / "run",
        kind="ablation_balanced_vs_unbalanced",
        **{
            "train.steps": 20,
            "dataset.min_per_class": 15,
            "dataset.max_per_class": 20,
            "cluster.k": 5,
        },
    )
    out = run_experiment(cfg)
    agg = json.loads((out / "aggregate.json").read_text())
    sizes = {mode: agg["modes"][mode]["task_sizes"]["0"] for mode in agg["modes"]}
    # loss_weight reuses the raw (off) task distribution
    assert sizes["loss_weight"] == sizes["off"]
    # threshold drops small clusters and truncates the rest to one size
    assert sizes["threshold"]["num_tasks"] <= sizes["off"]["num_tasks"]
    assert sizes["threshold"]["min_size"] == sizes["threshold"]["max_size"]
    # augment pads instead of dropping, so every cluster survives at one size
    assert sizes["augment"]["num_tasks"] == sizes["off"]["num_tasks"]
    assert sizes["augment"]["min_size"] == sizes["augment"]["max_size"]


def test_trace_csv_round_trip(tmp_path):
    losses = [1.5, 0.25, 0.125]
    path = tmp_path / "trace.csv"
    write_trace_csv(losses, path)
    assert path.read_text().splitlines()[0] == "step,outer_loss"
    np.testing.assert_allclose(read_trace_csv(path), losses)


def test_config_digest_ignores_key_order():
    a = {"x": 1, "y": [1, 2]}
    b = {"y": [1, 2], "x": 1}
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest({"x": 2, "y": [1, 2]})


def test_cli_run_and_validate(tmp_path, capsys):
    path = write_config_file(tmp_path / "cfg.json", FUSION_RAW, tmp_path / "run")
    assert cli.main(["validate", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "ok"

    assert cli.main(["run", str(path)]) == 0
    out = capsys.readouterr().out.strip()
    assert out == str(tmp_path / "run")
    assert (tmp_path / "run" / "aggregate.json").is_file()


def test_cli_out_dir_and_seed_override(tmp_path, capsys):
    path = write_config_file(tmp_path / "cfg.json", FUSION_RAW, tmp_path / "ignored")
    code = cli.main(
        ["run", str(path), "--out-dir", str(tmp_path / "actual"), "--seed-override", "3"]
    )
    assert code == 0
    capsys.readouterr()
    assert (tmp_path / "actual" / "seed_3").is_dir()
    assert not (tmp_path / "ignored").exists()


def test_cli_invalid_config_exits_2(tmp_path, capsys):
    path = write_config_file(
        tmp_path / "bad.json", FUSION_RAW, tmp_path / "run", **{"cluster.k": 1}
    )
    assert cli.main(["validate", str(path)]) == 2
    assert "cluster.k" in capsys.readouterr().err
    assert cli.main(["run", str(path)]) == 2
    assert "cluster.k" in capsys.readouterr().err


def test_cli_missing_file_exits_2(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "absent.json")]) == 2
    assert "no such file" in capsys.readouterr().err


def test_cli_divergence_exits_3(tmp_path, capsys):
    path = write_config_file(
        tmp_path / "boom.json", FUSION_RAW, tmp_path / "run",
        **{"train.inner_lr": 1e160},
    )
    assert cli.main(["run", str(path)]) == 3
    assert "diverged" in capsys.readouterr().err
