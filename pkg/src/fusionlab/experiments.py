"""Experiment drivers.

Each driver takes a resolved configuration, runs the pipeline once per seed,
and writes three layers of output under the run directory: per-seed delimited
files (traces, records, checkpoints), one aggregate JSON with the cross-seed
summary, and report figures. The aggregate JSON is byte-identical across runs
of the same configuration and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import __version__, report
from .config import ExperimentConfig
from .continual import (
    CLConfig,
    compute_metrics,
    run_benchmark,
    write_metrics_json,
    write_record_csv,
)
from .data import load_idx, make_synthetic_fewshot, make_synthetic_stream, split_classes
from .embedding import (
    build_task_distribution,
    embed,
    kmeans,
    save_task_distribution,
    train_autoencoder,
)
from .meml import MetaHyper, meta_test, meta_train, save_checkpoint
from .models import ConvFeatures, MemlModel

DATA_DIR_ENV = "FUSIONLAB_DATA_DIR"


def data_root() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def resolve_data_path(value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else data_root() / path


def write_trace_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "outer_loss"])
        for step, value in enumerate(losses):
            writer.writerow([step, f"{value:.10g}"])


def read_trace_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(row[1]) for row in rows[1:]])


def write_points_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["classes_seen", "accuracy"])
        for seen, acc in points:
            writer.writerow([seen, f"{acc:.4f}"])


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def config_digest(values: dict) -> str:
    canonical = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _mean_points(per_seed_points: list) -> list:
    """Average aligned (checkpoint, accuracy) lists across seeds."""
    merged = {}
    for points in per_seed_points:
        for seen, acc in points:
            merged.setdefault(seen, []).append(acc)
    return [[int(seen), float(np.mean(accs))] for seen, accs in sorted(merged.items())]


def _fusion_corpus(v: dict, seed: int):
    dataset = make_synthetic_fewshot(
        v["dataset.num_classes"],
        v["dataset.min_per_class"],
        v["dataset.max_per_class"],
        image_size=v["dataset.image_size"],
        noise_sigma=v["dataset.noise_sigma"],
        seed=seed,
    )
    train_ds, _, test_ds = split_classes(
        dataset,
        v["dataset.train_classes"],
        v["dataset.val_classes"],
        v["dataset.test_classes"],
        seed=seed,
    )
    encoder = train_autoencoder(
        train_ds,
        latent_dim=v["embed.latent_dim"],
        hidden=v["embed.hidden"],
        epochs=v["embed.epochs"],
        lr=v["embed.lr"],
        batch_size=v["embed.batch_size"],
        seed=seed,
    )
    pseudo, _ = kmeans(embed(encoder, train_ds), v["cluster.k"], v["cluster.max_iters"], seed=seed)
    return train_ds, test_ds, pseudo


def _fusion_model(v: dict) -> MemlModel:
    size = v["dataset.image_size"]
    feature = ConvFeatures((1, size, size), v["model.conv_filters"], v["model.conv_strides"])
    return MemlModel(
        feature,
        attention_hidden=v["model.attention_hidden"] or None,
        head_hidden=v["model.head_hidden"] or None,
    )


def _fusion_hyper(v: dict, memlx: bool, inner_mode: str = "meta_example",
                  loss_weighting: bool = False) -> MetaHyper:
    return MetaHyper(
        inner_lr=v["train.inner_lr"],
        outer_lr=v["train.outer_lr"],
        steps=v["train.steps"],
        optimizer=v["train.optimizer"],
        memlx=memlx,
        memlx_m=v["train.memlx_m"],
        inner_mode=inner_mode,
        loss_weighting=loss_weighting,
    )


def _run_fusion_once(v, seed, seed_dir, train_ds, test_ds, dist, memlx,
                     inner_mode="meta_example", loss_weighting=False, tag=""):
    model = _fusion_model(v)
    hyper = _fusion_hyper(v, memlx, inner_mode, loss_weighting)
    result = meta_train(model, dist, train_ds.images, hyper, seed)
    suffix = f"_{tag}" if tag else ""
    write_trace_csv(result.outer_losses, seed_dir / f"trace{suffix}.csv")
    save_checkpoint(result.params, seed_dir / f"model{suffix}.ckpt")
    points = meta_test(
        model,
        result.params,
        test_ds,
        shots_per_class=v["test.shots_per_class"],
        seed=seed,
        lr=v["test.lr"],
        passes=v["test.passes"],
    )
    write_points_csv(points, seed_dir / f"meta_test{suffix}.csv")
    return result, points


def _run_fusion(cfg: ExperimentConfig, seeds, out_dir: Path) -> dict:
    v = cfg.values
    memlx = cfg.kind == "fusion_memlx"
    traces, curves, per_seed = {}, {}, {}
    all_points = []
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        train_ds, test_ds, pseudo = _fusion_corpus(v, seed)
        dist = build_task_distribution(
            pseudo,
            min_cluster_size=v["tasks.min_cluster_size"],
            query_random_count=v["tasks.query_random_count"],
            balanced_mode=v["tasks.balanced_mode"],
            images=train_ds.images,
            seed=seed,
        )
        save_task_distribution(dist, seed_dir / "tasks.bin")
        result, points = _run_fusion_once(v, seed, seed_dir, train_ds, test_ds, dist, memlx)
        traces[f"seed {seed}"] = result.outer_losses
        curves[f"seed {seed}"] = points
        all_points.append(points)
        per_seed[str(seed)] = {
            "final_accuracy": points[-1][1],
            "meta_test": [[int(t), float(a)] for t, a in points],
            "outer_loss_first_mean": float(np.mean(result.outer_losses[:100])),
            "outer_loss_last_mean": float(np.mean(result.outer_losses[-100:])),
            "num_tasks": dist.num_clusters,
        }
    figures = out_dir / "figures"
    report.render_loss_traces(traces, figures / "loss_trace.png")
    report.render_accuracy_curves(curves, figures / "meta_test.png")
    return {
        "kind": cfg.kind,
        "seeds": [int(s) for s in seeds],
        "per_seed": per_seed,
        "meta_test_mean": _mean_points(all_points),
        "final_accuracy_mean": float(np.mean([p[-1][1] for p in all_points])),
    }


def _cl_datasets(v: dict, seed: int):
    if v["dataset.source"] == "idx":
        train = load_idx(
            resolve_data_path(v["dataset.images"]),
            resolve_data_path(v["dataset.labels"]),
            name="train",
        )
        test = load_idx(
            resolve_data_path(v["dataset.test_images"]),
            resolve_data_path(v["dataset.test_labels"]),
            name="test",
        )
        return train, test
    return make_synthetic_stream(
        v["dataset.num_classes"],
        v["dataset.train_per_class"],
        v["dataset.test_per_class"],
        image_size=v["dataset.image_size"],
        max_shift=v["dataset.max_shift"],
        noise_sigma=v["dataset.noise_sigma"],
        seed=seed,
    )


def _run_cl(cfg: ExperimentConfig, seeds, out_dir: Path) -> dict:
    v = cfg.values
    methods = v["cl.methods"]
    collected = {m: [] for m in methods}
    first_records = {}
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        train_ds, test_ds = _cl_datasets(v, seed)
        for method in methods:
            clcfg = CLConfig(
                classes_per_task=v["cl.classes_per_task"],
                batch_size=v["cl.batch_size"],
                epochs=v["cl.epochs"],
                lr=v["cl.lr"],
                buffer_capacity=v["cl.buffer_capacity"],
                inner_lr=v["cl.inner_lr"],
                outer_lr=v["cl.outer_lr"],
                memlx_m=v["cl.memlx_m"],
                hidden=tuple(v["cl.hidden"]),
            )
            record = run_benchmark(train_ds, test_ds, method, clcfg, seed)
            write_record_csv(record, seed_dir / f"{method}_record.csv")
            metrics = compute_metrics(record)
            write_metrics_json(metrics, seed_dir / f"{method}_metrics.json")
            collected[method].append(metrics)
            first_records.setdefault(method, record)

    aggregate_methods = {}
    for method in methods:
        rows = collected[method]
        aggregate_methods[method] = {
            key + "_mean": float(np.mean([r[key] for r in rows]))
            for key in ("final_acc", "fwt", "bwt", "forgetting")
        }
        aggregate_methods[method]["per_seed"] = {
            str(seed): rows[i] for i, seed in enumerate(seeds)
        }
    figures = out_dir / "figures"
    report.render_method_bars(
        {m: aggregate_methods[m]["final_acc_mean"] for m in methods},
        figures / "final_accuracy.png",
    )
    curves = {}
    for method, record in first_records.items():
        matrix = record.acc_matrix
        curves[method] = [
            (t + 1, float(np.mean(matrix[t, : t + 1]))) for t in range(len(matrix))
        ]
        report.render_task_matrix(matrix, figures / f"{method}_matrix.png", title=method)
    report.render_accuracy_curves(curves, figures / "stream_accuracy.png", xlabel="tasks seen")
    return {
        "kind": cfg.kind,
        "seeds": [int(s) for s in seeds],
        "methods": aggregate_methods,
    }


def _run_ablation_single(cfg: ExperimentConfig, seeds, out_dir: Path) -> dict:
    v = cfg.values
    modes = v["ablation.inner_modes"]
    per_mode_points = {m: [] for m in modes}
    per_mode_steps = {m: [] for m in modes}
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        train_ds, test_ds, pseudo = _fusion_corpus(v, seed)
        dist = build_task_distribution(
            pseudo,
            min_cluster_size=v["tasks.min_cluster_size"],
            query_random_count=v["tasks.query_random_count"],
            balanced_mode=v["tasks.balanced_mode"],
            images=train_ds.images,
            seed=seed,
        )
        save_task_distribution(dist, seed_dir / "tasks.bin")
        for mode in modes:
            result, points = _run_fusion_once(
                v, seed, seed_dir, train_ds, test_ds, dist, memlx=False,
                inner_mode=mode, tag=mode,
            )
            per_mode_points[mode].append(points)
            per_mode_steps[mode].append(float(np.mean(result.inner_steps)))
    aggregate = {
        "kind": cfg.kind,
        "seeds": [int(s) for s in seeds],
        "modes": {
            mode: {
                "meta_test_mean": _mean_points(per_mode_points[mode]),
                "final_accuracy_mean": float(
                    np.mean([p[-1][1] for p in per_mode_points[mode]])
                ),
                "inner_steps_per_task_mean": float(np.mean(per_mode_steps[mode])),
            }
            for mode in modes
        },
    }
    curves = {
        mode: [tuple(p) for p in aggregate["modes"][mode]["meta_test_mean"]] for mode in modes
    }
    report.render_accuracy_curves(curves, out_dir / "figures" / "inner_mode_comparison.png")
    report.render_method_bars(
        {m: aggregate["modes"][m]["final_accuracy_mean"] for m in modes},
        out_dir / "figures" / "inner_mode_final.png",
    )
    return aggregate


def _run_ablation_balanced(cfg: ExperimentConfig, seeds, out_dir: Path) -> dict:
    v = cfg.values
    modes = v["ablation.balance_modes"]
    per_mode_points = {m: [] for m in modes}
    size_stats = {m: [] for m in modes}
    for seed in seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        train_ds, test_ds, pseudo = _fusion_corpus(v, seed)
        for mode in modes:
            build_mode = "off" if mode == "loss_weight" else mode
            dist = build_task_distribution(
                pseudo,
                min_cluster_size=v["tasks.min_cluster_size"],
                query_random_count=v["tasks.query_random_count"],
                balanced_mode=build_mode,
                images=train_ds.images,
                seed=seed,
            )
            sizes = dist.cluster_sizes
            size_stats[mode].append(
                {
                    "num_tasks": int(dist.num_clusters),
                    "min_size": int(sizes.min()),
                    "max_size": int(sizes.max()),
                    "mean_size": float(sizes.mean()),
                }
            )
            _, points = _run_fusion_once(
                v, seed, seed_dir, train_ds, test_ds, dist, memlx=False,
                loss_weighting=(mode == "loss_weight"), tag=mode,
            )
            per_mode_points[mode].append(points)
    aggregate = {
        "kind": cfg.kind,
        "seeds": [int(s) for s in seeds],
        "modes": {
            mode: {
                "meta_test_mean": _mean_points(per_mode_points[mode]),
                "final_accuracy_mean": float(
                    np.mean([p[-1][1] for p in per_mode_points[mode]])
                ),
                "task_sizes": {str(seed): size_stats[mode][i] for i, seed in enumerate(seeds)},
            }
            for mode in modes
        },
    }
    curves = {
        mode: [tuple(p) for p in aggregate["modes"][mode]["meta_test_mean"]] for mode in modes
    }
    report.render_accuracy_curves(curves, out_dir / "figures" / "balance_mode_comparison.png")
    report.render_method_bars(
        {m: aggregate["modes"][m]["final_accuracy_mean"] for m in modes},
        out_dir / "figures" / "balance_mode_final.png",
    )
    return aggregate


_RUNNERS = {
    "fusion_meml": _run_fusion,
    "fusion_memlx": _run_fusion,
    "cl_bench": _run_cl,
    "ablation_single_vs_multi": _run_ablation_single,
    "ablation_balanced_vs_unbalanced": _run_ablation_balanced,
}


def run_experiment(
    cfg: ExperimentConfig, seed_override=None, out_dir_override=None
) -> Path:
    """Run one configured experiment; returns the output directory."""
    seeds = list(seed_override) if seed_override else list(cfg.seeds)
    out_dir = Path(out_dir_override or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    resolved["seeds"] = [int(s) for s in seeds]
    resolved["out_dir"] = str(out_dir)
    write_json(resolved, out_dir / "config.json")
    write_json(
        {"package_version": __version__, "config_digest": config_digest(resolved)},
        out_dir / "manifest.json",
    )
    aggregate = _RUNNERS[cfg.kind](cfg, seeds, out_dir)
    write_json(aggregate, out_dir / "aggregate.json")
    return out_dir
