"""Class-incremental benchmark: naive fine-tuning, experience replay, and
meta-example replay, with transfer/forgetting metrics over the run record."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .augment import AugRanges, DEFAULT_RANGES, select_worst_batch
from .data import ClassStream, Dataset, make_class_stream
from .meml import MetaExample, inner_update
from .models import MemlModel, MlpFeatures, fast_params
from .rng import seed_stream
from .tensor import DivergenceError, Tensor


@dataclass
class ReplayBuffer:
    """Fixed-capacity reservoir over (image, label) pairs."""

    capacity: int
    items: list = field(default_factory=list)
    seen_count: int = 0

    def __len__(self) -> int:
        return len(self.items)


def reservoir_insert(buffer: ReplayBuffer, image: np.ndarray, label: int, rng) -> None:
    """Classic reservoir step: keep each offered item with probability
    capacity / seen_count once the buffer is full."""
    if buffer.capacity > 0:
        if len(buffer.items) < buffer.capacity:
            buffer.items.append((image, label))
        else:
            j = int(rng.integers(0, buffer.seen_count + 1))
            if j < buffer.capacity:
                buffer.items[j] = (image, label)
    buffer.seen_count += 1


def sample_buffer(buffer: ReplayBuffer, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray] | None:
    if not buffer.items:
        return None
    picks = rng.choice(len(buffer.items), size=batch_size, replace=len(buffer.items) < batch_size)
    images = np.stack([buffer.items[i][0] for i in picks])
    labels = np.array([buffer.items[i][1] for i in picks], dtype=np.int64)
    return images, labels


@dataclass
class CLConfig:
    """Shared knobs for the three benchmark methods."""

    classes_per_task: int = 2
    batch_size: int = 10
    epochs: int = 1
    lr: float = 0.05
    buffer_capacity: int = 500
    inner_lr: float = 0.1
    outer_lr: float = 0.1
    memlx: bool = False
    memlx_m: int = 3
    aug_ranges: AugRanges = DEFAULT_RANGES
    hidden: tuple = (100, 100)


@dataclass
class CLRunRecord:
    """Accuracy matrix of one sequential run.

    acc_matrix[i][j] is percent accuracy on task j after finishing task i;
    entries above the diagonal hold tasks not yet trained at that checkpoint.
    """

    method: str
    acc_matrix: np.ndarray
    random_init_acc: np.ndarray
    final_acc: float
    inner_steps: list = field(default_factory=list)


def build_model(dataset: Dataset, hidden=(100, 100)) -> MemlModel:
    _, c, h, w = dataset.images.shape
    return MemlModel(MlpFeatures(c * h * w, list(hidden)), head_hidden=None)


def evaluate_tasks(model: MemlModel, params, test_sets) -> np.ndarray:
    """Percent accuracy per task under full-head argmax (no task oracle)."""
    return np.array([model.accuracy(params, images, labels) for images, labels in test_sets])


def split_test_sets(test_ds: Dataset, stream: ClassStream) -> list:
    sets = []
    for group in stream.task_classes:
        mask = np.isin(test_ds.labels, group)
        sets.append((test_ds.images[mask], test_ds.labels[mask]))
    return sets


def _batches(indices: np.ndarray, batch_size: int, rng) -> list:
    order = rng.permutation(len(indices))
    shuffled = indices[order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _step_on_loss(params, loss, lr, context: str):
    if not np.isfinite(float(loss.data)):
        raise DivergenceError(f"{context}: loss is non-finite")
    T.zero_grad(params)
    T.backward(loss)
    return T.sgd_step(params, T.grads_of(params), lr)


def run_naive(
    model: MemlModel, train_ds: Dataset, stream: ClassStream, test_sets, cfg: CLConfig, seed: int = 0
) -> CLRunRecord:
    """Plain SGD over the stream; no mitigation, the forgetting baseline."""
    params = model.init_params(seed_stream(seed, "cl", "init"), train_ds.class_count)
    rng_data = seed_stream(seed, "cl", "order")
    random_init = evaluate_tasks(model, params, test_sets)
    rows = []
    for task_indices in stream.task_indices:
        for _ in range(cfg.epochs):
            for batch in _batches(task_indices, cfg.batch_size, rng_data):
                loss = T.cross_entropy(
                    model.forward_logits(params, train_ds.images[batch]), train_ds.labels[batch]
                )
                params = _step_on_loss(params, loss, cfg.lr, "naive")
        rows.append(evaluate_tasks(model, params, test_sets))
    matrix = np.vstack(rows)
    return CLRunRecord("naive", matrix, random_init, float(matrix[-1].mean()))


def run_er(
    model: MemlModel, train_ds: Dataset, stream: ClassStream, test_sets, cfg: CLConfig, seed: int = 0
) -> CLRunRecord:
    """Experience replay: current loss plus an equal-size buffer batch loss;
    samples enter the reservoir after the step."""
    params = model.init_params(seed_stream(seed, "cl", "init"), train_ds.class_count)
    rng_data = seed_stream(seed, "cl", "order")
    rng_buffer = seed_stream(seed, "cl", "buffer")
    buffer = ReplayBuffer(cfg.buffer_capacity)
    random_init = evaluate_tasks(model, params, test_sets)
    rows = []
    for task_indices in stream.task_indices:
        for _ in range(cfg.epochs):
            for batch in _batches(task_indices, cfg.batch_size, rng_data):
                images, labels = train_ds.images[batch], train_ds.labels[batch]
                loss = T.cross_entropy(model.forward_logits(params, images), labels)
                replay = sample_buffer(buffer, len(batch), rng_buffer)
                if replay is not None:
                    loss = T.add(
                        loss, T.cross_entropy(model.forward_logits(params, replay[0]), replay[1])
                    )
                params = _step_on_loss(params, loss, cfg.lr, "er")
                for i in range(len(batch)):
                    reservoir_insert(buffer, images[i], int(labels[i]), rng_buffer)
        rows.append(evaluate_tasks(model, params, test_sets))
    matrix = np.vstack(rows)
    return CLRunRecord("er", matrix, random_init, float(matrix[-1].mean()))


def run_meml(
    model: MemlModel, train_ds: Dataset, stream: ClassStream, test_sets, cfg: CLConfig, seed: int = 0
) -> CLRunRecord:
    """Meta-example replay: per incoming batch, one pooled inner step per
    class present, then a single outer step on current plus buffer data."""
    params = model.init_params(seed_stream(seed, "cl", "init"), train_ds.class_count)
    rng_data = seed_stream(seed, "cl", "order")
    rng_buffer = seed_stream(seed, "cl", "buffer")
    rng_aug = seed_stream(seed, "cl", "memlx")
    buffer = ReplayBuffer(cfg.buffer_capacity)
    random_init = evaluate_tasks(model, params, test_sets)
    rows = []
    inner_steps = []
    method = "meml_memlx" if cfg.memlx else "meml"
    for task_indices in stream.task_indices:
        for _ in range(cfg.epochs):
            for batch in _batches(task_indices, cfg.batch_size, rng_data):
                raw_images, labels = train_ds.images[batch], train_ds.labels[batch]
                images = raw_images
                if cfg.memlx:
                    images = select_worst_batch(
                        model, params, raw_images, labels, cfg.memlx_m, rng_aug, cfg.aug_ranges
                    ).images

                count = 0
                for c in sorted(set(int(v) for v in labels)):
                    members = images[labels == c]
                    feats = model.features(params, members)
                    weights, pooled = model.attention_pool(params, Tensor(feats.data))
                    example = MetaExample(weights=weights, pooled=pooled)
                    params, _ = inner_update(model, params, example, c, cfg.inner_lr)
                    count += 1
                inner_steps.append(count)

                out_images, out_labels = images, labels
                replay = sample_buffer(buffer, len(batch), rng_buffer)
                if replay is not None:
                    rep_images, rep_labels = replay
                    if cfg.memlx:
                        rep_images = select_worst_batch(
                            model, params, rep_images, rep_labels, cfg.memlx_m, rng_aug, cfg.aug_ranges
                        ).images
                    out_images = np.concatenate([out_images, rep_images])
                    out_labels = np.concatenate([out_labels, rep_labels])
                loss = T.cross_entropy(model.forward_logits(params, out_images), out_labels)
                params = _step_on_loss(params, loss, cfg.outer_lr, method)
                for i in range(len(batch)):
                    reservoir_insert(buffer, raw_images[i], int(labels[i]), rng_buffer)
        rows.append(evaluate_tasks(model, params, test_sets))
    matrix = np.vstack(rows)
    return CLRunRecord(method, matrix, random_init, float(matrix[-1].mean()), inner_steps)


METHODS = ("naive", "er", "meml", "meml_memlx")


def run_benchmark(
    train_ds: Dataset, test_ds: Dataset, method: str, cfg: CLConfig, seed: int = 0
) -> CLRunRecord:
    """Build the stream and model, then run one method end to end."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    stream = make_class_stream(train_ds, cfg.classes_per_task)
    test_sets = split_test_sets(test_ds, make_class_stream(test_ds, cfg.classes_per_task))
    model = build_model(train_ds, cfg.hidden)
    if method == "naive":
        return run_naive(model, train_ds, stream, test_sets, cfg, seed)
    if method == "er":
        return run_er(model, train_ds, stream, test_sets, cfg, seed)
    if method == "meml_memlx":
        cfg = CLConfig(**{**cfg.__dict__, "memlx": True})
    return run_meml(model, train_ds, stream, test_sets, cfg, seed)


def compute_metrics(record: CLRunRecord) -> dict[str, float]:
    """Forward transfer, backward transfer, and forgetting from the matrix.

    FWT averages accuracy on each task just before training it, minus the
    random-init accuracy of that task. BWT averages the final-row change on
    earlier tasks. Forgetting averages each earlier task's drop from its best
    checkpoint to the final one. NaN entries (untrained checkpoints) are
    skipped where a maximum is taken.
    """
    A = np.asarray(record.acc_matrix, dtype=np.float64)
    n = len(A)
    fwt_terms = [
        A[j - 1, j] - record.random_init_acc[j]
        for j in range(1, n)
        if np.isfinite(A[j - 1, j])
    ]
    bwt_terms = [A[n - 1, j] - A[j, j] for j in range(n - 1)]
    forget_terms = [float(np.nanmax(A[:, j])) - A[n - 1, j] for j in range(n - 1)]
    return {
        "final_acc": float(record.final_acc),
        "fwt": float(np.mean(fwt_terms)) if fwt_terms else float("nan"),
        "bwt": float(np.mean(bwt_terms)) if bwt_terms else float("nan"),
        "forgetting": float(np.mean(forget_terms)) if forget_terms else float("nan"),
    }


def write_record_csv(record: CLRunRecord, path) -> None:
    n_tasks = record.acc_matrix.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint"] + [f"task_{j}" for j in range(n_tasks)])
        writer.writerow(["random_init"] + [f"{v:.4f}" for v in record.random_init_acc])
        for i, row in enumerate(record.acc_matrix):
            writer.writerow([f"after_task_{i}"] + [f"{v:.4f}" for v in row])


def read_record_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    random_init = np.array([float(v) for v in rows[1][1:]])
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[2:]])
    return matrix, random_init


def write_metrics_json(metrics: Mapping[str, float], path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(dict(metrics), sort_keys=True, indent=2) + "\n")
