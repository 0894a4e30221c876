"""Meta-continual training and testing on unsupervised task distributions.

Training alternates two updates per sampled task. The inner update pools the
support set into a single meta-example through attention and takes one
gradient step on the fast weights (attention + head). The outer update runs
the query set through the per-sample path (no pooling) and steps every
parameter, treating the inner result as a constant (first-order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .augment import AugRanges, DEFAULT_RANGES, memlx_select
from .data import Dataset
from .embedding import TaskDistribution, sample_task
from .models import HEAD_PREFIX, MemlModel, detach_params, fast_params, subdict
from .rng import seed_stream
from .tensor import AdamState, DivergenceError, Tensor

INNER_MODES = ("meta_example", "mean_pool", "single_random", "trajectory")


@dataclass
class MetaExample:
    """Attention weights over a support set and the pooled representative."""

    weights: Tensor  # (K,)
    pooled: Tensor  # (1, d)


@dataclass
class MetaHyper:
    """Hyperparameters for one meta-training run."""

    inner_lr: float = 0.1
    outer_lr: float = 1e-4
    steps: int = 2000
    optimizer: str = "adam"  # adam | sgd, outer loop only
    memlx: bool = False
    memlx_m: int = 3
    aug_ranges: AugRanges = DEFAULT_RANGES
    inner_mode: str = "meta_example"
    loss_weighting: bool = False
    weight_clip: tuple = (0.25, 4.0)

    def __post_init__(self):
        if self.inner_mode not in INNER_MODES:
            raise ValueError(f"unknown inner_mode {self.inner_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def pool_meta_example(model: MemlModel, params: Mapping[str, Tensor], support_images) -> MetaExample:
    """Embed the support set and pool it through attention.

    The feature pass is detached before pooling: the inner step must see the
    feature extractor as fixed, so its gradient under the inner loss is
    exactly zero by construction.
    """
    feats = model.features(params, support_images)
    frozen = Tensor(feats.data)
    weights, pooled = model.attention_pool(params, frozen)
    return MetaExample(weights=weights, pooled=pooled)


def inner_update(
    model: MemlModel,
    params: Mapping[str, Tensor],
    example: MetaExample,
    label: int,
    lr: float,
    loss_scale: float = 1.0,
) -> tuple[dict[str, Tensor], float]:
    """One gradient step on the fast weights from the pooled meta-example.

    Always a single step, whatever the support size. lr 0 leaves the
    parameters untouched but still reports the loss.
    """
    loss = T.cross_entropy(model.head_logits(params, example.pooled), np.array([label]))
    if loss_scale != 1.0:
        loss = T.mul(loss, float(loss_scale))
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError("inner loss is non-finite")
    if lr == 0:
        return dict(params), value
    T.zero_grad(params)
    T.backward(loss)
    fast = fast_params(params)
    out = dict(params)
    out.update(T.sgd_step(fast, T.grads_of(fast), lr))
    return out, value


def outer_update(
    model: MemlModel,
    params: Mapping[str, Tensor],
    query_images,
    query_labels,
    lr: float,
    opt_state: AdamState | None = None,
    optimizer: str = "adam",
    loss_scale: float = 1.0,
) -> tuple[dict[str, Tensor], AdamState | None, float]:
    """One step on all parameters from the per-sample query loss.

    The query set skips pooling entirely, so attention parameters receive a
    zero outer gradient and learn only through inner steps. lr 0 leaves the
    parameters as given (the fast weights keep any inner-step values).
    """
    loss = T.cross_entropy(model.forward_logits(params, query_images), np.asarray(query_labels))
    if loss_scale != 1.0:
        loss = T.mul(loss, float(loss_scale))
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError("outer loss is non-finite")
    if lr == 0:
        return dict(params), opt_state, value
    T.zero_grad(params)
    T.backward(loss)
    grads = T.grads_of(params)
    if optimizer == "adam":
        state = opt_state if opt_state is not None else AdamState()
        new_params, state = T.adam_step(params, grads, state, lr)
        return new_params, state, value
    return T.sgd_step(params, grads, lr), opt_state, value


def _inner_phase(model, params, support_images, label, hyper, rng, loss_scale):
    """Dispatch on inner_mode; returns (params, last loss, step count)."""
    mode = hyper.inner_mode
    if mode == "meta_example":
        example = pool_meta_example(model, params, support_images)
        out, value = inner_update(model, params, example, label, hyper.inner_lr, loss_scale)
        return out, value, 1

    feats = model.features(params, support_images).data
    n = len(feats)
    if mode == "mean_pool":
        pooled = Tensor(feats.mean(axis=0, keepdims=True))
        example = MetaExample(weights=Tensor(np.full(n, 1.0 / n)), pooled=pooled)
        out, value = inner_update(model, params, example, label, hyper.inner_lr, loss_scale)
        return out, value, 1
    if mode == "single_random":
        i = int(rng.integers(n))
        example = MetaExample(weights=None, pooled=Tensor(feats[i : i + 1]))
        out, value = inner_update(model, params, example, label, hyper.inner_lr, loss_scale)
        return out, value, 1
    # trajectory: one step per support sample, in set order
    out = dict(params)
    value = float("nan")
    for i in range(n):
        example = MetaExample(weights=None, pooled=Tensor(feats[i : i + 1]))
        out, value = inner_update(model, out, example, label, hyper.inner_lr, loss_scale)
    return out, value, n


@dataclass
class MetaTrainResult:
    params: dict[str, Tensor]
    outer_losses: np.ndarray
    inner_losses: np.ndarray
    inner_steps: np.ndarray
    memlx_support_choices: np.ndarray | None = None
    memlx_query_choices: np.ndarray | None = None


def meta_train(
    model: MemlModel,
    distribution: TaskDistribution,
    images: np.ndarray,
    hyper: MetaHyper,
    seed: int = 0,
) -> MetaTrainResult:
    """Run the full meta-training loop over sampled tasks.

    Deterministic for a fixed (distribution, hyper, seed): the task stream,
    initialization, and any augmentation draws all come from seeded streams.
    """
    params = model.init_params(seed_stream(seed, "init"), distribution.num_pseudo_classes)
    rng_tasks = seed_stream(seed, "tasks")
    rng_aug = seed_stream(seed, "memlx")
    rng_inner = seed_stream(seed, "inner")
    opt_state = AdamState() if hyper.optimizer == "adam" else None

    outer_losses = np.empty(hyper.steps)
    inner_losses = np.empty(hyper.steps)
    inner_steps = np.empty(hyper.steps, dtype=np.int64)
    sup_choices = np.empty(hyper.steps, dtype=np.int64) if hyper.memlx else None
    qry_choices = np.empty(hyper.steps, dtype=np.int64) if hyper.memlx else None

    mean_size = distribution.mean_cluster_size
    for step in range(hyper.steps):
        episode = sample_task(distribution, images, rng_tasks)
        support, query = episode.support_images, episode.query_images
        if hyper.memlx:
            chosen = memlx_select(
                model,
                params,
                support,
                episode.support_label,
                query,
                episode.query_labels,
                hyper.memlx_m,
                rng_aug,
                hyper.aug_ranges,
            )
            support, query = chosen.support_images, chosen.query_images
            sup_choices[step] = chosen.support_choice
            qry_choices[step] = chosen.query_choice
        scale = 1.0
        if hyper.loss_weighting:
            lo, hi = hyper.weight_clip
            scale = float(np.clip(mean_size / episode.cluster_size, lo, hi))
        try:
            # Overflow is detected at the loss and reported as DivergenceError,
            # so numpy's per-op warnings are redundant here.
            with np.errstate(over="ignore", invalid="ignore"):
                params, inner_losses[step], inner_steps[step] = _inner_phase(
                    model, params, support, episode.support_label, hyper, rng_inner, scale
                )
                params, opt_state, outer_losses[step] = outer_update(
                    model,
                    params,
                    query,
                    episode.query_labels,
                    hyper.outer_lr,
                    opt_state,
                    hyper.optimizer,
                    scale,
                )
        except DivergenceError as err:
            raise DivergenceError(f"meta-training diverged at step {step}: {err}") from err
    return MetaTrainResult(
        params=params,
        outer_losses=outer_losses,
        inner_losses=inner_losses,
        inner_steps=inner_steps,
        memlx_support_choices=sup_choices,
        memlx_query_choices=qry_choices,
    )


def meta_test(
    model: MemlModel,
    params: Mapping[str, Tensor],
    dataset: Dataset,
    shots_per_class: int = 5,
    seed: int = 0,
    lr: float = 0.1,
    passes: int = 1,
    eval_points: list | None = None,
) -> list[tuple[int, float]]:
    """Sequential evaluation on unseen classes with a frozen representation.

    The head is re-initialized for the test label space; feature and
    attention weights stay fixed. Classes arrive one at a time; each
    contributes its pooled meta-example for `passes` head-only gradient
    steps. At each requested checkpoint (number of classes seen so far) the
    held-out samples of all seen classes are scored by full-head argmax.
    Returns [(classes_seen, accuracy_percent), ...].
    """
    classes = dataset.class_count
    if classes < 1:
        raise ValueError("meta_test needs a dataset with at least one class")
    if shots_per_class < 1:
        raise ValueError(f"shots_per_class must be >= 1, got {shots_per_class}")
    if eval_points is None:
        eval_points = sorted(set(list(range(2, classes + 1, 2)) + [classes]))
    rng = seed_stream(seed, "meta-test", "shots")

    shot_idx, held_idx = [], []
    for c in range(classes):
        members = dataset.class_indices(c)
        if len(members) <= shots_per_class:
            raise ValueError(
                f"class {c} has {len(members)} samples; needs more than "
                f"{shots_per_class} to leave a held-out set"
            )
        picks = rng.choice(len(members), size=shots_per_class, replace=False)
        mask = np.zeros(len(members), dtype=bool)
        mask[picks] = True
        shot_idx.append(members[mask])
        held_idx.append(members[~mask])

    # Frozen slow/attention weights as constants; fresh trainable head. The
    # output layer starts at zero so unseen classes never outscore seen ones.
    eval_params = detach_params(
        {k: v for k, v in params.items() if not k.startswith(HEAD_PREFIX)}
    )
    eval_params.update(
        model._head_params(seed_stream(seed, "meta-test", "head"), classes, zero_out=True)
    )

    results = []
    for t in range(classes):
        example = pool_meta_example(model, eval_params, dataset.images[shot_idx[t]])
        for _ in range(passes):
            head = subdict(eval_params, HEAD_PREFIX)
            loss = T.cross_entropy(
                model.head_logits(eval_params, example.pooled), np.array([t])
            )
            if not np.isfinite(float(loss.data)):
                raise DivergenceError(f"meta-test loss non-finite at class {t}")
            T.zero_grad(head)
            T.backward(loss)
            eval_params.update(T.sgd_step(head, T.grads_of(head), lr))
        seen = t + 1
        if seen in eval_points:
            held = np.concatenate(held_idx[:seen])
            acc = model.accuracy(eval_params, dataset.images[held], dataset.labels[held])
            results.append((seen, acc))
    return results


_CKPT_MAGIC = b"FLCK"
_CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    """Versioned binary parameter dump; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name in sorted(params):
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return params
