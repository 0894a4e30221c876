"""Unsupervised task construction: embedding learning, clustering, and the
unbalanced task distribution sampled during meta-training."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import horizontal_flip, translate_image, vertical_flip
from .data import Dataset
from .rng import seed_stream
from .tensor import DivergenceError, Tensor


class EmptyDistributionError(ValueError):
    """No cluster survived the size requirements."""


@dataclass
class EmbeddingSet:
    """Row-aligned embedding vectors for a dataset."""

    vectors: np.ndarray
    indices: np.ndarray


@dataclass
class Encoder:
    """Trained autoencoder; transform() yields the latent codes."""

    in_dim: int
    hidden: int
    latent_dim: int
    params: dict[str, Tensor]
    initial_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    def _flat(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(images, dtype=np.float64).reshape(len(images), -1)

    def transform(self, images: np.ndarray) -> np.ndarray:
        x = Tensor(self._flat(images))
        h = T.relu(T.linear(x, self.params["enc0.w"], self.params["enc0.b"]))
        return T.linear(h, self.params["enc1.w"], self.params["enc1.b"]).data

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        z = Tensor(self.transform(images))
        h = T.relu(T.linear(z, self.params["dec0.w"], self.params["dec0.b"]))
        return T.linear(h, self.params["dec1.w"], self.params["dec1.b"]).data

    def reconstruction_error(self, images: np.ndarray) -> float:
        """Mean squared error over all pixels."""
        flat = self._flat(images)
        return float(np.mean((self.reconstruct(images) - flat) ** 2))


def _ae_forward(params, x: Tensor) -> Tensor:
    h = T.relu(T.linear(x, params["enc0.w"], params["enc0.b"]))
    z = T.linear(h, params["enc1.w"], params["enc1.b"])
    h2 = T.relu(T.linear(z, params["dec0.w"], params["dec0.b"]))
    return T.linear(h2, params["dec1.w"], params["dec1.b"])


def train_autoencoder(
    dataset: Dataset,
    latent_dim: int = 16,
    hidden: int = 64,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> Encoder:
    """Fit a two-layer autoencoder by Adam on mean squared reconstruction error.

    epochs 0 returns the initialized encoder unchanged. Raises
    DivergenceError with the epoch index if the loss goes non-finite.
    """
    flat = dataset.images.reshape(len(dataset), -1)
    in_dim = flat.shape[1]
    rng = seed_stream(seed, "autoencoder")

    def init(shape, fan):
        return Tensor(rng.uniform(-1.0 / np.sqrt(fan), 1.0 / np.sqrt(fan), shape), requires_grad=True)

    params = {
        "enc0.w": init((in_dim, hidden), in_dim),
        "enc0.b": init((hidden,), in_dim),
        "enc1.w": init((hidden, latent_dim), hidden),
        "enc1.b": init((latent_dim,), hidden),
        "dec0.w": init((latent_dim, hidden), latent_dim),
        "dec0.b": init((hidden,), latent_dim),
        "dec1.w": init((hidden, in_dim), hidden),
        "dec1.b": init((in_dim,), hidden),
    }
    encoder = Encoder(in_dim, hidden, latent_dim, params)
    encoder.initial_loss = encoder.reconstruction_error(dataset.images)

    state = T.AdamState()
    for epoch in range(epochs):
        order = rng.permutation(len(flat))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = Tensor(flat[order[start : start + batch_size]])
            # overflow surfaces as DivergenceError below, not per-op warnings
            with np.errstate(over="ignore", invalid="ignore"):
                diff = T.sub(_ae_forward(params, batch), batch)
                loss = T.mul(diff, diff).mean()
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"autoencoder loss non-finite at epoch {epoch}")
            T.zero_grad(params)
            T.backward(loss)
            params, state = T.adam_step(params, T.grads_of(params), state, lr)
            epoch_losses.append(value)
        encoder.params = params
        encoder.loss_history.append(float(np.mean(epoch_losses)))
    encoder.params = params
    return encoder


def embed(encoder: Encoder, dataset: Dataset) -> EmbeddingSet:
    return EmbeddingSet(
        vectors=encoder.transform(dataset.images),
        indices=np.arange(len(dataset)),
    )


def _assign(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties break toward the lowest centroid index."""
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _inertia(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((X - centroids[labels]) ** 2).sum())


def _plus_plus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = X[rng.integers(n)]
        else:
            centroids[i] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    Z, k: int, max_iters: int = 100, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ start.

    Empty clusters are re-seeded at the point farthest from its assigned
    centroid. Returns (pseudo_labels, centroids).
    """
    X = np.asarray(getattr(Z, "vectors", Z), dtype=np.float64)
    n = len(X)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available samples")
    rng = seed_stream(seed, "kmeans")
    centroids = _plus_plus_init(X, k, rng)
    labels = None
    for _ in range(max_iters):
        new_labels = _assign(X, centroids)
        for c in range(k):
            if not np.any(new_labels == c):
                spread = ((X - centroids[new_labels]) ** 2).sum(axis=1)
                far = int(np.argmax(spread))
                centroids[c] = X[far]
                new_labels[far] = c
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = X[labels == c].mean(axis=0)
    return labels, centroids


# Deterministic transform cycle used to pad small clusters in augment mode.
_PAD_TRANSFORMS = (
    horizontal_flip,
    vertical_flip,
    lambda img: translate_image(img, 1, 0),
    lambda img: translate_image(img, 0, 1),
    lambda img: translate_image(img, -1, 0),
    lambda img: translate_image(img, 0, -1),
)


@dataclass
class TaskDistribution:
    """Clusters over a corpus, ready to be sampled as training tasks.

    Cluster index arrays address the corpus images first and any appended
    augmentation extras after them (offset by the corpus length).
    """

    clusters: list
    cluster_labels: np.ndarray
    pseudo_labels: np.ndarray
    query_random_count: int
    corpus_size: int
    extra_images: np.ndarray | None = None
    extra_labels: np.ndarray | None = None

    def __post_init__(self):
        owners = []
        for ci, members in enumerate(self.clusters):
            owners.append(np.full(len(members), ci, dtype=np.int64))
        self._flat_indices = (
            np.concatenate(self.clusters) if self.clusters else np.empty(0, dtype=np.int64)
        )
        self._flat_owner = np.concatenate(owners) if owners else np.empty(0, dtype=np.int64)

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def num_pseudo_classes(self) -> int:
        return int(self.pseudo_labels.max()) + 1 if self.pseudo_labels.size else 0

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    @property
    def mean_cluster_size(self) -> float:
        return float(self.cluster_sizes.mean()) if self.clusters else 0.0

    def label_of_index(self, idx: int) -> int:
        if idx < self.corpus_size:
            return int(self.pseudo_labels[idx])
        return int(self.extra_labels[idx - self.corpus_size])

    def resolve_images(self, images: np.ndarray, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if self.extra_images is None or idx.size == 0 or idx.max() < self.corpus_size:
            return images[idx]
        out = np.empty((len(idx),) + images.shape[1:], dtype=np.float64)
        for row, i in enumerate(idx):
            out[row] = images[i] if i < self.corpus_size else self.extra_images[i - self.corpus_size]
        return out


def _balance_target(sizes: list, min_cluster_size: int) -> int:
    return max(min_cluster_size, int(round(float(np.mean(sizes)))))


def build_task_distribution(
    pseudo_labels: np.ndarray,
    min_cluster_size: int = 3,
    query_random_count: int = 10,
    balanced_mode: str = "off",
    images: np.ndarray | None = None,
    seed: int = 0,
) -> TaskDistribution:
    """Group samples by pseudo-label into the task distribution.

    balanced_mode:
      off        keep clusters with at least min_cluster_size members.
      threshold  drop clusters below the mean surviving size and truncate the
                 rest to it, yielding equally sized tasks.
      augment    keep every cluster; truncate large ones to the mean size and
                 pad small ones to it with flip/shift duplicates (needs images).
    """
    if min_cluster_size < 3:
        raise ValueError(f"min_cluster_size must be >= 3, got {min_cluster_size}")
    if query_random_count < 0:
        raise ValueError(f"query_random_count must be >= 0, got {query_random_count}")
    if balanced_mode not in ("off", "threshold", "augment"):
        raise ValueError(f"unknown balanced_mode {balanced_mode!r}")
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    n = len(pseudo_labels)
    k = int(pseudo_labels.max()) + 1 if n else 0
    groups = [(c, np.flatnonzero(pseudo_labels == c)) for c in range(k)]
    groups = [(c, g) for c, g in groups if len(g) > 0]

    clusters: list = []
    labels: list = []
    extra_images: list = []
    extra_labels: list = []

    if balanced_mode == "off":
        for c, g in groups:
            if len(g) >= min_cluster_size:
                clusters.append(g)
                labels.append(c)
    elif balanced_mode == "threshold":
        target = _balance_target([len(g) for _, g in groups], min_cluster_size)
        for c, g in groups:
            if len(g) >= target:
                clusters.append(g[:target])
                labels.append(c)
    else:  # augment
        if images is None:
            raise ValueError("balanced_mode='augment' needs the corpus images")
        target = _balance_target([len(g) for _, g in groups], min_cluster_size)
        for c, g in groups:
            if len(g) >= target:
                clusters.append(g[:target])
            else:
                pads = []
                for j in range(target - len(g)):
                    source = images[g[j % len(g)]]
                    transform = _PAD_TRANSFORMS[j % len(_PAD_TRANSFORMS)]
                    extra_images.append(transform(source))
                    extra_labels.append(c)
                    pads.append(n + len(extra_images) - 1)
                clusters.append(np.concatenate([g, np.array(pads, dtype=np.int64)]))
            labels.append(c)

    if not clusters:
        raise EmptyDistributionError(
            f"no cluster met the size requirements (mode {balanced_mode!r})"
        )
    return TaskDistribution(
        clusters=clusters,
        cluster_labels=np.array(labels, dtype=np.int64),
        pseudo_labels=pseudo_labels,
        query_random_count=int(query_random_count),
        corpus_size=n,
        extra_images=np.stack(extra_images) if extra_images else None,
        extra_labels=np.array(extra_labels, dtype=np.int64) if extra_labels else None,
    )


@dataclass(frozen=True)
class TaskEpisode:
    """One sampled task: a single-cluster support set and a mixed query set."""

    support_images: np.ndarray
    support_label: int
    query_images: np.ndarray
    query_labels: np.ndarray
    cluster_index: int
    cluster_size: int


def sample_task(
    distribution: TaskDistribution, images: np.ndarray, rng: np.random.Generator
) -> TaskEpisode:
    """Draw one task uniformly over clusters (with replacement across calls).

    Two thirds of the cluster (rounded up) become the support set; the rest
    plus query_random_count samples from other clusters form the query set.
    """
    ci = int(rng.integers(distribution.num_clusters))
    members = distribution.clusters[ci]
    n = len(members)
    perm = rng.permutation(n)
    n_support = (2 * n + 2) // 3  # ceil(2n/3)
    support_idx = members[perm[:n_support]]
    query_idx = members[perm[n_support:]]

    count = distribution.query_random_count
    if count > 0:
        other = distribution._flat_indices[distribution._flat_owner != ci]
        if len(other) == 0:
            raise ValueError("query_random_count > 0 needs at least two clusters")
        picks = rng.choice(len(other), size=count, replace=len(other) < count)
        query_idx = np.concatenate([query_idx, other[picks]])

    query_labels = np.array(
        [distribution.label_of_index(int(i)) for i in query_idx], dtype=np.int64
    )
    return TaskEpisode(
        support_images=distribution.resolve_images(images, support_idx),
        support_label=int(distribution.cluster_labels[ci]),
        query_images=distribution.resolve_images(images, query_idx),
        query_labels=query_labels,
        cluster_index=ci,
        cluster_size=n,
    )


_DIST_MAGIC = b"FLTD"
_DIST_VERSION = 1


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(arr, dtype=dtype)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
    fh.write(data.tobytes())


def _read_array(fh, dtype: str) -> np.ndarray:
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
    return data.reshape(shape).copy()


def save_task_distribution(distribution: TaskDistribution, path) -> None:
    """Versioned binary cache of a task distribution."""
    with open(path, "wb") as fh:
        fh.write(_DIST_MAGIC)
        fh.write(struct.pack("<I", _DIST_VERSION))
        fh.write(
            struct.pack(
                "<qIIB",
                distribution.corpus_size,
                distribution.num_clusters,
                distribution.query_random_count,
                1 if distribution.extra_images is not None else 0,
            )
        )
        _write_array(fh, distribution.pseudo_labels, "<i8")
        _write_array(fh, distribution.cluster_labels, "<i8")
        for members in distribution.clusters:
            _write_array(fh, members, "<i8")
        if distribution.extra_images is not None:
            _write_array(fh, distribution.extra_images, "<f8")
            _write_array(fh, distribution.extra_labels, "<i8")


def load_task_distribution(path) -> TaskDistribution:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DIST_MAGIC:
            raise ValueError(f"{path}: not a task distribution file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _DIST_VERSION:
            raise ValueError(f"{path}: unsupported task distribution version {version}")
        corpus_size, num_clusters, qrc, has_extras = struct.unpack("<qIIB", fh.read(17))
        pseudo_labels = _read_array(fh, "<i8")
        cluster_labels = _read_array(fh, "<i8")
        clusters = [_read_array(fh, "<i8") for _ in range(num_clusters)]
        extra_images = extra_labels = None
        if has_extras:
            extra_images = _read_array(fh, "<f8")
            extra_labels = _read_array(fh, "<i8")
    return TaskDistribution(
        clusters=clusters,
        cluster_labels=cluster_labels,
        pseudo_labels=pseudo_labels,
        query_random_count=int(qrc),
        corpus_size=int(corpus_size),
        extra_images=extra_images,
        extra_labels=extra_labels,
    )
