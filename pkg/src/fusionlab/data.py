"""Dataset handling: IDX file IO, synthetic corpora, class splits, streams."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .augment import translate_image
from .rng import seed_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent dataset request."""


@dataclass
class Dataset:
    """Images shaped (N, C, H, W) with values in [0, 1] and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"count mismatch: {len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.images)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def _read_idx(path, expected_magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) != expected:
        raise DatasetError(f"{path}: truncated body, expected {expected} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an IDX image/label file pair into a single-channel Dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetError(
            f"count mismatch: {images_path} has {len(images)} images, "
            f"{labels_path} has {len(labels)} labels"
        )
    pixels = images.astype(np.float64) / 255.0
    return Dataset(
        images=pixels[:, None, :, :],
        labels=labels.astype(np.int64),
        class_count=int(labels.max()) + 1 if len(labels) else 0,
        name=name,
    )


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel Dataset as an IDX pair (8-bit quantized)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DatasetError(f"IDX export supports single-channel images, got {c} channels")
    if dataset.labels.size and dataset.labels.max() > 255:
        raise DatasetError("IDX labels are bytes; labels above 255 cannot be written")
    pixels = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _quantize(images: np.ndarray) -> np.ndarray:
    # Snap to the 8-bit grid so IDX round-trips are exact.
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def _class_template(size: int, rng: np.random.Generator) -> np.ndarray:
    t = rng.random((size, size))
    t = ndimage.uniform_filter(t, size=3, mode="nearest")
    t = ndimage.uniform_filter(t, size=3, mode="nearest")
    lo, hi = t.min(), t.max()
    return (t - lo) / (hi - lo + 1e-12)


def _bump_templates(count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class templates built from Gaussian bumps on a dark background.

    Sparse localized structure keeps classes distinct the way stroke-based
    image benchmarks are: the bump scale is large relative to small random
    shifts, and the empty background carries no shared signal. Each class
    gets exclusive bump positions when the grid is large enough, otherwise a
    distinct position subset; images too small for either fall back to
    decorrelated smooth fields.
    """
    bump_sigma = size / 9.0
    margin = max(2, int(round(bump_sigma)))
    step = max(3, int(round(1.5 * bump_sigma)))
    centers = [
        (y, x)
        for y in range(margin, size - margin + 1, step)
        for x in range(margin, size - margin + 1, step)
    ]
    n = len(centers)
    if n // count >= 2:
        bumps = min(6, n // count)
        order = rng.permutation(n)
        chosen = [tuple(order[c * bumps : (c + 1) * bumps]) for c in range(count)]
    elif n * (n - 1) // 2 >= count:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        picks = rng.choice(len(pairs), size=count, replace=False)
        chosen = [pairs[p] for p in picks]
    else:
        return _distinct_templates(count, size, rng)
    out = np.empty((count, size, size))
    for c, cells in enumerate(chosen):
        canvas = np.zeros((size, size))
        for cell in cells:
            y, x = centers[cell]
            canvas[y, x] = rng.uniform(0.7, 1.0)
        t = ndimage.gaussian_filter(canvas, sigma=bump_sigma, mode="constant")
        out[c] = t / t.max()
    return out


def _distinct_templates(count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth class templates decorrelated against each other.

    Smoothing alone leaves template pairs sharing most of their low-frequency
    structure (pixel correlations of 0.5 and up), which makes classes
    confusable in a way real image benchmarks are not. Projecting out earlier
    templates keeps each class direction distinct.
    """
    if count > size * size:
        raise DatasetError(f"cannot place {count} distinct templates in {size}x{size} pixels")
    basis: list[np.ndarray] = []
    out = np.empty((count, size, size))
    while len(basis) < count:
        v = _class_template(size, rng).ravel()
        v = v - v.mean()
        for u in basis:
            v = v - (v @ u) * u
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            continue
        v = v / norm
        img = v.reshape(size, size)
        out[len(basis)] = (img - img.min()) / (img.max() - img.min())
        basis.append(v)
    return out


def make_synthetic_fewshot(
    num_classes: int,
    min_per_class: int,
    max_per_class: int,
    image_size: int = 14,
    noise_sigma: float = 0.05,
    seed: int = 0,
    name: str = "synthetic-fewshot",
) -> Dataset:
    """Unlabeled-style corpus of sparse class templates plus pixel noise.

    Per-class sample counts are drawn uniformly from [min_per_class,
    max_per_class]. With noise_sigma 0 every sample of a class is identical.
    """
    if num_classes < 1:
        raise DatasetError(f"num_classes must be >= 1, got {num_classes}")
    if not (1 <= min_per_class <= max_per_class):
        raise DatasetError(
            f"need 1 <= min_per_class <= max_per_class, got {min_per_class}, {max_per_class}"
        )
    rng = seed_stream(seed, "fewshot")
    templates = _bump_templates(num_classes, image_size, rng)
    images, labels = [], []
    for c in range(num_classes):
        template = templates[c]
        count = int(rng.integers(min_per_class, max_per_class + 1))
        noise = rng.standard_normal((count, image_size, image_size)) * noise_sigma
        samples = _quantize(template[None, :, :] + noise)
        images.append(samples[:, None, :, :])
        labels.append(np.full(count, c, dtype=np.int64))
    return Dataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        class_count=num_classes,
        name=name,
    )


def make_synthetic_stream(
    num_classes: int = 10,
    train_per_class: int = 500,
    test_per_class: int = 100,
    image_size: int = 28,
    max_shift: int = 3,
    noise_sigma: float = 0.1,
    seed: int = 0,
    name: str = "synthetic-stream",
) -> tuple[Dataset, Dataset]:
    """Train/test pair for the class-incremental benchmark.

    Each class is a smooth template rendered with a random integer shift, a
    random amplitude, and pixel noise, so classes are learnable but not
    trivially separable by a single pixel.
    """
    rng = seed_stream(seed, "stream", "templates")
    templates = _bump_templates(num_classes, image_size, rng)

    def render(split: str, per_class: int) -> Dataset:
        draw = seed_stream(seed, "stream", split)
        images = np.empty((num_classes * per_class, 1, image_size, image_size))
        labels = np.empty(num_classes * per_class, dtype=np.int64)
        row = 0
        for c in range(num_classes):
            for _ in range(per_class):
                dy = int(draw.integers(-max_shift, max_shift + 1))
                dx = int(draw.integers(-max_shift, max_shift + 1))
                amp = float(draw.uniform(0.7, 1.0))
                img = amp * translate_image(templates[c], dy, dx)
                img = img + noise_sigma * draw.standard_normal((image_size, image_size))
                images[row, 0] = _quantize(img)
                labels[row] = c
                row += 1
        return Dataset(images, labels, num_classes, name=f"{name}-{split}")

    return render("train", train_per_class), render("test", test_per_class)


def _take_classes(dataset: Dataset, class_ids: np.ndarray, name: str) -> Dataset:
    wanted = np.sort(np.asarray(class_ids))
    relabel = {int(c): i for i, c in enumerate(wanted)}
    mask = np.isin(dataset.labels, wanted)
    labels = np.array([relabel[int(c)] for c in dataset.labels[mask]], dtype=np.int64)
    return Dataset(dataset.images[mask], labels, len(wanted), name=name)


def split_classes(
    dataset: Dataset, train_classes: int, val_classes: int, test_classes: int, seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint class-level split with contiguous relabeling per part."""
    total = train_classes + val_classes + test_classes
    for label, count in (
        ("train_classes", train_classes),
        ("val_classes", val_classes),
        ("test_classes", test_classes),
    ):
        if count < 0:
            raise DatasetError(f"{label} must be >= 0, got {count}")
    if total > dataset.class_count:
        raise DatasetError(
            f"requested {total} classes but dataset has {dataset.class_count}"
        )
    perm = seed_stream(seed, "class-split").permutation(dataset.class_count)
    a, b = train_classes, train_classes + val_classes
    return (
        _take_classes(dataset, perm[:a], f"{dataset.name}-train"),
        _take_classes(dataset, perm[a:b], f"{dataset.name}-val"),
        _take_classes(dataset, perm[b:total], f"{dataset.name}-test"),
    )


@dataclass
class ClassStream:
    """Ordered tasks over a dataset; each task owns a consecutive class block."""

    task_indices: list[np.ndarray]
    task_classes: list[np.ndarray]
    classes_per_task: int

    @property
    def num_tasks(self) -> int:
        return len(self.task_indices)


def make_class_stream(dataset: Dataset, classes_per_task: int) -> ClassStream:
    if classes_per_task < 1:
        raise DatasetError(f"classes_per_task must be >= 1, got {classes_per_task}")
    if dataset.class_count % classes_per_task != 0:
        raise DatasetError(
            f"{dataset.class_count} classes not divisible into tasks of {classes_per_task}"
        )
    indices, classes = [], []
    for start in range(0, dataset.class_count, classes_per_task):
        group = np.arange(start, start + classes_per_task)
        indices.append(np.flatnonzero(np.isin(dataset.labels, group)))
        classes.append(group)
    return ClassStream(indices, classes, classes_per_task)
