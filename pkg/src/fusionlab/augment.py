"""Image augmentations and worst-case variant selection (MEMLX).

All image ops take float arrays shaped (..., H, W) with values in [0, 1] and
return new arrays of the same shape. The selection routines evaluate each
candidate variant under the current model parameters, forward only, and keep
the variant with the highest loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    """Mirror along the width axis."""
    return np.ascontiguousarray(image[..., ::-1])


def vertical_flip(image: np.ndarray) -> np.ndarray:
    """Mirror along the height axis."""
    return np.ascontiguousarray(image[..., ::-1, :])


def color_jitter(image: np.ndarray, brightness_delta: float, contrast_factor: float) -> np.ndarray:
    """Scale contrast about the image mean, then shift brightness; clipped to [0, 1].

    brightness_delta 0 and contrast_factor 1 is the identity for in-range images.
    """
    mean = image.mean()
    out = contrast_factor * (image - mean) + mean + brightness_delta
    return np.clip(out, 0.0, 1.0)


def translate_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation; vacated pixels are zero-filled, size preserved."""
    h, w = image.shape[-2:]
    out = np.zeros_like(image)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = image[..., src_y, src_x]
    return out


def random_crop_pad(image: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Random integer translation up to +/- max_shift per axis, zero-filled."""
    dy = int(rng.integers(-max_shift, max_shift + 1))
    dx = int(rng.integers(-max_shift, max_shift + 1))
    return translate_image(image, dy, dx)


@dataclass(frozen=True)
class AugRanges:
    """Draw ranges for the stochastic augmentation strategies."""

    brightness: float = 0.2
    contrast_low: float = 0.8
    contrast_high: float = 1.2
    max_shift: int = 2


DEFAULT_RANGES = AugRanges()

STRATEGY_IDS = (1, 2, 3)


def apply_strategy(
    batch: np.ndarray, strategy_id: int, rng: np.random.Generator, ranges: AugRanges = DEFAULT_RANGES
) -> np.ndarray:
    """Apply one augmentation strategy to a whole batch (B, C, H, W).

    1: vertical then horizontal flip (deterministic).
    2: per-image brightness and contrast jitter.
    3: per-image random shift followed by a random crop-style shift.
    """
    if strategy_id == 1:
        return horizontal_flip(vertical_flip(batch))
    if strategy_id == 2:
        out = np.empty_like(batch)
        for i in range(len(batch)):
            delta = float(rng.uniform(-ranges.brightness, ranges.brightness))
            factor = float(rng.uniform(ranges.contrast_low, ranges.contrast_high))
            out[i] = color_jitter(batch[i], delta, factor)
        return out
    if strategy_id == 3:
        out = np.empty_like(batch)
        for i in range(len(batch)):
            shifted = random_crop_pad(batch[i], ranges.max_shift, rng)
            out[i] = random_crop_pad(shifted, ranges.max_shift, rng)
        return out
    raise ValueError(f"unknown augmentation strategy id {strategy_id}")


@dataclass
class MemlxSelection:
    """Outcome of worst-case selection over m augmented variants."""

    support_images: np.ndarray
    query_images: np.ndarray
    support_losses: np.ndarray
    query_losses: np.ndarray
    support_choice: int
    query_choice: int


def _variants(batch, m, rng, ranges):
    out = []
    for i in range(m):
        strategy = STRATEGY_IDS[i % len(STRATEGY_IDS)]
        out.append(apply_strategy(batch, strategy, rng, ranges))
    return out


def memlx_select(
    model,
    params,
    support_images: np.ndarray,
    support_label: int,
    query_images: np.ndarray,
    query_labels: np.ndarray,
    m: int = 3,
    rng: np.random.Generator | None = None,
    ranges: AugRanges = DEFAULT_RANGES,
) -> MemlxSelection:
    """Keep the hardest of m augmented variants of both episode sets.

    The support variants are scored through the pooled meta-example path with
    the single cluster label; the query variants through the per-sample path.
    Parameters are read, never written, and the two argmax choices are made
    independently. Ties resolve to the lowest variant index.
    """
    if m < 1:
        raise ValueError(f"memlx_select needs m >= 1, got {m}")
    rng = rng if rng is not None else np.random.default_rng(0)
    sup_variants = _variants(support_images, m, rng, ranges)
    qry_variants = _variants(query_images, m, rng, ranges)

    sup_losses = np.empty(m)
    for i, variant in enumerate(sup_variants):
        feats = model.features(params, variant)
        _, pooled = model.attention_pool(params, feats)
        loss = T.cross_entropy(model.head_logits(params, pooled), np.array([support_label]))
        sup_losses[i] = float(loss.data)

    qry_losses = np.empty(m)
    for i, variant in enumerate(qry_variants):
        loss = T.cross_entropy(model.forward_logits(params, variant), query_labels)
        qry_losses[i] = float(loss.data)

    i_sup = int(np.argmax(sup_losses))
    i_qry = int(np.argmax(qry_losses))
    return MemlxSelection(
        support_images=sup_variants[i_sup],
        query_images=qry_variants[i_qry],
        support_losses=sup_losses,
        query_losses=qry_losses,
        support_choice=i_sup,
        query_choice=i_qry,
    )


@dataclass
class BatchSelection:
    images: np.ndarray
    losses: np.ndarray
    choice: int


def select_worst_batch(
    model,
    params,
    images: np.ndarray,
    labels: np.ndarray,
    m: int = 3,
    rng: np.random.Generator | None = None,
    ranges: AugRanges = DEFAULT_RANGES,
) -> BatchSelection:
    """Batch-level worst-case selection for mixed-label batches.

    Used by the continual-learning variant, where a batch carries several
    labels and the pooled single-label path does not apply.
    """
    if m < 1:
        raise ValueError(f"select_worst_batch needs m >= 1, got {m}")
    rng = rng if rng is not None else np.random.default_rng(0)
    variants = _variants(images, m, rng, ranges)
    losses = np.empty(m)
    for i, variant in enumerate(variants):
        loss = T.cross_entropy(model.forward_logits(params, variant), labels)
        losses[i] = float(loss.data)
    choice = int(np.argmax(losses))
    return BatchSelection(images=variants[choice], losses=losses, choice=choice)
