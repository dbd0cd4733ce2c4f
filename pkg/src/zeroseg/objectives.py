"""Training losses.

Source images pay a pixel-wise cross-entropy against their labels.
Unlabeled target images pay a bias-rectification term: the negative log
of the total probability mass each pixel assigns to the unseen classes,
which pushes target pixels away from the seen-class region of the
embedding space without committing to any single pseudo label.  Both
losses are normalized as per-pixel means so the balance weight keeps its
meaning across canvas sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "IGNORE_INDEX",
    "LossValue",
    "seg_cross_entropy",
    "bias_rectification",
    "total_objective",
]

IGNORE_INDEX = -1

# Unseen-mass sums are clamped here before the log so an extreme pixel
# cannot produce -inf early in training.
MASS_FLOOR = 1e-12


@dataclass
class LossValue:
    """A scalar loss tensor plus the pixel count behind its normalization."""

    value: Tensor
    pixel_count: int

    def item(self) -> float:
        return float(self.value.data)


def seg_cross_entropy(
    probs: Tensor, mask: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> LossValue:
    """Mean over non-ignored pixels of -ln p[true class].

    With every pixel ignored the loss is 0 with pixel_count 0.
    """
    mask = np.asarray(mask)
    if mask.shape != probs.data.shape[:-1]:
        raise nm.ShapeError(f"mask shape {mask.shape} vs probs {probs.data.shape}")
    n_classes = probs.data.shape[-1]
    valid = mask != ignore_index
    labels = mask.astype(np.int64)
    bad = valid & ((labels < 0) | (labels >= n_classes))
    if bad.any():
        raise ValueError(
            f"mask contains label {labels[bad].flat[0]} outside [0, {n_classes})"
        )
    count = int(valid.sum())
    if count == 0:
        return LossValue(Tensor(0.0), 0)
    picked = nm.gather_last(probs, np.where(valid, labels, 0))
    loss = nm.scale(nm.masked_mean(nm.log(picked), valid), -1.0)
    return LossValue(loss, count)


def bias_rectification(probs: Tensor, unseen: Sequence[int]) -> LossValue:
    """Mean over all pixels of -ln(total probability mass on unseen classes)."""
    unseen = sorted(int(c) for c in set(unseen))
    if not unseen:
        raise ValueError("unseen class set must not be empty")
    n_classes = probs.data.shape[-1]
    if unseen[0] < 0 or unseen[-1] >= n_classes:
        raise ValueError(f"unseen indices must lie in [0, {n_classes})")
    mass = nm.channel_mass(probs, unseen)
    loss = nm.scale(nm.mean_all(nm.log(nm.clamp_min(mass, MASS_FLOOR))), -1.0)
    return LossValue(loss, int(mass.data.size))


def total_objective(l_r: LossValue, l_b: LossValue, lam: float) -> Tensor:
    """Weighted sum l_r + lam * l_b, differentiable end to end."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return nm.add(l_r.value, nm.scale(l_b.value, float(lam)))
