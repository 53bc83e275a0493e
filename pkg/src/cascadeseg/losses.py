"""Class-balanced cross-entropy with batch-dependent voxel weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

TARGETS_3D = (0.4, 0.2, 0.2, 0.2)
TARGETS_2D = (0.7, 0.1, 0.1, 0.1)
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TargetWeights:
    """Fraction of the loss mass given to each class in every batch."""

    t: tuple[float, ...]

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        object.__setattr__(self, "t", t)
        if not t:
            raise ValueError("target weights must be non-empty")
        if any(not 0.0 <= v <= 1.0 for v in t):
            raise ValueError(f"target weights must lie in [0, 1], got {t}")
        if abs(sum(t) - 1.0) > 1e-9:
            raise ValueError(f"target weights must sum to 1, got sum {sum(t)}")

    @property
    def num_classes(self) -> int:
        return len(self.t)


def class_targets(labels: np.ndarray, targets: TargetWeights) -> np.ndarray:
    """Per-class share of the loss after dropping classes absent from ``labels``.

    Absent classes get 0 and the targets of the present ones are rescaled to
    sum to 1. If every present class has a zero target, the present classes
    share the mass equally.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label volume")
    counts = np.bincount(labels.ravel(), minlength=targets.num_classes)
    if counts.size > targets.num_classes:
        raise ValueError(f"labels exceed the {targets.num_classes} configured classes")
    present = counts > 0
    t = np.where(present, np.asarray(targets.t), 0.0)
    total = t.sum()
    if total <= 0:
        return present / present.sum()
    return t / total


def compute_voxel_weights(labels: np.ndarray, targets: TargetWeights) -> np.ndarray:
    """Weight t_c / N_c for every voxel of class c (N_c = count of c in the batch)."""
    labels = np.asarray(labels)
    share = class_targets(labels, targets)
    counts = np.bincount(labels.ravel(), minlength=targets.num_classes)
    per_class = np.divide(share, counts, out=np.zeros_like(share), where=counts > 0)
    return per_class[labels]


def _flatten_voxels(x: ad.Tensor, labels: np.ndarray, weights: np.ndarray):
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],) + x.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match predictions {x.shape}")
    weights = np.asarray(weights)
    if weights.shape != labels.shape:
        raise ValueError(f"weights shape {weights.shape} does not match labels {labels.shape}")
    return labels.astype(np.intp), weights


def weighted_cross_entropy(probabilities: ad.Tensor, labels: np.ndarray, weights: np.ndarray,
                           normalizer: int | None = None) -> ad.Tensor:
    """-(1/V) * sum(w * log p_label) on softmax outputs.

    ``normalizer`` is the number of ground-truth voxels (pixels in 2-D); it
    defaults to ``labels.size``.
    """
    labels, weights = _flatten_voxels(probabilities, labels, weights)
    v = labels.size if normalizer is None else normalizer
    s = ad.pick_log(probabilities, labels, weights, floor=LOG_FLOOR)
    return ad.scale(s, -1.0 / v)


def weighted_cross_entropy_logits(logits: ad.Tensor, labels: np.ndarray, weights: np.ndarray,
                                  normalizer: int | None = None) -> ad.Tensor:
    """Same value as ``weighted_cross_entropy(softmax(logits), ...)`` via log-softmax.

    Used for training: the log of an underflowed float32 probability would
    otherwise be clamped and stop passing gradient.
    """
    labels, weights = _flatten_voxels(logits, labels, weights)
    v = labels.size if normalizer is None else normalizer
    return ad.scale(ad.pick(ad.log_softmax_channels(logits), labels, weights), -1.0 / v)


def batch_loss(logits: ad.Tensor, labels: np.ndarray, targets: TargetWeights) -> ad.Tensor:
    """Weighted cross-entropy with weights computed from this batch's labels."""
    w = compute_voxel_weights(labels, targets)
    return weighted_cross_entropy_logits(logits, labels, w)


@dataclass
class LossBreakdown:
    main_loss: float
    subnetwork_losses: list[float]
    combined: float
    c_main: float
    c_k: list[float] = field(default_factory=list)


def check_coefficients(c_main: float, c_k: Sequence[float]) -> None:
    coeffs = [c_main, *c_k]
    if any(not 0.0 <= c <= 1.0 for c in coeffs):
        raise ValueError(f"loss coefficients must lie in [0, 1], got {coeffs}")
    if abs(sum(coeffs) - 1.0) > 1e-9:
        raise ValueError(f"loss coefficients must sum to 1, got {sum(coeffs)}")


def combined_loss(main: ad.Tensor, subnetwork: Sequence[ad.Tensor], c_main: float,
                  c_k: Sequence[float]) -> tuple[ad.Tensor, LossBreakdown]:
    """Convex combination of the main and auxiliary losses.

    Returns the differentiable combined scalar together with a plain-number
    breakdown for logging.
    """
    c_k = list(c_k)
    if len(c_k) != len(subnetwork):
        raise ValueError(f"{len(subnetwork)} subnetwork losses but {len(c_k)} coefficients")
    check_coefficients(c_main, c_k)
    total = ad.linear_combination([main, *subnetwork], [c_main, *c_k])
    info = LossBreakdown(
        main_loss=main.item(),
        subnetwork_losses=[s.item() for s in subnetwork],
        combined=total.item(),
        c_main=c_main,
        c_k=c_k,
    )
    return total, info
