"""Hierarchical voxelwise vote over several multiclass segmentations.

Votes are aggregated by tumour region and decided top-down: tumour vs
background, then core vs edema, then enhancing vs non-enhancing core.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NUM_CLASSES = 4


@dataclass(frozen=True)
class Thresholds:
    tumor: float = 0.4
    core: float = 0.3
    enhancing: float = 0.4
    inclusive: bool = True  # "proportion >= threshold" passes a node; False means strictly greater

    def __post_init__(self):
        for name in ("tumor", "core", "enhancing"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"threshold {name} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class VoteCounts:
    v0: int
    v1: int
    v2: int
    v3: int

    def __post_init__(self):
        if min(self.v0, self.v1, self.v2, self.v3) < 0:
            raise ValueError("vote counts must be non-negative")

    @property
    def n(self) -> int:
        return self.v0 + self.v1 + self.v2 + self.v3


def _passes(num, den, threshold: float, inclusive: bool):
    # num/den >= T  <=>  num >= T*den for den > 0; the product form keeps
    # exact ties (e.g. 2/5 vs 0.4) away from division rounding
    lhs = np.asarray(num, dtype=np.float64)
    rhs = threshold * np.asarray(den, dtype=np.float64)
    tol = 1e-12 * np.maximum(rhs, 1.0)
    return lhs >= rhs - tol if inclusive else lhs > rhs + tol


def decide_counts(counts: np.ndarray, t: Thresholds = Thresholds()) -> np.ndarray:
    """Vectorised decision on a ``[4, ...]`` array of per-class vote counts."""
    v0, v1, v2, v3 = (np.asarray(c, dtype=np.int64) for c in counts)
    n = v0 + v1 + v2 + v3
    if np.any(n < 1):
        raise ValueError("every voxel needs at least one vote")
    tumor = v1 + v2 + v3
    core = v1 + v3
    is_tumor = _passes(tumor, n, t.tumor, t.inclusive)
    is_core = is_tumor & _passes(core, tumor, t.core, t.inclusive)
    assert np.all(core[is_core] > 0)
    is_enh = is_core & _passes(v3, core, t.enhancing, t.inclusive)
    out = np.zeros(n.shape, dtype=np.uint8)
    out[is_tumor] = 2
    out[is_core] = 1
    out[is_enh] = 3
    return out


def decide_voxel(votes: VoteCounts, t: Thresholds = Thresholds()) -> int:
    if votes.n < 1:
        raise ValueError("need at least one vote")
    counts = np.array([votes.v0, votes.v1, votes.v2, votes.v3])
    return int(decide_counts(counts, t))


def tally(segmentations: Sequence[np.ndarray]) -> np.ndarray:
    """Per-voxel vote counts, shape ``[4, *extents]``."""
    segs = [np.asarray(s) for s in segmentations]
    if not segs:
        raise ValueError("need at least one segmentation")
    shape = segs[0].shape
    for s in segs[1:]:
        if s.shape != shape:
            raise ValueError(f"segmentation extents differ: {shape} vs {s.shape}")
    counts = np.zeros((NUM_CLASSES,) + shape, dtype=np.int64)
    for s in segs:
        if s.size and (s.min() < 0 or s.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        for c in range(NUM_CLASSES):
            counts[c] += s == c
    return counts


def merge_segmentations(segmentations: Sequence[np.ndarray], t: Thresholds = Thresholds()) -> np.ndarray:
    return decide_counts(tally(segmentations), t)


def sensitivity_sweep(segmentations: Sequence[np.ndarray],
                      threshold_grid: Iterable[tuple[float, float, float]],
                      inclusive: bool = True) -> list[dict]:
    """Merged WT/TC/EC voxel counts for each ``(T_tumor, T_core, T_enhancing)``."""
    counts = tally(segmentations)
    rows = []
    for tt, tc, te in threshold_grid:
        merged = decide_counts(counts, Thresholds(tt, tc, te, inclusive))
        rows.append({
            "t_tumor": tt, "t_core": tc, "t_enhancing": te,
            "WT": int(np.count_nonzero(merged > 0)),
            "TC": int(np.count_nonzero((merged == 1) | (merged == 3))),
            "EC": int(np.count_nonzero(merged == 3)),
        })
    return rows
