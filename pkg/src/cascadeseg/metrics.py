from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

REGIONS = {
    "WT": (1, 2, 3),
    "TC": (1, 3),
    "EC": (3,),
}


@dataclass(frozen=True)
class RegionDefinition:
    name: str
    classes: tuple[int, ...]

    def mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, self.classes)


REGION_DEFS = [RegionDefinition(k, v) for k, v in REGIONS.items()]


def dice(prediction: np.ndarray, truth: np.ndarray) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1."""
    p = np.asarray(prediction, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"extent mismatch: {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def evaluate(prediction: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    return {r.name: dice(r.mask(prediction), r.mask(truth)) for r in REGION_DEFS}


def summarize(scores: Sequence[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean, standard deviation, median and quartiles per region."""
    out = {}
    for r in REGIONS:
        vals = np.array([s[r] for s in scores], dtype=float)
        out[r] = {
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "median": float(np.median(vals)),
            "q25": float(np.quantile(vals, 0.25)),
            "q75": float(np.quantile(vals, 0.75)),
        }
    return out


def mean_scores(scores: Sequence[dict[str, float]]) -> dict[str, float]:
    return {r: float(np.mean([s[r] for s in scores])) for r in REGIONS}
