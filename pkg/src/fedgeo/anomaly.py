"""Round-wise robust outlier scoring of client divergences.

Scores are strictly per-round: the median and MAD are recomputed from each
round's divergences and never smoothed or carried over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RoundScores:
    round_index: int
    divergences: np.ndarray
    median: float
    mad: float
    zscores: np.ndarray
    epsilon: float


def robust_scores(
    divergences: np.ndarray, epsilon: float = 1e-8, round_index: int = 0
) -> RoundScores:
    """Robust z-scores: (D - median) / (MAD + epsilon).

    The median uses the midpoint of the two central order statistics for
    even counts; the MAD is the median of absolute deviations from it.
    """
    values = np.asarray(divergences, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("need divergences for at least 2 clients")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    median = float(np.median(values))
    mad = float(np.median(np.abs(values - median)))
    zscores = (values - median) / (mad + epsilon)
    return RoundScores(
        round_index=round_index,
        divergences=values,
        median=median,
        mad=mad,
        zscores=zscores,
        epsilon=epsilon,
    )


def flag_outliers(scores: RoundScores, threshold: float) -> list[int]:
    """Client indices with z above the threshold, highest z first."""
    if threshold <= 0.0:
        raise ValueError("threshold must be > 0")
    flagged = np.flatnonzero(scores.zscores > threshold)
    return [int(c) for c in flagged[np.argsort(-scores.zscores[flagged])]]


def sort_based_median(values: np.ndarray) -> float:
    """Reference median via full sort; the oracle the fast path is tested against."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    mid = ordered.size // 2
    if ordered.size % 2 == 1:
        return float(ordered[mid])
    return float((ordered[mid - 1] + ordered[mid]) / 2.0)


def sort_based_mad(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    med = sort_based_median(values)
    return sort_based_median(np.abs(values - med))
