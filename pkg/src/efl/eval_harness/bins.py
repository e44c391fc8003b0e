"""Transition-time binning for per-bin metric breakdowns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class BinAssignment:
    k: int
    thresholds: list[float]       # upper edge of each bin except the last
    assignments: np.ndarray       # bin index per input, same order
    degenerate: bool

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def transition_time_bins(deltas, k: int = 4) -> BinAssignment:
    """Rank-balanced quantile bins over transition times.

    Stable rank partition keeps every bin within one element of the others
    even with ties; a fully constant input collapses to bin 0 and is flagged.
    """
    values = np.asarray(list(deltas), dtype=np.float64)
    if k < 2:
        raise ValueError("need at least two bins")
    if values.ndim != 1 or values.shape[0] < k:
        raise ValueError(f"need at least {k} transition times, got {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("transition times must be finite")

    if np.min(values) == np.max(values):
        return BinAssignment(
            k=k,
            thresholds=[float(values[0])] * (k - 1),
            assignments=np.zeros(values.shape[0], dtype=np.int64),
            degenerate=True,
        )

    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) * k // n
    sorted_values = values[order]
    thresholds = [float(sorted_values[(i + 1) * n // k - 1]) for i in range(k - 1)]
    return BinAssignment(k=k, thresholds=thresholds, assignments=assignments, degenerate=False)


def pair_transition_time(delta_in: float, delta_out: float) -> float:
    return float(delta_in) + float(delta_out)
