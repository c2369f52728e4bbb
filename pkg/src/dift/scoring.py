"""Turning probability rows into commit decisions.

Three score strategies (low-confidence, entropy, margin) share a [0, 1]
higher-is-better interface so the position/step penalty can multiply into
any of them; the left-to-right baseline ignores scores entirely and takes
the leftmost remaining positions.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .core import ScoredCandidate, ScoreStrategy

_STRATEGY_KIND = {
    ScoreStrategy.LOW_CONFIDENCE: kernels.KIND_LOW_CONFIDENCE,
    ScoreStrategy.ENTROPY: kernels.KIND_ENTROPY,
    ScoreStrategy.MARGIN: kernels.KIND_MARGIN,
    # L2R ranks by position, but committed tokens still get the max-probability
    # confidence recorded in traces.
    ScoreStrategy.LEFT_TO_RIGHT: kernels.KIND_LOW_CONFIDENCE,
}

NORMALIZATION_TOLERANCE = 1e-9


def strategy_kind(strategy: ScoreStrategy) -> int:
    return _STRATEGY_KIND[strategy]


def _check_normalized(row: np.ndarray) -> None:
    total = float(row.sum())
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValueError(f"probability row sums to {total!r}, expected 1")
    if (row < 0.0).any():
        raise ValueError("probability row has negative entries")


def confidence_score(row: Sequence[float] | np.ndarray, strategy: ScoreStrategy) -> float:
    """Scalar [0, 1] score of one normalized probability row."""
    dense = np.ascontiguousarray(row, dtype=np.float64)
    if dense.ndim != 1:
        raise ValueError("expected a single probability row")
    _check_normalized(dense)
    _, scores = kernels.score_rows(dense[None, :], strategy_kind(strategy))
    return float(scores[0])


def apply_psp(
    confidence: float, step_index: int, steps: int, rel: float, gamma: float
) -> float:
    """Penalize `confidence` at position weight `rel`, step `step_index` of `steps`.

    Returns C * (1 - gamma * (1 - i/K) * rel): late positions are pushed
    down hard at early steps and the penalty vanishes as i reaches K.
    """
    if not 0.0 <= confidence <= 1.0:
        raise ValueError("confidence must lie in [0, 1]")
    if steps < 1 or not 1 <= step_index <= steps:
        raise ValueError("step_index must lie in 1..steps")
    if not 0.0 <= rel <= 1.0:
        raise ValueError("rel must lie in [0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return confidence * (1.0 - gamma * (1.0 - step_index / steps) * rel)


def penalize_scores(
    scores: np.ndarray, rels: np.ndarray, step_index: int, steps: int, gamma: float
) -> np.ndarray:
    """Vectorized apply_psp; identical arithmetic, element for element."""
    return scores * (1.0 - gamma * (1.0 - step_index / steps) * rels)


def rank_candidates(
    candidates: Sequence[ScoredCandidate], strategy: ScoreStrategy, count: int
) -> list[int]:
    """Positions to commit this step, best first.

    Score strategies take the `count` highest penalized scores; ties break
    on lower position, then lower token id. Left-to-right takes the
    `count` leftmost candidates regardless of score.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > len(candidates):
        raise ValueError(f"count {count} exceeds {len(candidates)} candidates")
    if strategy is ScoreStrategy.LEFT_TO_RIGHT:
        ordered = sorted(candidates, key=lambda c: c.position)
    else:
        ordered = sorted(candidates, key=lambda c: (-c.penalized, c.position, c.token))
    return [c.position for c in ordered[:count]]
