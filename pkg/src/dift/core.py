"""Domain types shared by every stage of the decode pipeline.

Sequence state, the discrete reverse-time schedule, decode configuration,
and per-position candidates. Everything here is immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping


class ScoreStrategy(Enum):
    """How a per-position probability row is turned into a commit score.

    Every strategy maps a row to a scalar in [0, 1], higher meaning more
    eligible to commit this step; LEFT_TO_RIGHT ignores the scores and
    commits the leftmost remaining masked positions.
    """

    LOW_CONFIDENCE = "low_confidence"
    ENTROPY = "entropy"
    MARGIN = "margin"
    LEFT_TO_RIGHT = "left_to_right"


@dataclass(frozen=True, slots=True)
class TokenSequence:
    """Partially masked response state: token ids plus mask flags.

    A masked position holds the oracle-declared mask token id. Commits are
    final: :meth:`commit` refuses positions that are already unmasked, so
    the committed set only grows over the course of a decode.
    """

    tokens: tuple[int, ...]
    masked: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.masked):
            raise ValueError(
                f"tokens/masked length mismatch: {len(self.tokens)} != {len(self.masked)}"
            )
        if len(self.tokens) == 0:
            raise ValueError("sequence length must be positive")
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be non-negative")

    @classmethod
    def fully_masked(cls, length: int, mask_token_id: int) -> "TokenSequence":
        if length < 1:
            raise ValueError("length must be positive")
        return cls(tokens=(mask_token_id,) * length, masked=(True,) * length)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def masked_count(self) -> int:
        return sum(self.masked)

    def masked_positions(self) -> tuple[int, ...]:
        return tuple(j for j, m in enumerate(self.masked) if m)

    def commit(self, assignments: Mapping[int, int]) -> "TokenSequence":
        """Return a new sequence with `assignments` (position -> token) committed."""
        tokens = list(self.tokens)
        masked = list(self.masked)
        for position, token in assignments.items():
            if not 0 <= position < len(tokens):
                raise ValueError(f"position {position} out of range")
            if not masked[position]:
                raise ValueError(f"position {position} is already committed")
            if token < 0:
                raise ValueError("token ids must be non-negative")
            tokens[position] = token
            masked[position] = False
        return TokenSequence(tokens=tuple(tokens), masked=tuple(masked))


def _round_half_up_targets(length: int, steps: int) -> tuple[int, ...]:
    # m_i = round-half-up(L * (K - i) / K), exact in integer arithmetic so
    # float rounding can never cross a half-integer boundary.
    return tuple(
        (2 * length * (steps - i) + steps) // (2 * steps) for i in range(steps + 1)
    )


@dataclass(frozen=True, slots=True)
class StepSchedule:
    """Discrete reverse-time grid and the per-step commit budget.

    `times` runs from 1 down to 0 over `K` steps; `masked_targets[i]` is the
    number of positions still masked after step i, and `commit_counts[i-1]`
    the number committed at step i. Differencing the targets guarantees the
    counts total exactly the sequence length.
    """

    K: int
    times: tuple[float, ...]
    masked_targets: tuple[int, ...]
    commit_counts: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.masked_targets[0]

    def relative_progress(self, step: int) -> float:
        """Progress after `step` of K steps, in (0, 1]."""
        if not 1 <= step <= self.K:
            raise ValueError(f"step {step} outside 1..{self.K}")
        return step / self.K


def build_schedule(length: int, steps: int) -> StepSchedule:
    """Linear schedule keeping the masked count at round-half-up(L*t_i)."""
    if length < 1:
        raise ValueError("length must be positive")
    if steps < 1:
        raise ValueError("steps must be positive")
    times = tuple((steps - i) / steps for i in range(steps + 1))
    targets = _round_half_up_targets(length, steps)
    counts = tuple(targets[i - 1] - targets[i] for i in range(1, steps + 1))
    return StepSchedule(K=steps, times=times, masked_targets=targets, commit_counts=counts)


def rel_position(position: int, length: int) -> float:
    """Normalized position in [0, 1]; a length-1 sequence maps to 0."""
    if length < 1:
        raise ValueError("length must be positive")
    if not 0 <= position < length:
        raise ValueError(f"position {position} out of range for length {length}")
    if length == 1:
        return 0.0
    return position / (length - 1)


@dataclass(frozen=True, slots=True)
class ScoredCandidate:
    """One masked position's commit candidate for the current step."""

    position: int
    rel: float
    token: int
    confidence: float
    penalized: float


@dataclass(frozen=True, slots=True)
class DecodeConfig:
    """Everything the decode loop needs besides the oracle itself.

    gamma and s_vrg default to the recommended 0.5; gamma is restricted to
    [0, 1] so the penalty factor stays within [1 - gamma, 1].
    """

    length: int
    steps: int
    strategy: ScoreStrategy = ScoreStrategy.LOW_CONFIDENCE
    gamma: float = 0.5
    s_vrg: float = 0.5
    vrg_enabled: bool = False
    psp_enabled: bool = False
    pdm_enabled: bool = False
    # Default dependency measurement covers newly committed positions only;
    # this widens it to every masked position, every step.
    pdm_all_positions: bool = False
    answer_pattern: "object | None" = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not isinstance(self.strategy, ScoreStrategy):
            raise TypeError("strategy must be a ScoreStrategy")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.s_vrg < 0.0:
            raise ValueError("s_vrg must be non-negative")
