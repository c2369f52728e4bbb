"""Model-agnostic inference engine for masked discrete diffusion LMs.

The decode loop walks a discrete reverse-time schedule, querying a logit
oracle at each step and committing the best-scored predictions. On top of
the plain confidence strategies it implements a position/step penalty that
delays late-position commits at early steps, condition guidance that
amplifies the droppable (visual) condition, and per-commit prompt
dependency measurement.
"""

from .core import (
    DecodeConfig,
    ScoredCandidate,
    ScoreStrategy,
    StepSchedule,
    TokenSequence,
    build_schedule,
    rel_position,
)
from .guidance import apply_vrg
from .instrument import AnswerPattern, DecodeTrace, answer_step, pdm, pdm_curve
from .oracle import (
    ConditionMode,
    LogitRow,
    Oracle,
    OracleMetadata,
    OracleTransportError,
    RemoteOracle,
    make_template_oracle,
)
from .scheduler import DecodeResult, decode, decode_batch
from .scoring import apply_psp, confidence_score, rank_candidates

__version__ = "0.1.0"

__all__ = [
    "AnswerPattern",
    "ConditionMode",
    "DecodeConfig",
    "DecodeResult",
    "DecodeTrace",
    "LogitRow",
    "Oracle",
    "OracleMetadata",
    "OracleTransportError",
    "RemoteOracle",
    "ScoreStrategy",
    "ScoredCandidate",
    "StepSchedule",
    "TokenSequence",
    "answer_step",
    "apply_psp",
    "apply_vrg",
    "build_schedule",
    "confidence_score",
    "decode",
    "decode_batch",
    "make_template_oracle",
    "pdm",
    "pdm_curve",
    "rank_candidates",
    "rel_position",
]
