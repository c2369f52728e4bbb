"""The reverse-process decode loop: fully masked in, fully committed out.

Each step queries the oracle on every masked position, optionally combines
conditional/unconditional logits, scores the greedy predictions, applies
the position/step penalty, and commits the scheduled number of positions.
"Remasking" a prediction is simply not committing it; committed positions
are never revisited.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import DecodeConfig, ScoredCandidate, ScoreStrategy, TokenSequence, build_schedule
from .guidance import apply_vrg
from .instrument import CommitRecord, DecodeTrace, PdmRecord, StepRecord, pdm
from .oracle import ConditionMode, LogitRow, Oracle, OracleTransportError
from .scoring import penalize_scores, rank_candidates, strategy_kind

log = logging.getLogger("dift.scheduler")


@dataclass(frozen=True, slots=True)
class DecodeResult:
    """A finished decode: final tokens, full trace, and cost accounting."""

    final_tokens: tuple[int, ...]
    trace: DecodeTrace
    oracle_calls: int
    wall_time: float


class DecodeAbortedError(RuntimeError):
    """Oracle transport failure mid-decode; completed steps are preserved."""

    def __init__(self, message: str, partial_trace: DecodeTrace) -> None:
        super().__init__(message)
        self.partial_trace = partial_trace


class BatchDecodeError(RuntimeError):
    """Some prompts of a batch failed; sibling results are preserved."""

    def __init__(
        self,
        results: dict[int, DecodeResult],
        errors: dict[int, Exception],
    ) -> None:
        super().__init__(f"{len(errors)} of {len(results) + len(errors)} decodes failed")
        self.results = results
        self.errors = errors


def _dense_matrix(rows: Sequence[LogitRow], vocab_size: int) -> np.ndarray | None:
    """Stack dense rows into one (n, V) matrix; None if any row is sparse."""
    if any(r.is_sparse for r in rows):
        return None
    out = np.empty((len(rows), vocab_size), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row.logits) != vocab_size:
            raise ValueError(
                f"row at position {row.position} has {len(row.logits)} logits, "
                f"vocab is {vocab_size}"
            )
        out[i] = row.logits
    return out


def _score_sparse(
    rows_c: Sequence[LogitRow],
    rows_u: Sequence[LogitRow] | None,
    config: DecodeConfig,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Slow path for sparse rows: densify implied distributions per row."""
    tokens = np.empty(len(rows_c), dtype=np.int64)
    scores = np.empty(len(rows_c), dtype=np.float64)
    kind = strategy_kind(config.strategy)
    for i, row in enumerate(rows_c):
        guided = (
            apply_vrg(row, rows_u[i], config.s_vrg) if config.vrg_enabled else row
        )
        probs = guided.to_distribution(vocab_size)
        token, score = kernels.score_rows(probs[None, :], kind)
        tokens[i], scores[i] = token[0], score[0]
    return tokens, scores


def decode(oracle: Oracle, prompt_state: TokenSequence, config: DecodeConfig) -> DecodeResult:
    """Run the full K-step reverse process over `prompt_state`.

    The state must be the fully masked response region (the prompt and any
    visual condition live on the oracle side). Deterministic for a fixed
    (oracle, config): greedy token choice, index-then-token tie-breaks.
    """
    started = time.perf_counter()
    meta = oracle.metadata()
    if prompt_state.length != config.length:
        raise ValueError(
            f"prompt state length {prompt_state.length} != configured length {config.length}"
        )
    if prompt_state.masked_count != config.length:
        raise ValueError("prompt state must have every response position masked")
    if any(t != meta.mask_token_id for t in prompt_state.tokens):
        raise ValueError("masked positions must hold the oracle's mask token id")
    if config.strategy is ScoreStrategy.ENTROPY and meta.vocab_size < 2:
        raise ValueError("entropy strategy needs a vocabulary of at least 2")

    schedule = build_schedule(config.length, config.steps)
    need_uncond = config.vrg_enabled or config.pdm_enabled
    kind = strategy_kind(config.strategy)
    seq = prompt_state
    steps: list[StepRecord] = []
    calls = 0

    def finish_trace() -> DecodeTrace:
        return DecodeTrace(
            config=config, schedule=schedule, metadata=meta, steps=tuple(steps)
        )

    for i in range(1, schedule.K + 1):
        positions = seq.masked_positions()
        try:
            rows_c = oracle.query(seq, positions, ConditionMode.FULL)
            calls += 1
            rows_u = None
            if need_uncond:
                rows_u = oracle.query(seq, positions, ConditionMode.NO_VISUAL)
                calls += 1
        except OracleTransportError as exc:
            log.warning("decode aborted at step %d: %s", i, exc)
            raise DecodeAbortedError(
                f"oracle failed at step {i}: {exc}", finish_trace()
            ) from exc
        step_calls = 2 if need_uncond else 1
        if not positions:
            steps.append(StepRecord(step=i, committed=(), pdm=(), oracle_calls=step_calls))
            continue

        rows_c = sorted(rows_c, key=lambda r: r.position)
        if rows_u is not None:
            rows_u = sorted(rows_u, key=lambda r: r.position)
        cond = _dense_matrix(rows_c, meta.vocab_size)
        uncond = _dense_matrix(rows_u, meta.vocab_size) if rows_u is not None else None
        if cond is not None and (rows_u is None or uncond is not None):
            guided = (
                kernels.vrg_rows(cond, uncond, config.s_vrg)
                if config.vrg_enabled
                else cond
            )
            probs = kernels.softmax_rows(guided)
            tokens, scores = kernels.score_rows(probs, kind)
        else:
            tokens, scores = _score_sparse(rows_c, rows_u, config, meta.vocab_size)

        pos_arr = np.asarray(positions, dtype=np.float64)
        rels = pos_arr / (config.length - 1) if config.length > 1 else pos_arr * 0.0
        if config.psp_enabled:
            penalized = penalize_scores(scores, rels, i, schedule.K, config.gamma)
        else:
            penalized = scores

        candidates = [
            ScoredCandidate(
                position=positions[n],
                rel=float(rels[n]),
                token=int(tokens[n]),
                confidence=float(scores[n]),
                penalized=float(penalized[n]),
            )
            for n in range(len(positions))
        ]
        chosen = rank_candidates(candidates, config.strategy, schedule.commit_counts[i - 1])
        chosen_set = set(chosen)
        by_position = {c.position: c for c in candidates}
        row_index = {j: n for n, j in enumerate(positions)}

        pdm_records: tuple[PdmRecord, ...] = ()
        if config.pdm_enabled:
            measured = positions if config.pdm_all_positions else sorted(chosen_set)
            records = []
            for j in measured:
                n = row_index[j]
                p_cond = rows_c[n].to_distribution(meta.vocab_size)
                p_uncond = rows_u[n].to_distribution(meta.vocab_size)
                records.append(PdmRecord(step=i, position=j, pdm=pdm(p_cond, p_uncond)))
            pdm_records = tuple(records)

        committed = tuple(
            CommitRecord(
                position=j,
                token=by_position[j].token,
                confidence=by_position[j].confidence,
                penalized=by_position[j].penalized,
            )
            for j in sorted(chosen_set)
        )
        seq = seq.commit({c.position: c.token for c in committed})
        steps.append(
            StepRecord(step=i, committed=committed, pdm=pdm_records, oracle_calls=step_calls)
        )
        if seq.masked_count != schedule.masked_targets[i]:
            raise AssertionError(
                f"masked count {seq.masked_count} diverged from schedule "
                f"target {schedule.masked_targets[i]} after step {i}"
            )

    return DecodeResult(
        final_tokens=seq.tokens,
        trace=finish_trace(),
        oracle_calls=calls,
        wall_time=time.perf_counter() - started,
    )


def decode_batch(
    oracle: Oracle, prompts: Sequence[TokenSequence], config: DecodeConfig
) -> list[DecodeResult]:
    """Decode each prompt independently; identical to a sequential loop.

    Per-prompt failures do not abort siblings: everything else still runs
    and a BatchDecodeError carrying both the successes and the failures is
    raised at the end.
    """
    results: dict[int, DecodeResult] = {}
    errors: dict[int, Exception] = {}
    for index, prompt in enumerate(prompts):
        try:
            results[index] = decode(oracle, prompt, config)
        except (DecodeAbortedError, OracleTransportError, ValueError) as exc:
            log.warning("batch decode %d failed: %s", index, exc)
            errors[index] = exc
    if errors:
        raise BatchDecodeError(results, errors)
    return [results[i] for i in range(len(prompts))]
