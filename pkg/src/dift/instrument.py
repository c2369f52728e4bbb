"""Measurement layer: prompt-dependency values, answer-step detection, traces.

The prompt dependency measure (PDM) is the [0, 1]-normalized Hellinger
distance between a position's token distribution with and without the
droppable condition segment, computed at the step the position commits.
Traces serialize as JSON lines under the versioned "dift-trace/1" schema.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .core import DecodeConfig, ScoreStrategy, StepSchedule
from .oracle import OracleMetadata
from .scoring import NORMALIZATION_TOLERANCE

TRACE_SCHEMA = "dift-trace/1"


def pdm(p_cond: np.ndarray, p_uncond: np.ndarray) -> float:
    """Hellinger distance between two normalized rows, in [0, 1]."""
    p = np.ascontiguousarray(p_cond, dtype=np.float64)
    q = np.ascontiguousarray(p_uncond, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be 1-d and share a support")
    for row in (p, q):
        total = float(row.sum())
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"distribution sums to {total!r}, expected 1")
        if (row < 0.0).any():
            raise ValueError("distribution has negative entries")
    return float(kernels.hellinger_rows(p[None, :], q[None, :])[0])


@dataclass(frozen=True, slots=True)
class PdmRecord:
    step: int
    position: int
    pdm: float


@dataclass(frozen=True, slots=True)
class CommitRecord:
    position: int
    token: int
    confidence: float
    penalized: float


@dataclass(frozen=True, slots=True)
class StepRecord:
    step: int
    committed: tuple[CommitRecord, ...]
    pdm: tuple[PdmRecord, ...]
    oracle_calls: int


@dataclass(frozen=True, slots=True)
class DecodeTrace:
    config: DecodeConfig
    schedule: StepSchedule
    metadata: OracleMetadata | None
    steps: tuple[StepRecord, ...]

    def final_tokens(self) -> dict[int, int]:
        """Committed tokens by position (partial traces may not cover all)."""
        return {
            c.position: c.token for record in self.steps for c in record.committed
        }

    def commit_steps(self) -> dict[int, int]:
        """Step at which each committed position was filled."""
        return {
            c.position: record.step for record in self.steps for c in record.committed
        }


@dataclass(frozen=True, slots=True)
class AnswerPattern:
    """Where in the output the final answer lives, and how to spot it.

    token_match scans the cumulative committed text (token strings in
    position order, space-joined) for `text_regex`; without an id-to-token
    map it falls back to `id_prefix` + `id_candidates` over contiguous
    committed positions. marker_region instead watches the `region_length`
    positions after the marker token and fires once `fill_fraction` of
    them are committed.
    """

    mode: str
    text_regex: str | None = None
    id_prefix: tuple[int, ...] | None = None
    id_candidates: tuple[int, ...] | None = None
    marker: int | str | None = None
    region_length: int = 0
    fill_fraction: float = 0.75

    def __post_init__(self) -> None:
        if self.mode not in ("token_match", "marker_region"):
            raise ValueError(f"unknown answer pattern mode {self.mode!r}")
        if not 0.0 < self.fill_fraction <= 1.0:
            raise ValueError("fill_fraction must lie in (0, 1]")
        if self.mode == "token_match":
            if self.text_regex is None and not (self.id_prefix and self.id_candidates):
                raise ValueError(
                    "token_match needs text_regex or id_prefix + id_candidates"
                )
        elif self.marker is None or self.region_length < 1:
            raise ValueError("marker_region needs a marker and a positive region length")

    def to_json_dict(self) -> dict:
        out: dict = {"mode": self.mode}
        if self.text_regex is not None:
            out["regex"] = self.text_regex
        if self.id_prefix is not None:
            out["id_prefix"] = list(self.id_prefix)
        if self.id_candidates is not None:
            out["id_candidates"] = list(self.id_candidates)
        if self.marker is not None:
            out["marker"] = self.marker
        if self.mode == "marker_region":
            out["region_length"] = self.region_length
            out["fill_fraction"] = self.fill_fraction
        return out

    @classmethod
    def from_json_dict(cls, raw: Mapping) -> "AnswerPattern":
        known = {"mode", "regex", "id_prefix", "id_candidates", "marker",
                 "region_length", "fill_fraction"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown answer pattern fields: {sorted(unknown)}")
        return cls(
            mode=raw["mode"],
            text_regex=raw.get("regex"),
            id_prefix=None if raw.get("id_prefix") is None else tuple(raw["id_prefix"]),
            id_candidates=None
            if raw.get("id_candidates") is None
            else tuple(raw["id_candidates"]),
            marker=raw.get("marker"),
            region_length=int(raw.get("region_length", 0)),
            fill_fraction=float(raw.get("fill_fraction", 0.75)),
        )


def _match_token_ids(committed: list[tuple[int, int]], pattern: AnswerPattern) -> bool:
    # Contiguous committed positions spelling id_prefix, then a candidate id.
    by_position = dict(committed)
    needed = list(pattern.id_prefix)
    for start in by_position:
        run = [by_position.get(start + k) for k in range(len(needed) + 1)]
        if run[: len(needed)] == needed and run[len(needed)] in pattern.id_candidates:
            return True
    return False


def answer_step(
    trace: DecodeTrace,
    pattern: AnswerPattern,
    vocab: OracleMetadata | None = None,
) -> int | None:
    """First step at which the trace's committed output matches `pattern`.

    Returns None when the pattern never matches (including marker tokens
    that were never committed); that is an answer, not an error.
    """
    meta = vocab if vocab is not None else trace.metadata
    if pattern.mode == "token_match":
        return _answer_step_token_match(trace, pattern, meta)
    return _answer_step_marker_region(trace, pattern, meta)


def _answer_step_token_match(
    trace: DecodeTrace, pattern: AnswerPattern, meta: OracleMetadata | None
) -> int | None:
    id_to_token = meta.id_to_token if meta is not None else None
    use_text = pattern.text_regex is not None and id_to_token is not None
    if not use_text and not (pattern.id_prefix and pattern.id_candidates):
        # A text pattern without a token map (and no id fallback) can never
        # match anything; unmatchable configurations answer None, not error.
        return None
    regex = re.compile(pattern.text_regex) if use_text else None
    committed: list[tuple[int, int]] = []
    for record in trace.steps:
        committed.extend((c.position, c.token) for c in record.committed)
        committed.sort()
        if use_text:
            text = " ".join(id_to_token.get(t, f"<{t}>") for _, t in committed)
            if regex.search(text):
                return record.step
        elif _match_token_ids(committed, pattern):
            return record.step
    return None


def _answer_step_marker_region(
    trace: DecodeTrace, pattern: AnswerPattern, meta: OracleMetadata | None
) -> int | None:
    marker = pattern.marker
    if isinstance(marker, str):
        if meta is None or meta.id_to_token is None:
            raise ValueError("a string marker requires an id-to-token map")
        ids = [i for i, tok in meta.id_to_token.items() if tok == marker]
        if not ids:
            return None
        marker_ids = set(ids)
    else:
        marker_ids = {int(marker)}
    tokens = trace.final_tokens()
    marker_positions = sorted(p for p, t in tokens.items() if t in marker_ids)
    if not marker_positions:
        return None
    length = trace.schedule.length
    start = marker_positions[0] + 1
    region = range(start, min(start + pattern.region_length, length))
    size = len(region)
    if size == 0:
        return None
    commit_steps = trace.commit_steps()
    filled = 0
    for record in trace.steps:
        filled += sum(
            1 for position in region if commit_steps.get(position) == record.step
        )
        if filled / size >= pattern.fill_fraction:
            return record.step
    return None


def pdm_curve(
    traces: Iterable[DecodeTrace], buckets: int = 16, committed_only: bool = True
) -> list[tuple[float, float]]:
    """Mean PDM of committed positions, bucketed by relative step i/K.

    Buckets are equal-width over (0, 1]; empty buckets are omitted. Each
    (center, mean) pair averages every record that landed in the bucket
    across all traces. Traces recorded with pdm_all_positions carry records
    for still-masked positions too; those are excluded here unless
    `committed_only` is False.
    """
    if buckets < 1:
        raise ValueError("buckets must be positive")
    sums = [0.0] * buckets
    counts = [0] * buckets
    for trace in traces:
        steps = trace.schedule.K
        commit_steps = (
            trace.commit_steps()
            if committed_only and trace.config.pdm_all_positions
            else None
        )
        for record in trace.steps:
            for entry in record.pdm:
                if commit_steps is not None and commit_steps.get(entry.position) != entry.step:
                    continue
                relative = entry.step / steps
                index = min(buckets - 1, math.ceil(relative * buckets) - 1)
                sums[index] += entry.pdm
                counts[index] += 1
    return [
        ((b + 0.5) / buckets, sums[b] / counts[b])
        for b in range(buckets)
        if counts[b] > 0
    ]


def _config_to_json(config: DecodeConfig) -> dict:
    pattern = config.answer_pattern
    return {
        "strategy": config.strategy.value,
        "gamma": config.gamma,
        "s_vrg": config.s_vrg,
        "vrg_enabled": config.vrg_enabled,
        "psp_enabled": config.psp_enabled,
        "pdm_enabled": config.pdm_enabled,
        "pdm_all_positions": config.pdm_all_positions,
        "length": config.length,
        "steps": config.steps,
        "seed": config.seed,
        "answer_pattern": None if pattern is None else pattern.to_json_dict(),
    }


def _config_from_json(raw: Mapping) -> DecodeConfig:
    known = {"strategy", "gamma", "s_vrg", "vrg_enabled", "psp_enabled",
             "pdm_enabled", "pdm_all_positions", "length", "steps", "seed",
             "answer_pattern"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown decode config fields: {sorted(unknown)}")
    pattern = raw.get("answer_pattern")
    return DecodeConfig(
        length=int(raw["length"]),
        steps=int(raw["steps"]),
        strategy=ScoreStrategy(raw.get("strategy", "low_confidence")),
        gamma=float(raw.get("gamma", 0.5)),
        s_vrg=float(raw.get("s_vrg", 0.5)),
        vrg_enabled=bool(raw.get("vrg_enabled", False)),
        psp_enabled=bool(raw.get("psp_enabled", False)),
        pdm_enabled=bool(raw.get("pdm_enabled", False)),
        pdm_all_positions=bool(raw.get("pdm_all_positions", False)),
        answer_pattern=None if pattern is None else AnswerPattern.from_json_dict(pattern),
        seed=int(raw.get("seed", 0)),
    )


def write_trace(trace: DecodeTrace, target: Path | str | IO[str]) -> None:
    """Serialize one trace as header line + one line per step."""
    if hasattr(target, "write"):
        _write_trace_stream(trace, target)
        return
    with open(target, "w", encoding="utf-8") as stream:
        _write_trace_stream(trace, stream)


def _write_trace_stream(trace: DecodeTrace, stream: IO[str]) -> None:
    meta = trace.metadata
    header = {
        "schema": TRACE_SCHEMA,
        "config": _config_to_json(trace.config),
        "schedule": {
            "K": trace.schedule.K,
            "times": list(trace.schedule.times),
            "masked_targets": list(trace.schedule.masked_targets),
            "commit_counts": list(trace.schedule.commit_counts),
        },
        "oracle_metadata": None
        if meta is None
        else {
            "vocab_size": meta.vocab_size,
            "mask_token_id": meta.mask_token_id,
            "id_to_token": None
            if meta.id_to_token is None
            else {str(k): v for k, v in meta.id_to_token.items()},
        },
    }
    stream.write(json.dumps(header) + "\n")
    for record in trace.steps:
        line = {
            "step": record.step,
            "committed": [
                {
                    "position": c.position,
                    "token": c.token,
                    "confidence": c.confidence,
                    "penalized": c.penalized,
                }
                for c in record.committed
            ],
            "pdm": [{"position": p.position, "pdm": p.pdm} for p in record.pdm],
            "oracle_calls": record.oracle_calls,
        }
        stream.write(json.dumps(line) + "\n")


class TraceFormatError(ValueError):
    """Trace file does not conform to the dift-trace/1 schema."""


def read_trace(source: Path | str | IO[str]) -> DecodeTrace:
    if hasattr(source, "read"):
        return _read_trace_lines(source.read().splitlines())
    with open(source, "r", encoding="utf-8") as stream:
        return _read_trace_lines(stream.read().splitlines())


def _read_trace_lines(lines: Sequence[str]) -> DecodeTrace:
    lines = [line for line in lines if line.strip()]
    if not lines:
        raise TraceFormatError("empty trace file")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise TraceFormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != TRACE_SCHEMA:
        raise TraceFormatError(
            f"unsupported trace schema {header.get('schema')!r}"
            if isinstance(header, dict)
            else "header must be a JSON object"
        )
    try:
        config = _config_from_json(header["config"])
        sched_raw = header["schedule"]
        schedule = StepSchedule(
            K=int(sched_raw["K"]),
            times=tuple(float(t) for t in sched_raw["times"]),
            masked_targets=tuple(int(m) for m in sched_raw["masked_targets"]),
            commit_counts=tuple(int(c) for c in sched_raw["commit_counts"]),
        )
        meta_raw = header.get("oracle_metadata")
        metadata = None
        if meta_raw is not None:
            id_map = meta_raw.get("id_to_token")
            metadata = OracleMetadata(
                vocab_size=int(meta_raw["vocab_size"]),
                mask_token_id=int(meta_raw["mask_token_id"]),
                id_to_token=None
                if id_map is None
                else {int(k): str(v) for k, v in id_map.items()},
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"malformed trace header: {exc}") from exc
    steps = []
    for index, line in enumerate(lines[1:], start=1):
        try:
            raw = json.loads(line)
            steps.append(
                StepRecord(
                    step=int(raw["step"]),
                    committed=tuple(
                        CommitRecord(
                            position=int(c["position"]),
                            token=int(c["token"]),
                            confidence=float(c["confidence"]),
                            penalized=float(c["penalized"]),
                        )
                        for c in raw["committed"]
                    ),
                    pdm=tuple(
                        PdmRecord(
                            step=int(raw["step"]),
                            position=int(p["position"]),
                            pdm=float(p["pdm"]),
                        )
                        for p in raw["pdm"]
                    ),
                    oracle_calls=int(raw["oracle_calls"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"malformed step record on line {index + 1}: {exc}") from exc
    expected = list(range(1, len(steps) + 1))
    if [s.step for s in steps] != expected:
        raise TraceFormatError("step records must appear in order 1..K")
    return DecodeTrace(config=config, schedule=schedule, metadata=metadata, steps=tuple(steps))
