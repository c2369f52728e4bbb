"""The model abstraction: (masked sequence, condition mode) -> per-position logits.

Ships synthetic in-process oracles for testing and a remote client speaking
the newline-delimited-JSON wire protocol. The "visual" condition is
generalized to a droppable condition segment, so text-only toys can
exercise guidance and dependency measurement identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import TokenSequence


class ConditionMode(Enum):
    """Which condition set the model sees: everything, or everything minus
    the designated droppable (visual) segment. The text prompt is never
    dropped."""

    FULL = "full"
    NO_VISUAL = "no_visual"


class OracleError(Exception):
    """Base for oracle contract violations."""


class PositionNotMaskedError(OracleError, ValueError):
    """A queried position is not masked in the given sequence."""


class OracleTransportError(OracleError, RuntimeError):
    """Remote failure: timeout, HTTP error, or malformed response."""


@dataclass(frozen=True, eq=False, slots=True)
class LogitRow:
    """Raw logits for one position.

    Dense rows (`token_ids is None`) cover the whole vocabulary. Sparse
    rows list `token_ids` explicitly and carry `tail_mass`, an upper bound
    on the softmax probability of every absent id combined.
    """

    position: int
    logits: np.ndarray
    token_ids: np.ndarray | None = None
    tail_mass: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "logits", np.ascontiguousarray(self.logits, dtype=np.float64)
        )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        if self.token_ids is not None:
            object.__setattr__(
                self, "token_ids", np.ascontiguousarray(self.token_ids, dtype=np.int64)
            )
            if len(self.token_ids) != len(self.logits):
                raise ValueError("sparse row token_ids/logits length mismatch")
            if len(self.token_ids) < 2:
                raise ValueError("sparse rows need at least 2 entries")
            if not 0.0 <= self.tail_mass <= 1.0:
                raise ValueError("tail_mass must lie in [0, 1]")

    @property
    def is_sparse(self) -> bool:
        return self.token_ids is not None

    def to_distribution(self, vocab_size: int) -> np.ndarray:
        """Normalized probabilities over the full vocabulary.

        Sparse rows softmax their entries, scale by (1 - tail_mass), and
        spread the residual uniformly over absent ids.
        """
        from . import kernels

        if not self.is_sparse:
            if len(self.logits) != vocab_size:
                raise ValueError(
                    f"dense row has {len(self.logits)} entries, vocab is {vocab_size}"
                )
            return kernels.softmax_rows(self.logits[None, :])[0]
        present = kernels.softmax_rows(self.logits[None, :])[0]
        out = np.empty(vocab_size, dtype=np.float64)
        absent = vocab_size - len(self.token_ids)
        out.fill(self.tail_mass / absent if absent > 0 else 0.0)
        out[self.token_ids] = present * (1.0 - self.tail_mass)
        return out


@dataclass(frozen=True, slots=True)
class OracleMetadata:
    vocab_size: int
    mask_token_id: int
    id_to_token: Mapping[int, str] | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ValueError("mask_token_id must be a valid vocabulary id")


class Oracle:
    """Base class: deterministic per-position logits for masked positions.

    Implementations must be safe for concurrent queries from independent
    decodes; a single decode issues its queries sequentially.
    """

    def metadata(self) -> OracleMetadata:
        raise NotImplementedError

    def query(
        self,
        seq: TokenSequence,
        positions: Sequence[int],
        mode: ConditionMode,
    ) -> list[LogitRow]:
        raise NotImplementedError

    @staticmethod
    def _check_positions(seq: TokenSequence, positions: Sequence[int]) -> None:
        for j in positions:
            if not 0 <= j < seq.length:
                raise PositionNotMaskedError(f"position {j} out of range")
            if not seq.masked[j]:
                raise PositionNotMaskedError(f"position {j} is not masked")


def _profile_vector(profile: float | Sequence[float], length: int) -> list[float]:
    values = [float(profile)] * length if isinstance(profile, (int, float)) else [
        float(p) for p in profile
    ]
    if len(values) != length:
        raise ValueError("confidence profile length must match the target length")
    if any(not 0.0 < p < 1.0 for p in values):
        raise ValueError("confidence profile values must lie in (0, 1)")
    return values


def _peaked_logits(vocab_size: int, target: int, peak: float) -> np.ndarray:
    # log-probabilities of: `peak` on the target, remainder uniform elsewhere.
    # softmax recovers the distribution exactly (up to round-off).
    rest = (1.0 - peak) / (vocab_size - 1)
    row = np.full(vocab_size, np.log(rest), dtype=np.float64)
    row[target] = np.log(peak)
    return row


class TemplateOracle(Oracle):
    """Puts probability `profile[j]` on `target[j]`, remainder uniform.

    State-independent by construction, so rows are precomputed once. An
    optional `answer_bias` boosts one position's target probability,
    reproducing the early-answer phenomenon: that position tops every
    confidence ranking from step 1.
    """

    def __init__(
        self,
        target: Sequence[int],
        confidence_profile: float | Sequence[float],
        answer_bias: tuple[int, float] | None = None,
        *,
        vocab_size: int,
        mask_token_id: int,
        id_to_token: Mapping[int, str] | None = None,
    ) -> None:
        if vocab_size < 2:
            raise ValueError("template oracle needs a vocabulary of at least 2")
        target = [int(t) for t in target]
        if any(not 0 <= t < vocab_size for t in target):
            raise ValueError("target tokens must be valid vocabulary ids")
        profile = _profile_vector(confidence_profile, len(target))
        if answer_bias is not None:
            position, boost = int(answer_bias[0]), float(answer_bias[1])
            if position < 0:
                position += len(target)
            if not 0 <= position < len(target):
                raise ValueError("answer_bias position out of range")
            profile[position] += boost
            if not 0.0 < profile[position] < 1.0:
                raise ValueError("boosted profile value must stay inside (0, 1)")
        self._meta = OracleMetadata(vocab_size, mask_token_id, id_to_token)
        self._rows = np.stack(
            [_peaked_logits(vocab_size, t, p) for t, p in zip(target, profile)]
        )
        self.target = tuple(target)

    @property
    def length(self) -> int:
        return self._rows.shape[0]

    def metadata(self) -> OracleMetadata:
        return self._meta

    def query(self, seq, positions, mode):
        self._check_positions(seq, positions)
        if seq.length != self.length:
            raise OracleError(
                f"sequence length {seq.length} does not match template length {self.length}"
            )
        return [LogitRow(position=j, logits=self._rows[j].copy()) for j in positions]


def make_template_oracle(
    target: Sequence[int],
    confidence_profile: float | Sequence[float],
    answer_bias: tuple[int, float] | None = None,
    *,
    vocab_size: int,
    mask_token_id: int,
    id_to_token: Mapping[int, str] | None = None,
) -> TemplateOracle:
    """Synthetic oracle whose argmax reproduces `target` at every position."""
    return TemplateOracle(
        target,
        confidence_profile,
        answer_bias,
        vocab_size=vocab_size,
        mask_token_id=mask_token_id,
        id_to_token=id_to_token,
    )


class ConditionalMixtureOracle(Oracle):
    """Template oracle whose rows depend on the condition mode.

    Positions listed in `visual_positions` favor `visual_target[j]` under
    FULL and fall back to `base_target[j]` under NO_VISUAL; all other
    positions produce bit-identical rows in both modes.
    """

    def __init__(
        self,
        base_target: Sequence[int],
        visual_target: Mapping[int, int],
        confidence_profile: float | Sequence[float],
        *,
        vocab_size: int,
        mask_token_id: int,
        id_to_token: Mapping[int, str] | None = None,
    ) -> None:
        if vocab_size < 2:
            raise ValueError("mixture oracle needs a vocabulary of at least 2")
        base = [int(t) for t in base_target]
        profile = _profile_vector(confidence_profile, len(base))
        self.visual_positions = frozenset(int(j) for j in visual_target)
        for j, t in visual_target.items():
            if not 0 <= int(j) < len(base):
                raise ValueError("visual-dependent position out of range")
            if int(t) == base[int(j)]:
                raise ValueError(
                    "visual target must differ from the base target at flagged positions"
                )
        self._meta = OracleMetadata(vocab_size, mask_token_id, id_to_token)
        self._rows_no_visual = np.stack(
            [_peaked_logits(vocab_size, t, p) for t, p in zip(base, profile)]
        )
        self._rows_full = self._rows_no_visual.copy()
        for j, t in visual_target.items():
            self._rows_full[int(j)] = _peaked_logits(vocab_size, int(t), profile[int(j)])

    @property
    def length(self) -> int:
        return self._rows_full.shape[0]

    def metadata(self) -> OracleMetadata:
        return self._meta

    def query(self, seq, positions, mode):
        self._check_positions(seq, positions)
        if seq.length != self.length:
            raise OracleError(
                f"sequence length {seq.length} does not match template length {self.length}"
            )
        rows = self._rows_full if mode is ConditionMode.FULL else self._rows_no_visual
        return [LogitRow(position=j, logits=rows[j].copy()) for j in positions]


class RandomOracle(Oracle):
    """Deterministic pseudo-random logits keyed by (state, position, mode, seed).

    Rows are reproducible across processes: the sequence state is hashed
    into seed material for a per-position PCG64 stream. The mask token's
    logit is floored so greedy decoding never commits it.
    """

    def __init__(self, seed: int, *, vocab_size: int, mask_token_id: int, scale: float = 2.0) -> None:
        if vocab_size < 2:
            raise ValueError("random oracle needs a vocabulary of at least 2")
        self._meta = OracleMetadata(vocab_size, mask_token_id)
        self.seed = int(seed)
        self.scale = float(scale)
        self._cache: dict[tuple, list[LogitRow]] = {}
        self._lock = threading.Lock()

    def metadata(self) -> OracleMetadata:
        return self._meta

    def _state_words(self, seq: TokenSequence, mode: ConditionMode) -> tuple[int, int]:
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<q", self.seed))
        h.update(mode.value.encode())
        h.update(np.asarray(seq.tokens, dtype=np.uint32).tobytes())
        h.update(np.packbits(np.asarray(seq.masked, dtype=np.uint8)).tobytes())
        digest = h.digest()
        return (
            int.from_bytes(digest[:8], "little"),
            int.from_bytes(digest[8:], "little"),
        )

    def query(self, seq, positions, mode):
        self._check_positions(seq, positions)
        key = (seq.tokens, seq.masked, tuple(positions), mode)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return list(cached)
        w0, w1 = self._state_words(seq, mode)
        vocab = self._meta.vocab_size
        rows = []
        for j in positions:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([w0, w1, int(j)]))
            )
            logits = rng.normal(0.0, self.scale, vocab)
            logits[self._meta.mask_token_id] = logits.min() - 10.0
            rows.append(LogitRow(position=j, logits=logits))
        with self._lock:
            self._cache[key] = rows
        return list(rows)


class FixedOracle(Oracle):
    """Echoes a fixed per-position logit table, ignoring state and mode."""

    def __init__(
        self,
        rows: Sequence[Sequence[float]],
        *,
        mask_token_id: int,
        id_to_token: Mapping[int, str] | None = None,
    ) -> None:
        table = np.asarray(rows, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError("fixed oracle table must be 2-dimensional")
        self._table = table
        self._meta = OracleMetadata(table.shape[1], mask_token_id, id_to_token)

    @property
    def length(self) -> int:
        return self._table.shape[0]

    def metadata(self) -> OracleMetadata:
        return self._meta

    def query(self, seq, positions, mode):
        self._check_positions(seq, positions)
        if seq.length != self._table.shape[0]:
            raise OracleError("sequence length does not match the fixed table")
        return [LogitRow(position=j, logits=self._table[j].copy()) for j in positions]


class RemoteOracle(Oracle):
    """Wire-protocol client: POST /v1/logits, GET /v1/metadata.

    Responses are cached per request id (a content hash), so identical
    queries return bit-identical rows within a session. All transport
    failures surface as OracleTransportError.
    """

    def __init__(self, base_url: str, *, timeout: float = 10.0, top_k: int | None = None) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        if top_k is not None and top_k < 2:
            raise ValueError("top_k must be at least 2")
        self.top_k = top_k
        self._meta: OracleMetadata | None = None
        self._cache: dict[str, list[LogitRow]] = {}
        self._lock = threading.Lock()

    def _http(self, path: str, payload: dict | None = None) -> dict:
        url = self.base_url + path
        data = None
        headers = {"Accept": "application/x-ndjson"}
        if payload is not None:
            data = (json.dumps(payload) + "\n").encode()
            headers["Content-Type"] = "application/x-ndjson"
        request = urllib.request.Request(url, data=data, headers=headers)
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            detail = ""
            try:
                detail = json.loads(exc.read().decode()).get("error", "")
            except Exception:
                pass
            raise OracleTransportError(
                f"{path} failed with HTTP {exc.code}: {detail or exc.reason}"
            ) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise OracleTransportError(f"{path} unreachable: {exc}") from exc
        try:
            return json.loads(body.decode().splitlines()[0])
        except (IndexError, ValueError) as exc:
            raise OracleTransportError(f"{path} returned malformed JSON") from exc

    def metadata(self) -> OracleMetadata:
        if self._meta is None:
            raw = self._http("/v1/metadata")
            try:
                id_map = raw.get("id_to_token")
                self._meta = OracleMetadata(
                    vocab_size=int(raw["vocab_size"]),
                    mask_token_id=int(raw["mask_token_id"]),
                    id_to_token=None
                    if id_map is None
                    else {int(k): str(v) for k, v in id_map.items()},
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise OracleTransportError(f"malformed metadata response: {exc}") from exc
        return self._meta

    def query(self, seq, positions, mode):
        self._check_positions(seq, positions)
        payload = {
            "token_ids": list(seq.tokens),
            "masked": list(seq.masked),
            "positions": [int(j) for j in positions],
            "mode": mode.value,
        }
        if self.top_k is not None:
            payload["top_k"] = self.top_k
        request_id = hashlib.blake2b(
            json.dumps(payload, sort_keys=True).encode(), digest_size=16
        ).hexdigest()
        with self._lock:
            cached = self._cache.get(request_id)
        if cached is not None:
            return list(cached)
        payload["request_id"] = request_id
        raw = self._http("/v1/logits", payload)
        if raw.get("request_id") != request_id:
            raise OracleTransportError("response request_id does not match the request")
        try:
            rows = [
                LogitRow(
                    position=int(r["position"]),
                    logits=np.asarray(r["logits"], dtype=np.float64),
                    token_ids=None
                    if r.get("token_ids") is None
                    else np.asarray(r["token_ids"], dtype=np.int64),
                    tail_mass=float(r.get("tail_mass", 0.0)),
                )
                for r in raw["rows"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise OracleTransportError(f"malformed logits response: {exc}") from exc
        if sorted(r.position for r in rows) != sorted(int(j) for j in positions):
            raise OracleTransportError("response rows do not cover the requested positions")
        with self._lock:
            self._cache[request_id] = rows
        return list(rows)


class LatencyOracle(Oracle):
    """Adds a fixed per-query delay to a wrapped oracle (cost modelling)."""

    def __init__(self, inner: Oracle, latency_s: float) -> None:
        self.inner = inner
        self.latency_s = latency_s

    def metadata(self) -> OracleMetadata:
        return self.inner.metadata()

    def query(self, seq, positions, mode):
        time.sleep(self.latency_s)
        return self.inner.query(seq, positions, mode)


def _parse_id_to_token(raw: Mapping | None) -> dict[int, str] | None:
    if raw is None:
        return None
    return {int(k): str(v) for k, v in raw.items()}


def oracle_from_spec(spec: Mapping, *, seed: int, length: int) -> Oracle:
    """Build an oracle from a JSON-style spec (the CLI config's `oracle` block).

    Kinds: template, mixture, random, fixed, remote. A missing template
    target is drawn from `seed`, which is how campaign repetitions vary.
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    latency_ms = float(spec.pop("latency_ms", 0.0))
    oracle: Oracle
    if kind == "template":
        vocab_size = int(spec.pop("vocab_size"))
        mask_token_id = int(spec.pop("mask_token_id"))
        target = spec.pop("target", None)
        if target is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
            ids = [t for t in range(vocab_size) if t != mask_token_id]
            target = [int(t) for t in rng.choice(ids, size=length)]
        bias = spec.pop("answer_bias", None)
        if bias is not None:
            bias = (int(bias["position"]), float(bias["boost"]))
        oracle = TemplateOracle(
            target,
            spec.pop("profile", 0.6),
            bias,
            vocab_size=vocab_size,
            mask_token_id=mask_token_id,
            id_to_token=_parse_id_to_token(spec.pop("id_to_token", None)),
        )
    elif kind == "mixture":
        oracle = ConditionalMixtureOracle(
            spec.pop("base_target"),
            {int(k): int(v) for k, v in spec.pop("visual_target").items()},
            spec.pop("profile", 0.6),
            vocab_size=int(spec.pop("vocab_size")),
            mask_token_id=int(spec.pop("mask_token_id")),
            id_to_token=_parse_id_to_token(spec.pop("id_to_token", None)),
        )
    elif kind == "random":
        oracle = RandomOracle(
            seed,
            vocab_size=int(spec.pop("vocab_size")),
            mask_token_id=int(spec.pop("mask_token_id")),
            scale=float(spec.pop("scale", 2.0)),
        )
    elif kind == "fixed":
        oracle = FixedOracle(
            spec.pop("rows"),
            mask_token_id=int(spec.pop("mask_token_id")),
            id_to_token=_parse_id_to_token(spec.pop("id_to_token", None)),
        )
    elif kind == "remote":
        oracle = RemoteOracle(
            spec.pop("url"),
            timeout=float(spec.pop("timeout", 10.0)),
            top_k=spec.pop("top_k", None),
        )
    else:
        raise ValueError(f"unknown oracle kind: {kind!r}")
    if spec:
        raise ValueError(f"unknown oracle spec fields: {sorted(spec)}")
    if latency_ms > 0.0:
        oracle = LatencyOracle(oracle, latency_ms / 1000.0)
    return oracle
