"""HTTP server that puts any in-process oracle behind the wire protocol.

Single JSON object per line (ndjson framing), float32 numeric precision on
the wire. Contract violations get a 400 with {"error": ...}; the remote
client maps those to transport errors.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import kernels
from .core import TokenSequence
from .oracle import ConditionMode, LogitRow, Oracle, OracleError

log = logging.getLogger("dift.serve")


class WireProtocolError(ValueError):
    """Request violates the wire contract (maps to HTTP 400)."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise WireProtocolError(message)


def _as_wire_floats(values: np.ndarray) -> list[float]:
    # The wire carries float32 serialized as decimal; float() of a float32
    # round-trips exactly through JSON.
    return [float(v) for v in np.asarray(values, dtype=np.float32)]


def sparsify_row(row: LogitRow, top_k: int) -> LogitRow:
    """Keep the top_k logits and bound the dropped softmax mass exactly."""
    if row.is_sparse:
        raise WireProtocolError("row is already sparse")
    _require(top_k >= 2, "top_k must be at least 2")
    if top_k >= len(row.logits):
        return row
    order = np.argsort(-row.logits, kind="stable")[:top_k]
    order.sort()
    probs = kernels.softmax_rows(row.logits[None, :])[0]
    tail = float(max(0.0, 1.0 - probs[order].sum()))
    return LogitRow(
        position=row.position,
        logits=row.logits[order],
        token_ids=order.astype(np.int64),
        tail_mass=tail,
    )


def handle_logits_request(oracle: Oracle, raw: dict, max_top_k: int | None = None) -> dict:
    """Validate one /v1/logits payload and produce the response body."""
    _require(isinstance(raw, dict), "request must be a JSON object")
    known = {"request_id", "token_ids", "masked", "positions", "mode", "top_k"}
    _require(not set(raw) - known, f"unknown request fields: {sorted(set(raw) - known)}")
    _require(isinstance(raw.get("request_id"), str), "request_id must be a string")
    token_ids = raw.get("token_ids")
    masked = raw.get("masked")
    positions = raw.get("positions")
    def _is_int(value) -> bool:
        return isinstance(value, int) and not isinstance(value, bool)

    _require(
        isinstance(token_ids, list) and all(_is_int(t) for t in token_ids),
        "token_ids must be a list of integers",
    )
    _require(
        isinstance(masked, list) and all(isinstance(m, bool) for m in masked),
        "masked must be a list of booleans",
    )
    _require(len(token_ids) == len(masked), "token_ids and masked lengths differ")
    _require(len(token_ids) > 0, "sequence must be non-empty")
    _require(
        isinstance(positions, list) and all(_is_int(p) for p in positions),
        "positions must be a list of integers",
    )
    mode_raw = raw.get("mode")
    try:
        mode = ConditionMode(mode_raw)
    except ValueError:
        raise WireProtocolError(f"unknown mode {mode_raw!r}") from None
    top_k = raw.get("top_k")
    if top_k is not None:
        _require(isinstance(top_k, int) and top_k >= 2, "top_k must be an integer >= 2")
        if max_top_k is not None:
            _require(top_k <= max_top_k, f"top_k exceeds the server limit of {max_top_k}")

    try:
        seq = TokenSequence(tokens=tuple(token_ids), masked=tuple(masked))
        rows = oracle.query(seq, positions, mode)
    except (OracleError, ValueError) as exc:
        raise WireProtocolError(str(exc)) from exc

    wire_rows = []
    for row in rows:
        if top_k is not None and not row.is_sparse:
            row = sparsify_row(row, top_k)
        entry: dict = {"position": row.position, "logits": _as_wire_floats(row.logits)}
        if row.is_sparse:
            entry["token_ids"] = [int(t) for t in row.token_ids]
            entry["tail_mass"] = float(np.float32(row.tail_mass))
        wire_rows.append(entry)
    return {"request_id": raw["request_id"], "rows": wire_rows}


def metadata_response(oracle: Oracle) -> dict:
    meta = oracle.metadata()
    return {
        "vocab_size": meta.vocab_size,
        "mask_token_id": meta.mask_token_id,
        "id_to_token": None
        if meta.id_to_token is None
        else {str(k): v for k, v in meta.id_to_token.items()},
    }


class _OracleHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _send(self, status: int, body: dict) -> None:
        data = (json.dumps(body) + "\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path != "/v1/metadata":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        self._send(200, metadata_response(self.server.oracle))

    def do_POST(self):
        if self.path != "/v1/logits":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            line = self.rfile.read(length).decode().splitlines()
            payload = json.loads(line[0]) if line else None
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "body must be a JSON line"})
            return
        try:
            response = handle_logits_request(
                self.server.oracle, payload, self.server.max_top_k
            )
        except WireProtocolError as exc:
            self._send(400, {"error": str(exc)})
            return
        except Exception as exc:  # defensive: never hang the client
            log.exception("logits request failed")
            self._send(500, {"error": f"internal error: {exc}"})
            return
        self._send(200, response)

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


class OracleServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, oracle: Oracle, max_top_k: int | None = None):
        super().__init__(address, _OracleHandler)
        self.oracle = oracle
        self.max_top_k = max_top_k


def serve_oracle(
    oracle: Oracle,
    host: str = "127.0.0.1",
    port: int = 0,
    max_top_k: int | None = None,
) -> tuple[OracleServer, threading.Thread]:
    """Start serving on a background thread; returns (server, thread).

    Use server.server_address for the bound port; call server.shutdown()
    when done.
    """
    server = OracleServer((host, port), oracle, max_top_k)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
