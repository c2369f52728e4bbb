"""HTTP server exposing a masked-LM backend over the logit wire protocol.

One forward pass per POST /v1/logits request; GET /v1/metadata reports the
session's vocabulary. Responses are single JSON lines with float32 numeric
precision. While the model is still loading every request gets a 503.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .model import LogitBackend, load_image, load_model

log = logging.getLogger("dift_bridge")

MODES = ("full", "no_visual")


@dataclass
class BridgeSession:
    """One served model plus its fixed condition assets."""

    model_id: str
    prompt: str
    image_spec: str | None
    backend: LogitBackend
    device: str = "cpu"

    @property
    def mask_token_id(self) -> int:
        return self.backend.mask_token_id


class ProtocolError(ValueError):
    """Request violates the wire contract (HTTP 400)."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ProtocolError(message)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def handle_logits(session: BridgeSession, raw, max_top_k: int | None) -> dict:
    _require(isinstance(raw, dict), "request must be a JSON object")
    known = {"request_id", "token_ids", "masked", "positions", "mode", "top_k"}
    _require(not set(raw) - known, f"unknown request fields: {sorted(set(raw) - known)}")
    _require(isinstance(raw.get("request_id"), str), "request_id must be a string")
    tokens = raw.get("token_ids")
    masked = raw.get("masked")
    positions = raw.get("positions")
    _require(
        isinstance(tokens, list) and all(_is_int(t) for t in tokens),
        "token_ids must be a list of integers",
    )
    _require(
        isinstance(masked, list) and all(isinstance(m, bool) for m in masked),
        "masked must be a list of booleans",
    )
    _require(len(tokens) == len(masked), "token_ids and masked lengths differ")
    _require(len(tokens) > 0, "sequence must be non-empty")
    _require(
        isinstance(positions, list) and all(_is_int(p) for p in positions),
        "positions must be a list of integers",
    )
    vocab_size = len(session.backend.vocab)
    _require(all(0 <= t < vocab_size for t in tokens), "token id outside the vocabulary")
    for p in positions:
        _require(0 <= p < len(tokens), f"position {p} out of range")
        _require(masked[p], f"position {p} is not masked")
    mode = raw.get("mode")
    _require(mode in MODES, f"unknown mode {mode!r}")
    top_k = raw.get("top_k")
    if top_k is not None:
        _require(_is_int(top_k) and top_k >= 2, "top_k must be an integer >= 2")
        if max_top_k is not None:
            _require(top_k <= max_top_k, f"top_k exceeds the server limit of {max_top_k}")

    try:
        matrix = session.backend.logits(tokens, masked, positions, visual=mode == "full")
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc

    rows = []
    for row_index, position in enumerate(positions):
        logits = matrix[row_index]
        if top_k is not None and top_k < vocab_size:
            order = np.argsort(-logits, kind="stable")[:top_k]
            order.sort()
            shifted = np.exp(logits - logits.max())
            probs = shifted / shifted.sum()
            tail = float(max(0.0, 1.0 - probs[order].sum()))
            rows.append(
                {
                    "position": position,
                    "token_ids": [int(t) for t in order],
                    "logits": [float(v) for v in logits[order].astype(np.float32)],
                    "tail_mass": float(np.float32(tail)),
                }
            )
        else:
            rows.append(
                {
                    "position": position,
                    "logits": [float(v) for v in logits.astype(np.float32)],
                }
            )
    return {"request_id": raw["request_id"], "rows": rows}


def metadata_payload(session: BridgeSession) -> dict:
    return {
        "vocab_size": len(session.backend.vocab),
        "mask_token_id": session.backend.mask_token_id,
        "id_to_token": {str(i): w for i, w in enumerate(session.backend.vocab)},
    }


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _send(self, status: int, body: dict) -> None:
        data = (json.dumps(body) + "\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _session(self) -> BridgeSession | None:
        return self.server.session

    def _loading_message(self) -> str:
        if self.server.load_error is not None:
            return f"model failed to load: {self.server.load_error}"
        return "model is still loading"

    def do_GET(self):
        session = self._session()
        if session is None:
            self._send(503, {"error": self._loading_message()})
            return
        if self.path != "/v1/metadata":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        self._send(200, metadata_payload(session))

    def do_POST(self):
        session = self._session()
        if session is None:
            self._send(503, {"error": self._loading_message()})
            return
        if self.path != "/v1/logits":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            lines = self.rfile.read(length).decode().splitlines()
            payload = json.loads(lines[0]) if lines else None
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "body must be a JSON line"})
            return
        try:
            self._send(200, handle_logits(session, payload, self.server.max_top_k))
        except ProtocolError as exc:
            self._send(400, {"error": str(exc)})
        except Exception as exc:
            log.exception("forward pass failed")
            self._send(500, {"error": f"internal error: {exc}"})

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


class BridgeServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, max_top_k: int | None = None):
        super().__init__(address, _Handler)
        self.session: BridgeSession | None = None
        self.load_error: str | None = None
        self.max_top_k = max_top_k


def serve(
    model_spec: str,
    bind_addr: tuple[str, int] = ("127.0.0.1", 0),
    *,
    prompt: str = "",
    image: str | None = None,
    max_top_k: int | None = None,
    loaded_event: threading.Event | None = None,
) -> tuple[BridgeServer, threading.Thread]:
    """Bind immediately, load the model, then start answering.

    Requests arriving before the load finishes get a 503. `loaded_event`,
    when given, gates the load (used to test the loading window).
    """
    from pathlib import Path

    if not model_spec.startswith("builtin:") and not Path(model_spec).exists():
        raise FileNotFoundError(f"model checkpoint {model_spec!r} not found")
    server = BridgeServer(bind_addr, max_top_k=max_top_k)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()

    def load() -> None:
        if loaded_event is not None:
            loaded_event.wait()
        try:
            backend = load_model(model_spec)
            backend.condition_on(prompt, load_image(image, backend.image_dim))
        except Exception as exc:
            server.load_error = str(exc)
            log.exception("loading %s failed", model_spec)
            return
        server.session = BridgeSession(
            model_id=model_spec, prompt=prompt, image_spec=image, backend=backend
        )
        log.info("model %s ready (vocab %d)", model_spec, len(backend.vocab))

    loader = threading.Thread(target=load, daemon=True)
    loader.start()
    return server, thread


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dift-bridge",
        description="Serve a masked-diffusion model's logits over the wire protocol.",
    )
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument(
        "--model", default="builtin:demo",
        help="'builtin:<name>' or a path to a saved .npz checkpoint",
    )
    parser.add_argument("--prompt", default="", help="text prompt for the session")
    parser.add_argument(
        "--image", default=None,
        help="visual condition: 'synthetic:<seed>' or a JSON feature file",
    )
    parser.add_argument("--top-k-max", type=int, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    try:
        server, thread = serve(
            args.model,
            (args.host, args.port),
            prompt=args.prompt,
            image=args.image,
            max_top_k=args.top_k_max,
        )
    except (OSError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    host, port = server.server_address[:2]
    print(json.dumps({"schema": "dift-bridge/1", "address": f"{host}:{port}"}))
    sys.stdout.flush()
    try:
        thread.join()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
