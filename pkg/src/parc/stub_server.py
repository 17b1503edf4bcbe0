"""Scriptable HTTP server speaking the backend protocol, for tests and demos.

    with StubServer(fail_first(2, mock_responder("generation", seed=0))) as srv:
        desc = BackendDescriptor(kind="generation", endpoint=srv.url)

Run ``python -m parc.stub_server --kind generation --seed 0`` to serve the
mock backend over HTTP.
"""

from __future__ import annotations

import argparse
import json
import threading
from collections import Counter
from collections.abc import Callable
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .gateway import BackendDescriptor, MockBackend

# (request body, attempt number for this exact body) -> (HTTP status, JSON body)
Responder = Callable[[dict[str, Any], int], tuple[int, dict[str, Any]]]


def mock_responder(kind: str, seed: int | str = 0, dim: int | None = None) -> Responder:
    """Answer like ``MockBackend`` with endpoint ``mock:<seed>``.

    A fixed ``dim`` makes embedding answers ignore the requested size,
    which simulates a server configured for a different model.
    """
    backend = MockBackend(BackendDescriptor(kind=kind, endpoint=f"mock:{seed}", dim=dim))

    def respond(body: dict[str, Any], attempt: int) -> tuple[int, dict[str, Any]]:
        if body.get("kind") != kind:
            return 400, {"status": "error", "error": f"this stub serves {kind}"}
        params = dict(body.get("params") or {})
        if dim is not None:
            params["dim"] = dim
        return 200, backend._request(body["inputs"], params)

    return respond


def fixed_outputs(text: str) -> Responder:
    def respond(body: dict[str, Any], attempt: int) -> tuple[int, dict[str, Any]]:
        return 200, {"status": "ok", "outputs": [text for _ in body["inputs"]]}

    return respond


def fail_first(n: int, then: Responder, status: int = 503) -> Responder:
    """Fail the first ``n`` attempts of every distinct request, then delegate."""

    def respond(body: dict[str, Any], attempt: int) -> tuple[int, dict[str, Any]]:
        if attempt <= n:
            return status, {"status": "error", "error": f"scripted failure {attempt}/{n}"}
        return then(body, attempt)

    return respond


class StubServer:
    def __init__(self, responder: Responder, host: str = "127.0.0.1", port: int = 0) -> None:
        self.responder = responder
        self.received: list[dict[str, Any]] = []
        self._attempts: Counter[str] = Counter()
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802
                length = int(self.headers.get("Content-Length") or 0)
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._send(400, {"status": "error", "error": "invalid JSON"})
                    return
                key = json.dumps(body, sort_keys=True)
                with stub._lock:
                    stub.received.append(body)
                    stub._attempts[key] += 1
                    attempt = stub._attempts[key]
                status, payload = stub.responder(body, attempt)
                self._send(status, payload)

            def _send(self, status: int, payload: dict[str, Any]) -> None:
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, format: str, *args: Any) -> None:
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/"

    @property
    def request_count(self) -> int:
        with self._lock:
            return len(self.received)

    def start(self) -> StubServer:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> StubServer:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="serve the mock backend over HTTP")
    parser.add_argument("--kind", choices=["generation", "fill_mask", "embedding"], required=True)
    parser.add_argument("--seed", default="0")
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args(argv)
    server = StubServer(mock_responder(args.kind, args.seed, args.dim), args.host, args.port)
    print(f"serving {args.kind} mock on {server.url}", flush=True)
    try:
        server._server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()


if __name__ == "__main__":
    main()
