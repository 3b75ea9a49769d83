"""Replay stub for the remote inference protocol.

``POST /`` with ``{"prompt": str}`` answers ``200 {"text": str}``. Answers
come from a golden file of PromptSample records, looked up by the
``X-Episode-Id``/``X-Step-Index`` headers and, failing that, by the exact
prompt text. ``malformed=True`` answers every request with ``"garbage"``.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Optional

log = logging.getLogger(__name__)

MALFORMED_TEXT = "garbage"


class GoldenTable:
    def __init__(self, records: Iterable[dict] = ()):
        self.by_key: dict[tuple[str, int], str] = {}
        self.by_prompt: dict[str, str] = {}
        for rec in records:
            self.add(rec)

    def add(self, rec: dict) -> None:
        key = (str(rec["episode_id"]), int(rec["step_index"]))
        self.by_key[key] = rec["response"]
        if "prompt" in rec:
            self.by_prompt.setdefault(rec["prompt"], rec["response"])

    @classmethod
    def load(cls, path: str) -> "GoldenTable":
        with open(path, encoding="utf-8") as f:
            return cls(json.loads(line) for line in f if line.strip())

    def lookup(self, episode_id: Optional[str], step: Optional[str], prompt: str) -> Optional[str]:
        if episode_id is not None and step is not None:
            try:
                hit = self.by_key.get((episode_id, int(step)))
            except ValueError:
                hit = None
            if hit is not None:
                return hit
        return self.by_prompt.get(prompt)

    def __len__(self):
        return len(self.by_key)


def _handler(table: GoldenTable, malformed: bool):
    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            try:
                n = int(self.headers.get("Content-Length", "0"))
                req = json.loads(self.rfile.read(n).decode("utf-8"))
                prompt = req["prompt"]
            except (ValueError, KeyError, TypeError):
                self._send(400, {"error": "expected {\"prompt\": str}"})
                return
            if malformed:
                self._send(200, {"text": MALFORMED_TEXT})
                return
            text = table.lookup(self.headers.get("X-Episode-Id"), self.headers.get("X-Step-Index"), prompt)
            if text is None:
                self._send(404, {"error": "no golden response for this request"})
                return
            self._send(200, {"text": text})

        def log_message(self, fmt, *args):
            log.debug("stub: " + fmt, *args)

    return Handler


class StubServer:
    """Threaded stub; use as a context manager or call ``serve_forever``."""

    def __init__(self, table: GoldenTable, host: str = "127.0.0.1", port: int = 0, malformed: bool = False):
        self.httpd = ThreadingHTTPServer((host, port), _handler(table, malformed))
        self.httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def serve_forever(self) -> None:
        try:
            self.httpd.serve_forever()
        finally:
            self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
