"""Stub inference worker for gateway integration tests.

Speaks the gateway line protocol over TCP. The test schedule rides in
the request's image reference, so no side channel is needed:

    req  with ref `d<millis>c<class>`  -> sleep, then `resp <id> <class>`
    creq with ref `d<millis>`          -> sleep, then an empty cresp,
                                          unless --trace supplies a
                                          recorded latency + detections

Each request is answered from its own thread, so a slow request never
delays later pipelined ones on the same connection; writes are locked
per connection to keep response lines atomic.

Run as `python -m codedcollage.stubworker --port 0`; the chosen port is
printed as `listening <port>` on stdout.
"""

from __future__ import annotations

import argparse
import re
import socketserver
import threading
import time
from typing import Optional

from . import gateway
from .backend import load_trace
from .codec import Detection

__all__ = ["serve", "main"]

_REF = re.compile(r"d(\d+)(?:c(\d+))?$")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        write_lock = threading.Lock()
        for raw in self.rfile:
            try:
                msg = gateway.parse(raw.decode("ascii"))
            except gateway.ProtocolError:
                self._reply(gateway.ErrorReply(0, "unparseable_line"), write_lock)
                continue
            threading.Thread(
                target=self._answer, args=(msg, write_lock), daemon=True
            ).start()

    def _answer(self, msg: gateway.WireMessage, write_lock: threading.Lock) -> None:
        if isinstance(msg, gateway.ClassifyRequest):
            m = _REF.fullmatch(msg.image_ref)
            if m is None or m.group(2) is None:
                self._reply(gateway.ErrorReply(msg.request_id, "bad_ref"), write_lock)
                return
            time.sleep(int(m.group(1)) / 1000.0)
            self._reply(
                gateway.ClassifyResponse(msg.request_id, int(m.group(2))), write_lock
            )
        elif isinstance(msg, gateway.CollageRequest):
            trace: Optional[tuple[float, list[Detection]]] = self.server.trace  # type: ignore[attr-defined]
            if trace is not None:
                latency, dets = trace
            else:
                m = _REF.fullmatch(msg.image_ref)
                if m is None:
                    self._reply(gateway.ErrorReply(msg.request_id, "bad_ref"), write_lock)
                    return
                latency, dets = int(m.group(1)) / 1000.0, []
            time.sleep(latency)
            self._reply(
                gateway.CollageResponse(msg.request_id, tuple(dets)), write_lock
            )
        else:
            rid = getattr(msg, "request_id", 0)
            self._reply(gateway.ErrorReply(rid, "unexpected_kind"), write_lock)

    def _reply(self, msg: gateway.WireMessage, write_lock: threading.Lock) -> None:
        line = (gateway.frame(msg) + "\n").encode("ascii")
        try:
            with write_lock:
                self.wfile.write(line)
                self.wfile.flush()
        except OSError:
            pass  # peer already gone; nothing useful to do


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, port: int, trace: Optional[tuple[float, list[Detection]]]):
        super().__init__(("127.0.0.1", port), _Handler)
        self.trace = trace


def serve(port: int = 0, trace_path: Optional[str] = None) -> _Server:
    """Bind a stub worker server; the caller drives serve_forever()."""
    trace = None
    if trace_path is not None:
        with open(trace_path, "r", encoding="ascii") as fh:
            trace = load_trace(fh)
    return _Server(port, trace)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="codedcollage-stubworker",
        description="stub inference worker speaking the gateway line protocol",
    )
    parser.add_argument("--port", type=int, default=0, help="0 picks a free port")
    parser.add_argument(
        "--trace", default=None, help="trace file answering collage requests"
    )
    args = parser.parse_args(argv)
    server = serve(args.port, args.trace)
    print(f"listening {server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
