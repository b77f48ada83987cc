"""HTTP/1.1 server for the score-provider protocol.

POST / carries protocol envelopes (op multiplexed in the header);
GET /health returns {"version", "model_id"} as JSON. A single-threaded
server processes requests FIFO, which matches the one-in-flight contract
on the engine side.
"""

from __future__ import annotations

import argparse
import json
import logging
from http.server import BaseHTTPRequestHandler, HTTPServer

from . import protocol
from .model import load_model
from .service import SIDECAR_VERSION, SidecarConfig, handle_request

log = logging.getLogger(__name__)


def make_server(cfg: SidecarConfig) -> HTTPServer:
    model = load_model(cfg.model_id, seed=cfg.seed)

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, body: bytes, status: int = 200,
                  ctype: str = "application/octet-stream"):
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path.rstrip("/") in ("", "/health".rstrip("/")):
                body = json.dumps({"version": protocol.PROTOCOL_VERSION,
                                   "model_id": model.model_id,
                                   "sidecar_version": SIDECAR_VERSION}).encode()
                self._send(body, ctype="application/json")
            else:
                self._send(b"not found", status=404, ctype="text/plain")

        def do_POST(self):
            n = int(self.headers.get("Content-Length", 0))
            data = self.rfile.read(n)
            self._send(handle_request(model, cfg, data))

    server = HTTPServer((cfg.host, cfg.port), Handler)
    server.sidecar_model = model
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="solofield-sidecar")
    parser.add_argument("--model", default="tiny")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=7433)
    parser.add_argument("--guidance", type=float, default=100.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    cfg = SidecarConfig(model_id=args.model, host=args.host, port=args.port,
                        guidance=args.guidance, seed=args.seed)
    logging.basicConfig(level=logging.INFO)
    server = make_server(cfg)
    log.info("sidecar (%s) listening on %s:%d", cfg.model_id,
             cfg.host, server.server_port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
