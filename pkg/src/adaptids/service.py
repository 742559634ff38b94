"""HTTP face of the serving loop.

Endpoints (JSON bodies):
  GET  /status                     phase, generation, hash, counts
  GET  /clusters                   pending cluster summaries
  GET  /clusters/{id}              one cluster with centroid
  GET  /clusters/{id}/samples      evidence previews, ?limit=N
  POST /clusters/{id}/label        {category, name?, analyst?}
  POST /retrain                    start a background retrain
  GET  /report/latest              most recent experiment report

Optional static file serving hosts the labeling console bundle.  A
static token, when configured, must arrive as X-Auth-Token on every
API request.  Built on the stdlib threading server: verdicts, analyst
calls, and the retrain worker all proceed concurrently.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import parse_qs, urlparse

import numpy as np

from .config import ServiceSection
from .errors import DataError
from .flows import LabeledFlow
from .lifecycle import LabelDecision, LifecycleManager

log = logging.getLogger(__name__)


def _hex_preview(flow: LabeledFlow, n_bytes: int = 64) -> dict:
    raw = np.rint(flow.tensor.data[0] * 255.0).astype(np.uint8)
    head = bytes(raw[:n_bytes].tolist())
    printable = "".join(chr(b) if 32 <= b < 127 else "." for b in head)
    return {"hex": head.hex(), "printable": printable,
            "packet_count": flow.tensor.packet_count,
            "source": flow.source,
            "key": list(flow.key.as_tuple()) if flow.key else None}


class IdsService:
    """Wires a LifecycleManager to the HTTP API."""

    def __init__(self, manager: LifecycleManager, cfg: ServiceSection,
                 report_dir: Optional[str | Path] = None):
        self.manager = manager
        self.cfg = cfg
        self.report_dir = Path(report_dir) if report_dir else None
        self.static_dir = Path(cfg.static_dir) if cfg.static_dir else None
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self._retrain_thread: Optional[threading.Thread] = None
        self._feeder: Optional[threading.Thread] = None
        self._stop_feed = threading.Event()

    # -- lifecycle of the server itself ------------------------------------

    def start(self) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((self.cfg.host, self.cfg.port),
                                          handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="ids-http", daemon=True)
        self._thread.start()
        log.info("serving on http://%s:%d", *self._httpd.server_address)

    @property
    def port(self) -> int:
        if self._httpd is None:
            raise RuntimeError("service not started")
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.cfg.host}:{self.port}"

    def stop(self) -> None:
        self._stop_feed.set()
        if self._feeder and self._feeder.is_alive():
            self._feeder.join(timeout=5)
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        if self._thread is None:
            self.start()
        try:
            while True:
                time.sleep(0.5)
        except KeyboardInterrupt:
            self.stop()

    # -- ingestion ----------------------------------------------------------

    def feed(self, flows: Iterable[LabeledFlow],
             interval_s: float = 0.0) -> None:
        """Push flows through detection on a background thread."""

        def run():
            for flow in flows:
                if self._stop_feed.is_set():
                    return
                try:
                    self.manager.observe(flow)
                except Exception:
                    log.exception("ingest failed for one flow")
                if interval_s > 0:
                    time.sleep(interval_s)

        self._feeder = threading.Thread(target=run, name="ids-feed",
                                        daemon=True)
        self._feeder.start()

    # -- retrain worker ------------------------------------------------------

    def start_retrain(self) -> bool:
        """Kick off a retrain thread; False when one is running."""
        if self._retrain_thread and self._retrain_thread.is_alive():
            return False
        self._retrain_thread = threading.Thread(
            target=self.manager.retrain, name="ids-retrain", daemon=True)
        self._retrain_thread.start()
        return True


def _make_handler(service: IdsService):
    manager = service.manager
    token = service.cfg.token

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        # -- helpers -------------------------------------------------------

        def _send_json(self, code: int, payload) -> None:
            body = json.dumps(payload, sort_keys=True).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code: int, message: str) -> None:
            self._send_json(code, {"error": message})

        def _authorized(self) -> bool:
            if token is None:
                return True
            return self.headers.get("X-Auth-Token") == token

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            raw = self.rfile.read(length)
            try:
                doc = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise ValueError("body is not valid JSON")
            if not isinstance(doc, dict):
                raise ValueError("body must be a JSON object")
            return doc

        # -- routing -------------------------------------------------------

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if not parts:
                    return self._static("index.html")
                if parts[0] in ("status", "clusters", "report"):
                    if not self._authorized():
                        return self._error(401, "missing or bad token")
                if parts == ["status"]:
                    return self._send_json(200, manager.status())
                if parts == ["clusters"]:
                    return self._send_json(
                        200, [pc.summary() for pc in manager.pending])
                if parts[0] == "clusters" and len(parts) >= 2:
                    return self._get_cluster(parts, url)
                if parts == ["report", "latest"]:
                    return self._report_latest()
                return self._static("/".join(parts))
            except BrokenPipeError:
                pass
            except Exception as exc:
                log.exception("GET %s failed", self.path)
                self._error(500, str(exc))

        def do_POST(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if not self._authorized():
                    return self._error(401, "missing or bad token")
                if len(parts) == 3 and parts[0] == "clusters" \
                        and parts[2] == "label":
                    return self._post_label(parts[1])
                if parts == ["retrain"]:
                    return self._post_retrain()
                return self._error(404, f"no such endpoint: {url.path}")
            except BrokenPipeError:
                pass
            except Exception as exc:
                log.exception("POST %s failed", self.path)
                self._error(500, str(exc))

        # -- endpoint bodies -------------------------------------------------

        def _get_cluster(self, parts, url):
            try:
                cid = int(parts[1])
            except ValueError:
                return self._error(400, f"bad cluster id {parts[1]!r}")
            try:
                pc = manager.get_cluster(cid)
            except KeyError:
                return self._error(404, f"no pending cluster {cid}")
            if len(parts) == 2:
                detail = pc.summary()
                detail["centroid"] = [round(float(v), 6)
                                      for v in np.asarray(pc.centroid)]
                return self._send_json(200, detail)
            if len(parts) == 3 and parts[2] == "samples":
                qs = parse_qs(url.query)
                try:
                    limit = int(qs.get("limit", ["10"])[0])
                except ValueError:
                    return self._error(400, "limit must be an integer")
                samples = manager.cluster_samples(cid, limit=limit)
                return self._send_json(200, {
                    "cluster_id": cid,
                    "samples": [_hex_preview(f) for f in samples]})
            return self._error(404, "unknown cluster subresource")

        def _post_label(self, raw_id: str):
            try:
                cid = int(raw_id)
            except ValueError:
                return self._error(400, f"bad cluster id {raw_id!r}")
            try:
                body = self._read_body()
            except ValueError as exc:
                return self._error(400, str(exc))
            if "category" not in body:
                return self._error(400, "category is required")
            decision = LabelDecision(
                cluster_id=cid, category=str(body["category"]),
                new_class_name=(str(body["name"])
                                if body.get("name") else None),
                analyst=str(body.get("analyst", "")))
            try:
                pc = manager.decide(decision)
            except KeyError:
                return self._error(404, f"no pending cluster {cid}")
            except FileExistsError as exc:
                return self._error(409, str(exc))
            except DataError as exc:
                return self._error(400, str(exc))
            return self._send_json(200, pc.summary())

        def _post_retrain(self):
            decided = sum(1 for pc in manager.pending
                          if pc.decision is not None)
            if decided == 0:
                return self._error(409, "no decided clusters to retrain on")
            if not service.start_retrain():
                return self._error(409, "a retrain is already running")
            return self._send_json(202, {"status": "retrain started"})

        def _report_latest(self):
            if service.report_dir is None:
                return self._error(404, "no report directory configured")
            path = service.report_dir / "report.json"
            if not path.exists():
                return self._error(404, "no report has been written yet")
            doc = json.loads(path.read_text(encoding="utf-8"))
            return self._send_json(200, doc)

        # -- static assets ----------------------------------------------------

        _TYPES = {".html": "text/html; charset=utf-8",
                  ".js": "text/javascript; charset=utf-8",
                  ".css": "text/css; charset=utf-8",
                  ".map": "application/json",
                  ".json": "application/json",
                  ".svg": "image/svg+xml"}

        def _static(self, rel: str):
            if service.static_dir is None:
                return self._error(404, "no static assets configured")
            root = service.static_dir.resolve()
            target = (root / rel).resolve()
            if not str(target).startswith(str(root)):
                return self._error(403, "path escapes the asset root")
            if target.is_dir():
                target = target / "index.html"
            if not target.exists():
                return self._error(404, f"no such asset: {rel}")
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", self._TYPES.get(
                target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    return Handler
