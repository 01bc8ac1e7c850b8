"""HTTP scoring service: per-record prediction with optional Shapley explanation.

Endpoints: ``POST /predict``, ``GET /health``, ``GET /model`` and
``POST /reload``. Every handler reads the current model through one
reference, so a reload swaps models atomically and in-flight requests finish
on the model they started with.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from datetime import date
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import __version__
from .explain import explain
from .ingest import DEFAULT_SCHEMA, TelemetryRecord, engineer_features
from .models import DimensionMismatch, TrainedModel, load_model

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 3
SERVE_PERMUTATIONS = 100
MAX_BODY = 1 << 20

# record attributes a raw request must carry for the model features to exist
RAW_REQUIRED = (
    "number_of_days",
    "running_time",
    "consumption_his",
    "generator_capacity_kva",
    "previous_fuel_qte",
    "qte_fuel_added",
    "qte_fuel_found",
    "total_qte_left",
    "maximum_consumption_per_day",
)
_HEADER_TO_ATTR = {h: a for a, h in DEFAULT_SCHEMA.items()}


class RequestError(Exception):
    status = HTTPStatus.BAD_REQUEST


class DimensionError(RequestError):
    status = HTTPStatus.UNPROCESSABLE_ENTITY


@dataclass(frozen=True)
class LoadedModel:
    model: TrainedModel
    model_hash: str
    path: str | None
    background: np.ndarray | None
    loaded_at: float


def _load(path, background=None) -> LoadedModel:
    model = load_model(path)
    bg = background
    if bg is None and model.meta.get("background") is not None:
        bg = np.asarray(model.meta["background"], dtype=np.float64)
    return LoadedModel(model, model.model_hash(), str(path), bg, time.time())


def _number(name, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RequestError(f"feature {name!r} must be a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise RequestError(f"feature {name!r} must be finite")
    return v


def record_from_mapping(raw: dict) -> TelemetryRecord:
    """Build a record from attribute names or export headers; identifiers optional."""
    values = {_HEADER_TO_ATTR.get(k, k): v for k, v in raw.items()}
    missing = [a for a in RAW_REQUIRED if values.get(a) is None]
    if missing:
        raise RequestError(f"raw record is missing {missing}")
    fields = {a: _number(a, values[a]) for a in RAW_REQUIRED}
    for a in ("current_hour_meter", "previous_hour_meter", "fuel_consumed_between_visits"):
        if values.get(a) is not None:
            fields[a] = _number(a, values[a])
    dates = {}
    for a in ("effective_date_of_visit", "previous_date_of_visit"):
        v = values.get(a)
        try:
            dates[a] = date.fromisoformat(v) if isinstance(v, str) else None
        except ValueError as exc:
            raise RequestError(f"{a}: {exc}") from None
    return TelemetryRecord(
        site_name=str(values.get("site_name", "")),
        cluster=str(values.get("cluster", "")),
        effective_date_of_visit=dates["effective_date_of_visit"],
        previous_date_of_visit=dates["previous_date_of_visit"],
        current_hour_meter=fields.pop("current_hour_meter", None),
        previous_hour_meter=fields.pop("previous_hour_meter", None),
        **fields,
    )


def feature_vector(model: TrainedModel, body: dict) -> np.ndarray:
    """Model input row from a request body.

    ``features`` may be a list in model order or a name -> value map;
    ``record`` may be an engineered feature map or a raw visit record, which
    goes through the same feature engineering as ingestion.
    """
    names = model.feature_names
    if "features" in body:
        f = body["features"]
        if isinstance(f, list):
            if len(f) != len(names):
                raise DimensionError(f"model expects {len(names)} features, got {len(f)}")
            return np.array([_number(n, v) for n, v in zip(names, f)])
        if not isinstance(f, dict):
            raise RequestError("'features' must be a list or an object")
        record = f
    elif isinstance(body.get("record"), dict):
        record = body["record"]
    else:
        raise RequestError("request needs a 'record' object or a 'features' list")
    if all(n in record for n in names):
        return np.array([_number(n, record[n]) for n in names])
    rec = engineer_features(record_from_mapping(record))
    return np.array([_number(n, getattr(rec, n)) for n in names])


class ScoringService:
    """Transport-independent request handling, shared by the HTTP handler and tests."""

    def __init__(self, model_path, *, background=None, explain_default: bool = False):
        self._background = background
        self.current = _load(model_path, background)
        self.explain_default = explain_default
        self.started = time.time()
        self._reload_lock = threading.Lock()

    def predict(self, body) -> tuple[int, dict]:
        t0 = time.perf_counter()
        state = self.current
        if not isinstance(body, dict):
            raise RequestError("request body must be a JSON object")
        model = state.model
        x = feature_vector(model, body)
        try:
            P, labels = model.predict(x[None, :])
            proba, label = P[0], int(labels[0])
        except DimensionMismatch as exc:
            raise DimensionError(str(exc)) from None
        c = int(np.flatnonzero(model.classes == label)[0])
        out = {
            "predicted_class": label,
            "probabilities": {str(int(k)): float(p) for k, p in zip(model.classes, proba)},
            "model_hash": state.model_hash,
        }
        want = body.get("explain", self.explain_default)
        if not isinstance(want, bool):
            raise RequestError("'explain' must be a boolean")
        if want:
            top_k = body.get("top_k", DEFAULT_TOP_K)
            if isinstance(top_k, bool) or not isinstance(top_k, int) or top_k < 1:
                raise RequestError("'top_k' must be a positive integer")
            out["explanation"] = self._explain(state, x, c, top_k)
        out["latency_seconds"] = time.perf_counter() - t0
        return HTTPStatus.OK, out

    def _explain(self, state: LoadedModel, x, c, top_k) -> dict:
        bg = state.background
        if bg is None and state.model.kind not in ("RF", "GBDT"):
            raise RequestError(f"{state.model.kind} explanations need a background sample")
        e = explain(state.model, x, c, bg, n_permutations=SERVE_PERMUTATIONS, seed=0)
        order = np.argsort(-np.abs(e.phi), kind="stable")[:top_k]
        items = []
        for i in order:
            item = {"feature": e.feature_names[i], "phi": float(e.phi[i]), "value": float(x[i])}
            if e.std_err is not None:
                item["std_err"] = float(e.std_err[i])
            items.append(item)
        return {
            "class": e.class_value,
            "method": e.method,
            "base_value": e.base_value,
            "output": e.output,
            "top_features": items,
        }

    def health(self) -> tuple[int, dict]:
        s = self.current
        return HTTPStatus.OK, {"status": "ok", "model_hash": s.model_hash, "uptime": time.time() - self.started}

    def model_info(self) -> tuple[int, dict]:
        s = self.current
        m = s.model
        return HTTPStatus.OK, {
            "kind": m.kind,
            "spec": m.spec.to_dict(),
            "classes": m.classes.tolist(),
            "feature_names": list(m.feature_names),
            "model_hash": s.model_hash,
            "path": s.path,
            "version": __version__,
        }

    def reload(self, body) -> tuple[int, dict]:
        path = body.get("path") if isinstance(body, dict) else None
        if not isinstance(path, str) or not path:
            raise RequestError("reload needs a 'path' string")
        with self._reload_lock:
            try:
                fresh = _load(Path(path), self._background)
            except Exception as exc:  # noqa: BLE001 - the old model keeps serving
                log.warning("reload of %s failed: %s", path, exc)
                return HTTPStatus.SERVICE_UNAVAILABLE, {
                    "error": type(exc).__name__,
                    "detail": str(exc),
                    "model_hash": self.current.model_hash,
                }
            self.current = fresh
        return HTTPStatus.OK, {"status": "reloaded", "model_hash": fresh.model_hash}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    service: ScoringService = None

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status, payload):
        data = json.dumps(payload).encode("utf-8")
        self.send_response(int(status))
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self):
        n = int(self.headers.get("Content-Length") or 0)
        if n > MAX_BODY:
            raise RequestError("request body too large")
        raw = self.rfile.read(n) if n else b""
        try:
            return json.loads(raw.decode("utf-8")) if raw else None
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RequestError(f"malformed JSON: {exc}") from None

    def _dispatch(self, route):
        try:
            status, payload = route()
        except RequestError as exc:
            status, payload = exc.status, {"error": type(exc).__name__, "detail": str(exc)}
        except Exception as exc:  # noqa: BLE001 - report and keep serving
            log.exception("request failed")
            status, payload = HTTPStatus.INTERNAL_SERVER_ERROR, {"error": type(exc).__name__, "detail": str(exc)}
        self._send(status, payload)

    def do_GET(self):
        routes = {"/health": self.service.health, "/model": self.service.model_info}
        route = routes.get(self.path.split("?", 1)[0])
        if route is None:
            self._send(HTTPStatus.NOT_FOUND, {"error": "NotFound", "detail": self.path})
            return
        self._dispatch(route)

    def do_POST(self):
        path = self.path.split("?", 1)[0]
        if path == "/predict":
            self._dispatch(lambda: self.service.predict(self._body()))
        elif path == "/reload":
            self._dispatch(lambda: self.service.reload(self._body()))
        else:
            # drain the body so the connection stays usable
            self.rfile.read(int(self.headers.get("Content-Length") or 0))
            self._send(HTTPStatus.NOT_FOUND, {"error": "NotFound", "detail": self.path})


class _Server(ThreadingHTTPServer):
    # the stdlib default backlog of 5 resets bursts of concurrent clients
    request_queue_size = 128
    daemon_threads = True


def make_server(service: ScoringService, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = _Server((host, port), handler)
    return server


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"--bind expects host:port, got {bind!r}")
    return host, int(port)


def serve(model_path, bind: str = "127.0.0.1:8000", *, background=None, explain_default: bool = False) -> None:
    """Run the service until interrupted."""
    service = ScoringService(model_path, background=background, explain_default=explain_default)
    host, port = parse_bind(bind)
    server = make_server(service, host, port)
    log.info("serving %s on %s:%d", service.current.model_hash[:12], host, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
