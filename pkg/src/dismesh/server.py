"""JSON-over-HTTP inference service over a loaded checkpoint.

Endpoints: GET /meta, POST /encode, POST /decode, POST /transfer,
GET /sample. The model is loaded once and never mutated, so requests are
served concurrently by a threading HTTP server; /sample derives its
randomness from the query seed alone. Numeric payloads are emitted at
float32 precision through shortest-round-trip formatting, which makes
responses byte-deterministic.

Malformed bodies get a 400 naming the offending field, bodies over the
payload cap get 413, and unexpected errors surface as a generic 500 (no
stack traces on the wire).
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .model import MeshVAE
from .rng import counter_rng

API_VERSION = 1
DEFAULT_PORT = 8080
DEFAULT_MAX_BODY_BYTES = 8 * 1024 * 1024

logger = logging.getLogger("dismesh.server")


class RequestError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _f32_list(values) -> list[float]:
    """float32-precision numbers that round-trip exactly through JSON."""
    return [float(v) for v in np.asarray(values, dtype=np.float32).ravel()]


def _require(body: dict, field: str) -> object:
    if field not in body:
        raise RequestError(f"missing required field {field!r}", field=field)
    return body[field]


def _parse_wire_mesh(body: dict, field: str, n_vertices: int) -> np.ndarray:
    raw = _require(body, field)
    if not isinstance(raw, list):
        raise RequestError(f"{field!r} must be a flat list of numbers", field=field)
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size != 3 * n_vertices:
        raise RequestError(
            f"{field!r} must hold {3 * n_vertices} numbers (3 x {n_vertices}), got {arr.size}",
            field=field,
        )
    if not np.isfinite(arr).all():
        raise RequestError(f"{field!r} contains non-finite values", field=field)
    return arr.reshape(n_vertices, 3)


def _parse_vector(body: dict, field: str, expected: int) -> np.ndarray:
    raw = _require(body, field)
    if not isinstance(raw, list):
        raise RequestError(f"{field!r} must be a list of numbers", field=field)
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size != expected:
        raise RequestError(f"{field!r} must hold {expected} numbers, got {arr.size}", field=field)
    if not np.isfinite(arr).all():
        raise RequestError(f"{field!r} contains non-finite values", field=field)
    return arr


def prior_codes(model: MeshVAE, n: int, seed: int) -> np.ndarray:
    """Standard-normal latent draws, one counter stream per sample index;
    shared by the sampling task and the /sample endpoint."""
    return np.stack(
        [counter_rng(seed, "prior", i).standard_normal(model.config.latent_dim) for i in range(n)]
    )


class ModelService:
    """Request-independent state: the model, its hash, and the endpoints."""

    def __init__(self, model: MeshVAE, cors_origin: str = "*", max_body: int = DEFAULT_MAX_BODY_BYTES):
        if model.template_faces is None:
            raise ValueError("service needs a model with template faces")
        self.model = model
        self.model_hash = model.parameter_hash()
        self.cors_origin = cors_origin
        self.max_body = max_body

    # each handler returns (status, payload dict)

    def meta(self) -> dict:
        model = self.model
        return {
            "faces": model.template_faces.tolist(),
            "n_vertices": model.n_vertices,
            "d_shape": model.config.d_shape,
            "d_pose": model.config.d_pose,
            "model_hash": self.model_hash,
            "version": API_VERSION,
        }

    def encode(self, body: dict) -> dict:
        vertices = _parse_wire_mesh(body, "vertices", self.model.n_vertices)
        mu, logvar = self.model.posterior_arrays(vertices)
        return {
            "mu": _f32_list(mu[0]),
            "logvar": _f32_list(logvar[0]),
            "model_hash": self.model_hash,
        }

    def decode(self, body: dict) -> dict:
        z_shape = _parse_vector(body, "z_shape", self.model.config.d_shape)
        z_pose = _parse_vector(body, "z_pose", self.model.config.d_pose)
        vertices = self.model.decode_batch(np.concatenate([z_shape, z_pose]))
        return {"vertices": _f32_list(vertices[0]), "model_hash": self.model_hash}

    def transfer(self, body: dict) -> dict:
        shape_from = _parse_wire_mesh(body, "shape_from", self.model.n_vertices)
        pose_from = _parse_wire_mesh(body, "pose_from", self.model.n_vertices)
        codes = self.model.mean_codes(np.stack([shape_from, pose_from]))
        d_s = self.model.config.d_shape
        combined = np.concatenate([codes[0, :d_s], codes[1, d_s:]])
        vertices = self.model.decode_batch(combined)
        return {"vertices": _f32_list(vertices[0]), "model_hash": self.model_hash}

    def sample(self, query: dict) -> dict:
        try:
            n = int(query.get("n", ["1"])[0])
            seed = int(query.get("seed", ["0"])[0])
        except ValueError as exc:
            raise RequestError(f"query parameters n and seed must be integers: {exc}", field="n")
        if not 1 <= n <= 256:
            raise RequestError(f"n must be in [1, 256], got {n}", field="n")
        decoded = self.model.decode_batch(prior_codes(self.model, n, seed))
        return {
            "samples": [_f32_list(decoded[i]) for i in range(n)],
            "model_hash": self.model_hash,
        }


class _Handler(BaseHTTPRequestHandler):
    service: ModelService  # set on the subclass by make_server

    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", self.service.cors_origin)
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, message: str, field: str | None = None) -> None:
        payload: dict = {"error": message}
        if field is not None:
            payload["field"] = field
        self._send_json(status, payload)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        if length > self.service.max_body:
            raise RequestError(
                f"payload of {length} bytes exceeds the {self.service.max_body} byte cap"
            )
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RequestError(f"body is not valid JSON: {exc}")
        if not isinstance(body, dict):
            raise RequestError("body must be a JSON object")
        return body

    def do_OPTIONS(self):  # noqa: N802 - http.server naming
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", self.service.cors_origin)
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):  # noqa: N802
        parsed = urlparse(self.path)
        try:
            if parsed.path == "/meta":
                self._send_json(200, self.service.meta())
            elif parsed.path == "/sample":
                self._send_json(200, self.service.sample(parse_qs(parsed.query)))
            else:
                self._send_error_json(404, f"unknown endpoint {parsed.path}")
        except RequestError as exc:
            self._send_error_json(400, str(exc), exc.field)
        except Exception:
            logger.exception("internal error on GET %s", self.path)
            self._send_error_json(500, "internal server error")

    def do_POST(self):  # noqa: N802
        parsed = urlparse(self.path)
        routes = {
            "/encode": self.service.encode,
            "/decode": self.service.decode,
            "/transfer": self.service.transfer,
        }
        handler = routes.get(parsed.path)
        try:
            if handler is None:
                self._send_error_json(404, f"unknown endpoint {parsed.path}")
                return
            length = int(self.headers.get("Content-Length", "0"))
            if length > self.service.max_body:
                self._send_error_json(
                    413, f"payload of {length} bytes exceeds the {self.service.max_body} byte cap"
                )
                return
            self._send_json(200, handler(self._read_body()))
        except RequestError as exc:
            self._send_error_json(400, str(exc), exc.field)
        except Exception:
            logger.exception("internal error on POST %s", self.path)
            self._send_error_json(500, "internal server error")


def make_server(
    model: MeshVAE,
    host: str = "127.0.0.1",
    port: int = DEFAULT_PORT,
    cors_origin: str = "*",
    max_body: int = DEFAULT_MAX_BODY_BYTES,
) -> ThreadingHTTPServer:
    service = ModelService(model, cors_origin=cors_origin, max_body=max_body)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


class BackgroundServer:
    """Context manager running the service on a daemon thread (tests, CLI)."""

    def __init__(self, model: MeshVAE, host: str = "127.0.0.1", port: int = 0, **kwargs):
        self.server = make_server(model, host=host, port=port, **kwargs)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc_info):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)
        return False
