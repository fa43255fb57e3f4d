import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest
from helpers import bipyramid

from dismesh.hierarchy import build_hierarchy
from dismesh.model import MeshVAE, ModelConfig
from dismesh.server import BackgroundServer, ModelService
from dismesh.tasks import transfer
from dismesh.mesh import TriangleMesh


@pytest.fixture(scope="module")
def service_model():
    mesh = bipyramid(14)
    hierarchy = build_hierarchy(mesh, [0.5])
    config = ModelConfig(
        ratios=(0.5,), channels=(3, 4), cheb_order=(2,), hidden=8, d_shape=2, d_pose=3
    )
    model = MeshVAE(config, hierarchy, dtype=np.float32)
    model.initialize(8)
    rng = np.random.default_rng(77)
    model.params["enc_out_w"].values[...] = (
        0.2 * rng.normal(size=model.params["enc_out_w"].shape)
    ).astype(np.float32)
    model.set_template_faces(mesh.faces)
    return model, mesh


@pytest.fixture(scope="module")
def server(service_model):
    model, _mesh = service_model
    with BackgroundServer(model, max_body=64 * 1024) as running:
        yield running


def _get(url, raw=False):
    with urllib.request.urlopen(url, timeout=10) as response:
        body = response.read()
    return body if raw else json.loads(body)


def _post(url, payload, raw=False):
    data = json.dumps(payload).encode()
    request = urllib.request.Request(
        url, data=data, headers={"Content-Type": "application/json"}, method="POST"
    )
    with urllib.request.urlopen(request, timeout=10) as response:
        body = response.read()
    return body if raw else json.loads(body)


def _error_response(callable_):
    with pytest.raises(urllib.error.HTTPError) as excinfo:
        callable_()
    err = excinfo.value
    return err.code, json.loads(err.read())


def test_meta_endpoint(server, service_model):
    model, mesh = service_model
    meta = _get(server.url + "/meta")
    assert meta["n_vertices"] == mesh.n_vertices
    assert meta["d_shape"] == 2
    assert meta["d_pose"] == 3
    assert meta["version"] == 1
    assert np.array_equal(np.asarray(meta["faces"]), mesh.faces)
    assert meta["model_hash"] == model.parameter_hash()


def test_decode_zero_code_byte_identical(server, service_model):
    model, _mesh = service_model
    payload = {"z_shape": [0.0, 0.0], "z_pose": [0.0, 0.0, 0.0]}
    first = _post(server.url + "/decode", payload, raw=True)
    second = _post(server.url + "/decode", payload, raw=True)
    assert first == second
    decoded = json.loads(first)
    assert len(decoded["vertices"]) == 3 * model.n_vertices


def test_encode_decode_round_trip(server, service_model):
    model, mesh = service_model
    flat = [float(v) for v in mesh.vertices.ravel()]
    encoded = _post(server.url + "/encode", {"vertices": flat})
    assert len(encoded["mu"]) == model.config.latent_dim
    assert len(encoded["logvar"]) == model.config.latent_dim
    decoded = _post(
        server.url + "/decode",
        {"z_shape": encoded["mu"][:2], "z_pose": encoded["mu"][2:]},
    )
    assert len(decoded["vertices"]) == 3 * model.n_vertices
    assert "model_hash" in decoded


def test_transfer_matches_task(server, service_model):
    model, mesh = service_model
    rng = np.random.default_rng(5)
    shape_mesh = TriangleMesh(mesh.vertices + 0.05 * rng.normal(size=mesh.vertices.shape), mesh.faces)
    pose_mesh = TriangleMesh(mesh.vertices + 0.05 * rng.normal(size=mesh.vertices.shape), mesh.faces)
    response = _post(
        server.url + "/transfer",
        {
            "shape_from": [float(v) for v in shape_mesh.vertices.ravel()],
            "pose_from": [float(v) for v in pose_mesh.vertices.ravel()],
        },
    )
    wire = np.asarray(response["vertices"]).reshape(-1, 3)
    direct = transfer(model, shape_mesh, pose_mesh).vertices
    # response carries float32 shortest-round-trip numbers
    assert np.max(np.abs(wire - direct.astype(np.float32))) == 0.0


def test_sample_deterministic_by_seed(server):
    a = _get(server.url + "/sample?n=2&seed=9", raw=True)
    b = _get(server.url + "/sample?n=2&seed=9", raw=True)
    assert a == b
    c = _get(server.url + "/sample?n=2&seed=10", raw=True)
    assert a != c


def test_decode_wrong_length_names_field(server):
    code, payload = _error_response(
        lambda: _post(server.url + "/decode", {"z_shape": [0.0], "z_pose": [0.0, 0.0, 0.0]})
    )
    assert code == 400
    assert payload["field"] == "z_shape"
    assert "z_shape" in payload["error"]


def test_encode_malformed_body(server):
    request = urllib.request.Request(
        server.url + "/encode",
        data=b"not json",
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with pytest.raises(urllib.error.HTTPError) as excinfo:
        urllib.request.urlopen(request, timeout=10)
    assert excinfo.value.code == 400
    assert "JSON" in json.loads(excinfo.value.read())["error"]


def test_payload_cap_413(server, service_model):
    model, _mesh = service_model
    huge = {"vertices": [0.0] * (3 * model.n_vertices), "padding": "x" * (80 * 1024)}
    code, payload = _error_response(lambda: _post(server.url + "/encode", huge))
    assert code == 413
    assert "cap" in payload["error"]


def test_unknown_endpoint_404(server):
    code, _payload = _error_response(lambda: _get(server.url + "/nope"))
    assert code == 404


def test_sample_invalid_n_400(server):
    code, payload = _error_response(lambda: _get(server.url + "/sample?n=0&seed=1"))
    assert code == 400
    assert payload["field"] == "n"


def test_cors_headers_and_preflight(server):
    request = urllib.request.Request(server.url + "/meta")
    with urllib.request.urlopen(request, timeout=10) as response:
        assert response.headers["Access-Control-Allow-Origin"] == "*"
    preflight = urllib.request.Request(server.url + "/decode", method="OPTIONS")
    with urllib.request.urlopen(preflight, timeout=10) as response:
        assert response.status == 204
        assert "POST" in response.headers["Access-Control-Allow-Methods"]


def test_internal_error_does_not_leak_traceback(service_model, monkeypatch):
    model, _mesh = service_model
    with BackgroundServer(model) as running:
        def boom(_body):
            raise RuntimeError("secret internal detail")

        # reach through the bound handler class to break one endpoint
        handler_cls = running.server.RequestHandlerClass
        monkeypatch.setattr(handler_cls.service, "decode", boom)
        code, payload = _error_response(
            lambda: _post(running.url + "/decode", {"z_shape": [0, 0], "z_pose": [0, 0, 0]})
        )
        assert code == 500
        assert payload == {"error": "internal server error"}


def test_concurrent_requests(server, service_model):
    model, _mesh = service_model
    payload = {"z_shape": [0.1, -0.2], "z_pose": [0.3, 0.0, -0.1]}
    expected = _post(server.url + "/decode", payload, raw=True)
    results = []

    def hit():
        results.append(_post(server.url + "/decode", payload, raw=True))

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == expected for r in results)


def test_service_requires_template_faces(service_model):
    model, _mesh = service_model
    hierarchy = model.hierarchy
    bare = MeshVAE(model.config, hierarchy, dtype=np.float32)
    with pytest.raises(ValueError, match="template faces"):
        ModelService(bare)
