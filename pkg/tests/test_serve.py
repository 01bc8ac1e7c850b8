import http.client
import json
import socket
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from fuelwatch.explain import background_sample
from fuelwatch.models import ModelSpec, fit_pipeline
from fuelwatch.serve import DimensionError, RequestError, ScoringService, make_server, parse_bind

# a week-long visit: 28 h of runtime per day on a 45 kVA generator
SCENARIO = {
    "number_of_days": 7,
    "running_time": 196.0,
    "consumption_his": 1540.0,
    "generator_capacity_kva": 45.0,
    "maximum_consumption_per_day": 237.6,
    "previous_fuel_qte": 900.0,
    "qte_fuel_added": 1200.0,
    "qte_fuel_found": 400.0,
    "total_qte_left": 1600.0,
}


class Client:
    """Keep-alive JSON client over one connection."""

    def __init__(self, port):
        self.conn = http.client.HTTPConnection("127.0.0.1", port, timeout=10)
        self.conn.connect()
        self.conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def call(self, method, path, body=None, raw=None):
        data = raw if raw is not None else (None if body is None else json.dumps(body).encode())
        headers = {"Content-Type": "application/json"} if data is not None else {}
        self.conn.request(method, path, body=data, headers=headers)
        r = self.conn.getresponse()
        return r.status, json.loads(r.read())

    def close(self):
        self.conn.close()


@pytest.fixture(scope="module")
def service(reference_gbdt_file):
    return ScoringService(reference_gbdt_file)


@pytest.fixture(scope="module")
def server(service):
    srv = make_server(service, "127.0.0.1", 0)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv.server_address[1]
    srv.shutdown()
    srv.server_close()


@pytest.fixture
def client(server):
    c = Client(server)
    yield c
    c.close()


def test_parse_bind():
    assert parse_bind("0.0.0.0:8080") == ("0.0.0.0", 8080)
    with pytest.raises(ValueError):
        parse_bind("8080")


def test_health_before_predict(client):
    status, body = client.call("GET", "/health")
    assert status == 200
    assert body["status"] == "ok"
    assert len(body["model_hash"]) == 64
    assert body["uptime"] >= 0


def test_model_endpoint(client, reference_gbdt):
    status, body = client.call("GET", "/model")
    assert status == 200
    assert body["kind"] == "GBDT"
    assert body["feature_names"] == list(reference_gbdt.feature_names)
    assert body["model_hash"] == reference_gbdt.model_hash()


def test_unknown_route(client):
    assert client.call("GET", "/nope")[0] == 404
    assert client.call("POST", "/nope", {"a": 1})[0] == 404
    assert client.call("GET", "/health")[0] == 200


def test_predict_equals_offline(client, reference_gbdt, fleet_split):
    _, test = fleet_split
    m = reference_gbdt
    rows = test.X[:40]
    proba = m.predict_proba(rows)
    label = m.predict_class(rows)
    for x, p, c in zip(rows, proba, label):
        status, body = client.call("POST", "/predict", {"features": x.tolist()})
        assert status == 200
        assert body["predicted_class"] == int(c)
        got = np.array([body["probabilities"][str(int(k))] for k in m.classes])
        assert np.array_equal(got, p)
        assert abs(sum(body["probabilities"].values()) - 1.0) < 1e-9
        assert "explanation" not in body


def test_feature_map_and_raw_record_agree(service):
    m = service.current.model
    _, raw = service.predict({"record": SCENARIO})
    x = np.array([raw["probabilities"][str(int(k))] for k in m.classes])
    from fuelwatch.serve import feature_vector
    v = feature_vector(m, {"record": SCENARIO})
    _, mapped = service.predict({"record": dict(zip(m.feature_names, v.tolist()))})
    y = np.array([mapped["probabilities"][str(int(k))] for k in m.classes])
    assert np.array_equal(x, y)


def test_scenario_class_and_top_feature(client):
    status, body = client.call("POST", "/predict", {"record": SCENARIO, "explain": True, "top_k": 3})
    assert status == 200
    assert body["predicted_class"] == 2
    e = body["explanation"]
    assert e["method"] == "tree_shap"
    assert len(e["top_features"]) == 3
    assert e["top_features"][0]["feature"] == "running_time_per_day"
    assert e["top_features"][0]["value"] == pytest.approx(28.0)


def test_raw_record_accepts_export_headers(service):
    from fuelwatch.ingest import DEFAULT_SCHEMA
    rec = {DEFAULT_SCHEMA[k]: v for k, v in SCENARIO.items()}
    assert service.predict({"record": rec})[1]["predicted_class"] == 2


@pytest.mark.parametrize("raw", [b"{not json", b"[1, 2]", b'{"record": 5}', b'{"features": "x"}'])
def test_malformed_body_is_400(client, raw):
    status, body = client.call("POST", "/predict", raw=raw)
    assert status == 400
    assert body["error"] == "RequestError"
    assert client.call("GET", "/health")[0] == 200


def test_missing_and_bad_features_are_400(service):
    with pytest.raises(RequestError):
        service.predict({"record": {"running_time": 5.0}})
    bad = dict(SCENARIO, running_time="fast")
    with pytest.raises(RequestError):
        service.predict({"record": bad})
    with pytest.raises(RequestError):
        service.predict({"record": SCENARIO, "explain": "yes"})
    with pytest.raises(RequestError):
        service.predict({"record": SCENARIO, "explain": True, "top_k": 0})


def test_dimension_mismatch_is_422(client, service):
    n = len(service.current.model.feature_names)
    status, body = client.call("POST", "/predict", {"features": [1.0] * (n + 1)})
    assert status == 422
    assert body["error"] == "DimensionError"
    with pytest.raises(DimensionError):
        service.predict({"features": [1.0] * (n - 1)})


def test_concurrent_identical_requests(server, fleet_split):
    x = fleet_split[1].X[3].tolist()

    def one(_):
        c = Client(server)
        try:
            status, body = c.call("POST", "/predict", {"features": x, "explain": True})
        finally:
            c.close()
        body.pop("latency_seconds")
        return status, json.dumps(body, sort_keys=True)

    with ThreadPoolExecutor(64) as pool:
        results = list(pool.map(one, range(64)))
    assert {s for s, _ in results} == {200}
    assert len({b for _, b in results}) == 1


def test_explain_default(reference_gbdt_file):
    svc = ScoringService(reference_gbdt_file, explain_default=True)
    _, body = svc.predict({"record": SCENARIO})
    assert "explanation" in body
    _, body = svc.predict({"record": SCENARIO, "explain": False})
    assert "explanation" not in body


def test_non_tree_model_uses_sampled_explanation(fleet_split, tmp_path):
    train, _ = fleet_split
    model = fit_pipeline(train, ModelSpec("LR"), None)
    model.meta["background"] = background_sample(train, 20, 0).X.tolist()
    model.save(tmp_path / "lr.json")
    _, body = ScoringService(tmp_path / "lr.json").predict({"record": SCENARIO, "explain": True})
    e = body["explanation"]
    assert e["method"] == "sampled"
    assert all("std_err" in f for f in e["top_features"])


def test_reload(reference_gbdt_file, fleet_split, tmp_path):
    train, _ = fleet_split
    svc = ScoringService(reference_gbdt_file)
    srv = make_server(svc, "127.0.0.1", 0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    c = Client(srv.server_address[1])
    try:
        old = svc.current.model_hash
        status, body = c.call("POST", "/reload", {"path": str(tmp_path / "missing.json")})
        assert status == 503
        assert body["model_hash"] == old
        assert c.call("GET", "/health")[1]["model_hash"] == old

        other = fit_pipeline(train, ModelSpec("GBDT", {"n_estimators": 10}), None)
        other.save(tmp_path / "other.json")
        status, body = c.call("POST", "/reload", {"path": str(tmp_path / "other.json")})
        assert status == 200
        assert body["model_hash"] == other.model_hash() != old
        assert c.call("POST", "/predict", {"record": SCENARIO})[1]["model_hash"] == other.model_hash()
        assert c.call("POST", "/reload", {})[0] == 400
    finally:
        c.close()
        srv.shutdown()
        srv.server_close()


def test_median_latency_under_one_millisecond(client, fleet_split):
    rows = [{"features": x.tolist()} for x in fleet_split[1].X[:100]]
    for body in rows:
        client.call("POST", "/predict", body)
    timings = []
    for body in rows * 5:
        t0 = time.perf_counter()
        status, _ = client.call("POST", "/predict", body)
        timings.append(time.perf_counter() - t0)
        assert status == 200
    assert statistics.median(timings) < 1e-3
