import json
import logging
from pathlib import Path

import httpx
import jsonschema
import pytest
from fastapi.testclient import TestClient

from hallguard.pipeline import FailurePolicy
from hallguard.service.app import create_app
from hallguard.service.config import PipelineConfig, Variant, load_config
from hallguard.service.remote import (
    BackendError, RemoteNliBackend, RemoteRewriter, RemoteSbdBackend, remote_backend_call,
)
from hallguard.service.runtime import GuardRequest, GuardService, InvalidRequest
from hallguard.service.schemas import REQUEST, RESPONSE, load_schema
from hallguard.stubs import IdentityRewriter

GOLDEN = Path(__file__).parent / "golden"
REQUEST_SCHEMA = load_schema(REQUEST)
RESPONSE_SCHEMA = load_schema(RESPONSE)

DOC = ("Alice Chen joined Contoso Ltd in 2019. The team in Paris has 40 employees. "
       "Sales rose 12% last year, the company said.")
CLEAN = "Alice Chen joined Contoso Ltd in 2019. The team in Paris has 40 employees."
SWAPPED = "Maria Gonzalez joined Contoso Ltd in 2019. The team in Paris has 40 employees."
FIXABLE = "Alice Chen joined Contoso Ltd in 2019. Maria Gonzalez said the team in Paris has 40 employees."


def masked(body):
    """Response body with wall-clock latencies replaced by their key set."""
    out = dict(body)
    if "latency_ms" in out:
        out["latency_ms"] = sorted(out["latency_ms"])
    return out


def valid(body):
    jsonschema.validate(body, RESPONSE_SCHEMA)
    return body


@pytest.fixture(scope="module")
def service(model):
    svc = GuardService(PipelineConfig(), model)
    yield svc
    svc.close()


@pytest.fixture(scope="module")
def client(service):
    return TestClient(create_app(service))


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg == PipelineConfig() and cfg.enabled_detectors == ("ner", "nli", "sbd")

    def test_yaml_file_and_env_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("name: lean\nvariant: detect_only\ndetectors: {sbd: false}\n"
                        "failure_policy: fail_open\nloop: {max_iterations: 3, prompt_version: v1}\n"
                        "ner: {enabled: [Person, Date]}\n")
        cfg = load_config(environ={"HALLGUARD_CONFIG": str(path), "HALLGUARD_NLI_URL": "http://nli"})
        assert cfg.name == "lean" and cfg.variant is Variant.DETECT_ONLY
        assert cfg.enabled_detectors == ("ner", "nli") and cfg.failure_policy is FailurePolicy.FAIL_OPEN
        assert cfg.loop.max_iterations == 3 and cfg.backends.nli_url == "http://nli"
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    def test_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"timeout_ms": 100}))
        assert load_config(path, environ={}).timeout_ms == 100

    @pytest.mark.parametrize("bad", [
        {"detectors": {"ner": False, "nli": False, "sbd": False}},
        {"detectors": {"magic": True}},
        {"timeout_ms": 6000},
        {"unknown_key": 1},
        {"variant": "sometimes"},
    ])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict(bad)

    def test_hash_ignores_name(self):
        assert PipelineConfig(name="a").config_hash == PipelineConfig(name="b").config_hash
        assert PipelineConfig(timeout_ms=100).config_hash != PipelineConfig().config_hash

    def test_deadline_reaches_loop(self):
        assert PipelineConfig(deadline_ms=1500).loop_config().deadline == 1.5


def transport(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


class TestRemote:
    def test_nli_score(self):
        def handler(request):
            body = json.loads(request.content)
            assert set(body) == {"premise", "hypothesis"}
            return httpx.Response(200, json={"score": 0.25})

        assert RemoteNliBackend("http://nli/score", client=transport(handler)).score("p", "h") == 0.25

    def test_sbd_length_mismatch(self):
        c = transport(lambda r: httpx.Response(200, json={"scores": [0.1]}))
        with pytest.raises(BackendError) as err:
            RemoteSbdBackend("http://sbd", client=c).label("doc", ["a", "b"])
        assert err.value.cause == "malformed"

    def test_sbd_ok(self):
        c = transport(lambda r: httpx.Response(200, json={"scores": [0.1, 1]}))
        assert RemoteSbdBackend("http://sbd", client=c).label("doc", ["a", "b"]) == [0.1, 1.0]

    def test_timeout_after_one_retry(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ReadTimeout("slow", request=request)

        with pytest.raises(BackendError) as err:
            remote_backend_call("http://x", {}, client=transport(handler))
        assert err.value.cause == "timeout" and len(calls) == 2

    def test_transport_error_retried_once(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) == 1:
                raise httpx.ConnectError("refused", request=request)
            return httpx.Response(200, json={"score": 1.0})

        assert remote_backend_call("http://x", {}, client=transport(handler)) == {"score": 1.0}
        assert len(calls) == 2

    @pytest.mark.parametrize("response,cause", [
        (httpx.Response(503, json={}), "http_status"),
        (httpx.Response(200, content=b"not json"), "malformed"),
        (httpx.Response(200, json=[1, 2]), "malformed"),
    ])
    def test_failures(self, response, cause):
        with pytest.raises(BackendError) as err:
            remote_backend_call("http://x", {}, client=transport(lambda r: response))
        assert err.value.cause == cause

    @pytest.mark.parametrize("score", [1.5, -0.1, "0.5", None, True])
    def test_bad_scores(self, score):
        c = transport(lambda r: httpx.Response(200, json={"score": score}))
        with pytest.raises(BackendError):
            RemoteNliBackend("http://nli", client=c).score("p", "h")

    def test_rewriter(self):
        c = transport(lambda r: httpx.Response(200, json={"text": "Fixed.", "output_tokens": 2}))
        assert RemoteRewriter("http://rw", client=c).rewrite("prompt") == ("Fixed.", 2)


class TestRequests:
    def test_default_request_id_is_content_hash(self):
        a = GuardRequest.from_dict({"document": "d", "response": "r"})
        b = GuardRequest.from_dict({"document": "d", "response": "r"})
        assert a.request_id == b.request_id and len(a.request_id) == 16

    @pytest.mark.parametrize("payload", [
        [], {"document": "", "response": "r"}, {"document": "d"}, {"document": "d", "response": 3},
        {"document": "d", "response": "r", "extra": 1}, {"document": "d", "response": "r", "variant": "x"},
    ])
    def test_invalid(self, payload):
        with pytest.raises(InvalidRequest):
            GuardRequest.from_dict(payload)

    def test_request_schema_agrees(self):
        jsonschema.validate({"document": "d", "response": "r", "variant": "detect_only"}, REQUEST_SCHEMA)
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate({"document": "d"}, REQUEST_SCHEMA)


class TestEndpoints:
    def test_detect_verbatim_passes(self, client):
        r = client.post("/v1/detect", json={"document": DOC, "response": CLEAN})
        body = valid(r.json())
        assert r.status_code == 200 and body["action"] == "pass" and body["final_text"] == CLEAN

    def test_detect_entity_swap_blocked(self, client):
        body = valid(client.post("/v1/detect", json={"document": DOC, "response": SWAPPED}).json())
        assert body["action"] == "blocked" and body["reason"] == "hallucination_detected"
        assert any(s["text"] == "Maria Gonzalez" and s["detector"] == "ner" for s in body["spans"])
        assert "final_text" not in body

    def test_empty_document_rejected(self, client):
        r = client.post("/v1/detect", json={"document": "", "response": CLEAN})
        assert r.status_code == 400 and valid(r.json())["error"]["code"] == "invalid_request"

    def test_malformed_json(self, client):
        r = client.post("/v1/guard", content=b"{nope", headers={"content-type": "application/json"})
        assert r.status_code == 400 and r.json()["error"]["code"] == "invalid_request"

    def test_guard_clean(self, client):
        body = valid(client.post("/v1/guard", json={"document": DOC, "response": CLEAN}).json())
        assert body["action"] == "pass" and body["iterations"] == 0 and body["output_tokens"] == 0

    def test_guard_fixable(self, client):
        body = valid(client.post("/v1/guard", json={"document": DOC, "response": FIXABLE}).json())
        assert body["action"] == "rewritten" and body["iterations"] == 1
        assert "Maria" not in body["final_text"] and body["final_score"] < body["verification_threshold"]

    def test_guard_identity_rewriter_blocks(self, model):
        svc = GuardService(PipelineConfig(), model, IdentityRewriter())
        try:
            body = valid(TestClient(create_app(svc)).post(
                "/v1/guard", json={"document": DOC, "response": SWAPPED}).json())
        finally:
            svc.close()
        assert body["action"] == "blocked" and body["reason"] == "verification_failed"
        assert body["iterations"] == PipelineConfig().loop.max_iterations

    def test_guard_variant_override(self, client):
        body = client.post("/v1/guard", json={"document": DOC, "response": SWAPPED,
                                              "variant": "detect_only"}).json()
        assert body["action"] == "blocked" and body["iterations"] == 0

    def test_health(self, client, service, model):
        h = client.get("/v1/health").json()
        assert h == {"status": "ok", "model_hash": model.model_hash, "config_hash": service.config.config_hash,
                     "variant": "detect_and_mitigate", "detectors": ["ner", "nli", "sbd"]}

    def test_internal_error(self, model, monkeypatch):
        svc = GuardService(PipelineConfig(), model)
        monkeypatch.setattr(svc._snapshot.pipeline, "handle", lambda req: 1 / 0)
        r = TestClient(create_app(svc)).post("/v1/guard", json={"document": DOC, "response": CLEAN})
        svc.close()
        assert r.status_code == 500 and r.json()["error"] == {"code": "internal_error",
                                                               "message": "ZeroDivisionError"}


class _DownNli:
    def score(self, premise, hypothesis):
        raise BackendError("nli", "transport", "connection refused")


class TestFailurePolicy:
    def test_fail_closed_blocks(self, model):
        svc = GuardService(PipelineConfig(), model, nli_backend=_DownNli())
        body = valid(svc.handle_detect({"document": DOC, "response": CLEAN}))
        svc.close()
        assert body["action"] == "blocked" and body["reason"] == "detector_unavailable"
        assert body["failures"] == {"nli": "transport"} and body["ensemble_score"] is None

    def test_fail_open_continues(self, model):
        svc = GuardService(PipelineConfig(failure_policy="fail_open"), model, nli_backend=_DownNli())
        body = valid(svc.handle_detect({"document": DOC, "response": CLEAN}))
        svc.close()
        assert body["action"] == "pass" and body["failures"] == {"nli": "transport"}


class TestServiceBehaviour:
    def test_reload_swaps_snapshot(self, model):
        svc = GuardService(PipelineConfig(), model)
        before = svc.health()["config_hash"]
        svc.reload(PipelineConfig(variant="detect_only"))
        after = svc.health()
        svc.close()
        assert after["config_hash"] != before and after["variant"] == "detect_only"
        assert after["model_hash"] == model.model_hash

    def test_privacy_logging(self, model, caplog):
        for privacy in (True, False):
            svc = GuardService(PipelineConfig(privacy=privacy), model)
            caplog.clear()
            with caplog.at_level(logging.INFO, logger="hallguard.requests"):
                svc.handle_detect({"document": DOC, "response": CLEAN, "request_id": "r1"})
            svc.close()
            (record,) = [json.loads(r.message) for r in caplog.records if r.name == "hallguard.requests"]
            assert record["request_id"] == "r1" and record["model_hash"] == model.model_hash
            assert ("document" in record) is (not privacy)

    def test_repeated_requests_identical(self, service):
        payload = {"document": DOC, "response": FIXABLE, "request_id": "rep"}
        first = masked(service.handle_guard(payload))
        assert all(masked(service.handle_guard(payload)) == first for _ in range(20))


GOLDEN_CASES = {
    "detect_response.json": ("/v1/detect", {"request_id": "golden-detect", "document": DOC, "response": SWAPPED}),
    "guard_response.json": ("/v1/guard", {"request_id": "golden-guard", "document": DOC, "response": FIXABLE}),
}


@pytest.mark.parametrize("name", sorted(GOLDEN_CASES))
def test_golden(client, name):
    path, payload = GOLDEN_CASES[name]
    body = valid(client.post(path, json=payload).json())
    assert masked(body) == json.loads((GOLDEN / name).read_text())
