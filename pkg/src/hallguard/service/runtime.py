"""Request handling shared by the HTTP app, the CLI and flight replay."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

from ..core import DetectorError
from ..ensemble import EnsembleModel
from ..features import prepare
from ..ner import Gazetteer, NerDetector
from ..nli import NliDetector
from ..pipeline import DetectionResult, FederatedDetector
from ..rewrite import FinalAction, PromptTemplate, RewriterBackend, run_loop
from ..sbd import SbdDetector
from ..stubs import SpanDeletingRewriter
from .config import PipelineConfig, Variant
from .remote import RemoteNliBackend, RemoteRewriter, RemoteSbdBackend

request_log = logging.getLogger("hallguard.requests")

_ACTIONS = {
    FinalAction.PASS: "pass",
    FinalAction.DELIVER_REWRITTEN: "rewritten",
    FinalAction.BLOCK: "blocked",
}


class InvalidRequest(ValueError):
    pass


@dataclass(frozen=True)
class GuardRequest:
    request_id: str
    document: str
    response: str
    variant: Optional[Variant] = None

    @classmethod
    def from_dict(cls, d: Any) -> "GuardRequest":
        if not isinstance(d, Mapping):
            raise InvalidRequest("request body must be a JSON object")
        unknown = set(d) - {"request_id", "document", "response", "variant"}
        if unknown:
            raise InvalidRequest(f"unknown fields: {sorted(unknown)}")
        for key in ("document", "response"):
            if not isinstance(d.get(key), str):
                raise InvalidRequest(f"{key} must be a string")
            if not d[key].strip():
                raise InvalidRequest(f"{key} must not be empty")
        rid = d.get("request_id")
        if rid is None:
            rid = hashlib.sha256((d["document"] + "\x00" + d["response"]).encode()).hexdigest()[:16]
        elif not isinstance(rid, str) or not rid:
            raise InvalidRequest("request_id must be a non-empty string")
        variant = d.get("variant")
        if variant is not None:
            try:
                variant = Variant(variant)
            except ValueError:
                raise InvalidRequest(f"unknown variant {variant!r}") from None
        return cls(rid, d["document"], d["response"], variant)


def error_response(request_id: Optional[str], code: str, message: str) -> Dict[str, Any]:
    return {"request_id": request_id, "action": "error", "error": {"code": code, "message": message}}


def _spans(result: DetectionResult):
    return [sv.to_dict() for sv in result.all_spans()]


def _features(result: DetectionResult) -> Dict[str, float]:
    from ..features import FEATURE_NAMES

    return {n: float(v) for n, v in zip(FEATURE_NAMES, result.features)}


class GuardPipeline:
    """One immutable (config, model) pair wired to its detectors and rewriter."""

    def __init__(
        self,
        config: PipelineConfig,
        model: EnsembleModel,
        rewriter: Optional[RewriterBackend] = None,
        gazetteer: Optional[Gazetteer] = None,
        nli_backend=None,
        sbd_backend=None,
        template: Optional[PromptTemplate] = None,
        executor: Optional[ThreadPoolExecutor] = None,
    ):
        self.config = config
        self.model = model
        timeout = config.timeout_ms / 1000.0
        b = config.backends
        if nli_backend is None and b.nli_url:
            nli_backend = RemoteNliBackend(b.nli_url, timeout)
        if sbd_backend is None and b.sbd_url:
            sbd_backend = RemoteSbdBackend(b.sbd_url, timeout)
        if rewriter is None:
            rewriter = RemoteRewriter(b.rewriter_url) if b.rewriter_url else SpanDeletingRewriter()
        factories = {
            "ner": lambda: NerDetector(config.ner, gazetteer),
            "nli": lambda: NliDetector(nli_backend, config.nli),
            "sbd": lambda: SbdDetector(sbd_backend, config.sbd),
        }
        self.detector = FederatedDetector(
            [factories[name]() for name in config.enabled_detectors],
            model, timeout, config.failure_policy, executor,
        )
        self.rewriter = rewriter
        self.template = template
        self.loop_config = config.loop_config()
        self.detection_threshold, self.verification_threshold = self.loop_config.resolve(model.thresholds)

    def handle(self, req: GuardRequest) -> Dict[str, Any]:
        variant = req.variant or self.config.variant
        t0 = time.perf_counter()
        doc, resp = prepare(req.document, req.response, self.config.segmenter)
        latency = {"segmentation": (time.perf_counter() - t0) * 1000.0}
        if variant is Variant.DETECT_ONLY:
            body = self._detect(req, doc, resp, latency)
        else:
            body = self._guard(req, doc, resp, latency)
        latency["total"] = (time.perf_counter() - t0) * 1000.0
        body["latency_ms"] = {k: max(0.0, float(v)) for k, v in latency.items()}
        return body

    def _base(self, req: GuardRequest, action: str) -> Dict[str, Any]:
        return {
            "request_id": req.request_id,
            "action": action,
            "ensemble_score": None,
            "threshold": self.detection_threshold,
            "features": {},
            "spans": [],
            "failures": {},
            "iterations": 0,
            "output_tokens": 0,
            "events": [],
        }

    def _unavailable(self, req, exc: DetectorError) -> Dict[str, Any]:
        body = self._base(req, "blocked")
        body["reason"] = "detector_unavailable"
        body["failures"] = {exc.detector: exc.cause}
        return body

    def _detect(self, req, doc, resp, latency) -> Dict[str, Any]:
        try:
            result = self.detector.run(doc, resp, self.detection_threshold)
        except DetectorError as exc:
            return self._unavailable(req, exc)
        latency.update({f"detect.{k}": v for k, v in result.latency_ms.items()})
        body = self._base(req, "blocked" if result.verdict.hallucinated else "pass")
        body.update(ensemble_score=result.score, features=_features(result),
                    spans=_spans(result), failures=dict(result.failures))
        if body["action"] == "pass":
            body["final_text"] = req.response
        else:
            body["reason"] = "hallucination_detected"
        return body

    def _guard(self, req, doc, resp, latency) -> Dict[str, Any]:
        try:
            session = run_loop(doc, resp, self.detector, self.rewriter, self.loop_config, self.template)
        except DetectorError as exc:
            return self._unavailable(req, exc)
        latency.update(session.latency_ms)
        first = session.initial
        body = self._base(req, _ACTIONS[session.final_action])
        failures = dict(first.failures)
        if session.final_result is not None:
            failures.update(session.final_result.failures)
        body.update(
            ensemble_score=first.score,
            final_score=session.final_score,
            verification_threshold=self.verification_threshold,
            features=_features(first),
            spans=_spans(first),
            failures=failures,
            iterations=len(session.iterations),
            output_tokens=session.output_tokens,
            events=list(session.events),
        )
        if session.final_action is FinalAction.BLOCK:
            body["reason"] = "verification_failed"
        else:
            body["final_text"] = session.final_text
        return body

    def close(self) -> None:
        self.detector.close()


@dataclass(frozen=True)
class _Snapshot:
    config: PipelineConfig
    model: EnsembleModel
    pipeline: GuardPipeline


class GuardService:
    """Validates requests, runs them on the current snapshot, logs one line each.

    :meth:`reload` builds a complete new pipeline before swapping it in, so a
    request always sees one consistent (config, model) pair.
    """

    def __init__(self, config: PipelineConfig, model: EnsembleModel, rewriter: Optional[RewriterBackend] = None,
                 max_workers: int = 32, **pipeline_kw):
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="detector")
        self._pipeline_kw = pipeline_kw
        self._rewriter = rewriter
        self._lock = threading.Lock()
        self._snapshot = self._build(config, model)

    def _build(self, config, model) -> _Snapshot:
        pipe = GuardPipeline(config, model, self._rewriter, executor=self._executor, **self._pipeline_kw)
        return _Snapshot(config, model, pipe)

    @property
    def config(self) -> PipelineConfig:
        return self._snapshot.config

    @property
    def model(self) -> EnsembleModel:
        return self._snapshot.model

    def reload(self, config: Optional[PipelineConfig] = None, model: Optional[EnsembleModel] = None) -> None:
        with self._lock:
            current = self._snapshot
            self._snapshot = self._build(config or current.config, model or current.model)

    def health(self) -> Dict[str, Any]:
        snap = self._snapshot
        return {
            "status": "ok",
            "model_hash": snap.model.model_hash,
            "config_hash": snap.config.config_hash,
            "variant": snap.config.variant.value,
            "detectors": list(snap.config.enabled_detectors),
        }

    def handle_detect(self, payload: Any) -> Dict[str, Any]:
        return self._handle(payload, Variant.DETECT_ONLY)

    def handle_guard(self, payload: Any) -> Dict[str, Any]:
        return self._handle(payload, None)

    def _handle(self, payload: Any, forced: Optional[Variant]) -> Dict[str, Any]:
        snap = self._snapshot
        rid = payload.get("request_id") if isinstance(payload, Mapping) else None
        try:
            req = GuardRequest.from_dict(payload)
        except InvalidRequest as exc:
            body = error_response(rid if isinstance(rid, str) else None, "invalid_request", str(exc))
            self._log(snap, body, None)
            return body
        if forced is not None:
            req = GuardRequest(req.request_id, req.document, req.response, forced)
        try:
            body = snap.pipeline.handle(req)
        except Exception as exc:  # never leak a stack trace to the caller
            logging.getLogger(__name__).exception("request %s failed", req.request_id)
            body = error_response(req.request_id, "internal_error", type(exc).__name__)
        self._log(snap, body, req)
        return body

    def _log(self, snap: _Snapshot, body: Dict[str, Any], req: Optional[GuardRequest]) -> None:
        record = {
            "request_id": body.get("request_id"),
            "action": body.get("action"),
            "ensemble_score": body.get("ensemble_score"),
            "iterations": body.get("iterations"),
            "latency_ms": body.get("latency_ms", {}).get("total"),
            "model_hash": snap.model.model_hash,
            "config_hash": snap.config.config_hash,
        }
        if "error" in body:
            record["error"] = body["error"]["code"]
        if req is not None and not snap.config.privacy:
            record.update(document=req.document, response=req.response, final_text=body.get("final_text"))
        request_log.info(json.dumps(record, sort_keys=True))

    def close(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
