"""Concurrent detector fan-out feeding the boosted-tree ensemble."""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .core import DetectorError, DetectorReport, ResponseUnderTest, SourceDocument, SpanVerdict, Verdict
from .ensemble import EnsembleModel
from .features import FEATURE_NAMES, assemble_features

logger = logging.getLogger(__name__)


class Detector(Protocol):
    name: str

    def detect(self, doc: SourceDocument, resp: ResponseUnderTest) -> DetectorReport: ...


class FailurePolicy(str, enum.Enum):
    FAIL_OPEN = "fail_open"
    FAIL_CLOSED = "fail_closed"


@dataclass(frozen=True)
class DetectionResult:
    verdict: Verdict
    reports: Dict[str, DetectorReport]
    features: np.ndarray
    failures: Dict[str, str] = field(default_factory=dict)
    latency_ms: Dict[str, float] = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.verdict.score

    def all_spans(self) -> List[SpanVerdict]:
        spans = [sv for r in self.reports.values() for sv in r.spans]
        return sorted(spans, key=lambda s: (s.span.start, s.detector, s.span.end))


class FederatedDetector:
    """Run every detector concurrently and fuse their features with ``model``.

    A detector that raises or misses ``timeout`` seconds is recorded in
    ``failures``. Under ``FAIL_CLOSED`` a :class:`DetectorError` is raised;
    under ``FAIL_OPEN`` the detector's features are zero-filled.
    """

    def __init__(
        self,
        detectors: Sequence[Detector],
        model: EnsembleModel,
        timeout: Optional[float] = 0.3,
        failure_policy: FailurePolicy = FailurePolicy.FAIL_CLOSED,
        executor: Optional[ThreadPoolExecutor] = None,
    ):
        if not detectors:
            raise ValueError("at least one detector must be enabled")
        if tuple(model.feature_names) != FEATURE_NAMES:
            raise ValueError("model feature schema does not match the detector features")
        self.detectors = list(detectors)
        self.model = model
        self.timeout = timeout
        self.failure_policy = FailurePolicy(failure_policy)
        self._executor = executor or ThreadPoolExecutor(
            max_workers=max(4, 2 * len(self.detectors)), thread_name_prefix="detector"
        )

    @staticmethod
    def _timed(detector: Detector, doc, resp) -> Tuple[DetectorReport, float]:
        t0 = time.perf_counter()
        report = detector.detect(doc, resp)
        return report, (time.perf_counter() - t0) * 1000.0

    def run(self, doc: SourceDocument, resp: ResponseUnderTest, threshold: float) -> DetectionResult:
        futures = {self._executor.submit(self._timed, d, doc, resp): d.name for d in self.detectors}
        done, _ = wait(futures, timeout=self.timeout)
        reports: Dict[str, DetectorReport] = {}
        failures: Dict[str, str] = {}
        latency: Dict[str, float] = {}
        for fut, name in futures.items():
            if fut not in done:
                fut.cancel()
                failures[name] = "timeout"
                latency[name] = (self.timeout or 0.0) * 1000.0
                continue
            try:
                report, ms = fut.result()
            except DetectorError as exc:
                failures[name] = exc.cause
                continue
            except Exception as exc:
                logger.warning("detector %s crashed: %s", name, exc)
                failures[name] = "error"
                continue
            reports[name] = report
            latency[name] = ms
        if failures and self.failure_policy is FailurePolicy.FAIL_CLOSED:
            name, cause = sorted(failures.items())[0]
            raise DetectorError(name, cause, "detector_unavailable")

        t0 = time.perf_counter()
        features = assemble_features(reports, doc, resp)
        score = float(self.model.predict_proba(features)[0])
        latency["ensemble"] = (time.perf_counter() - t0) * 1000.0
        ordered = {d.name: reports[d.name] for d in self.detectors if d.name in reports}
        spans = sorted(
            (sv for r in ordered.values() for sv in r.spans),
            key=lambda s: (s.span.start, s.detector, s.span.end),
        )
        verdict = Verdict.decide(score, threshold, spans)
        return DetectionResult(verdict, ordered, features, failures, latency)

    def close(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
