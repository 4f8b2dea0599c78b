"""Mirror-traffic replay: every record goes through every pipeline variant."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from ..ensemble import EnsembleModel
from ..rewrite import RewriterBackend
from ..service.config import PipelineConfig
from ..service.runtime import GuardPipeline, GuardRequest
from .corpus import EvalRecord
from .judge import JudgeBackend, judge_text
from .metrics import format_table

logger = logging.getLogger(__name__)

ACTIONS = ("pass", "rewritten", "blocked", "error")
LATENCY_FIELDS = ("mean_latency_ms", "p95_latency_ms")


@dataclass(frozen=True)
class TrafficRecord:
    id: str
    timestamp: float
    document: str
    response: str

    def to_dict(self) -> dict:
        return {"id": self.id, "timestamp": self.timestamp, "document": self.document, "response": self.response}

    @classmethod
    def from_dict(cls, d) -> "TrafficRecord":
        return cls(str(d["id"]), float(d.get("timestamp", 0.0)), d["document"], d["response"])


def traffic_from_records(records: Iterable[EvalRecord], start: float = 0.0, step: float = 1.0) -> List[TrafficRecord]:
    return [TrafficRecord(r.id, start + i * step, r.document, r.response) for i, r in enumerate(records)]


def write_traffic(records: Iterable[TrafficRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_traffic(path: Union[str, Path]) -> List[TrafficRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TrafficRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class Outcome:
    record_id: str
    variant: str
    action: str
    latency_ms: float
    output_tokens: int = 0
    detected: bool = False
    residual: Optional[int] = None


@dataclass
class VariantMetrics:
    """Counts and latency samples for one variant; rates are exact fractions."""

    name: str
    counts: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(ACTIONS, 0))
    detected: int = 0
    residual: int = 0
    judge_failures: int = 0
    output_tokens: int = 0
    latencies: List[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def rate(self, action: str) -> Fraction:
        return Fraction(self.counts[action], self.n) if self.n else Fraction(0)

    @property
    def hallucination_rate(self) -> Fraction:
        return Fraction(self.detected, self.n) if self.n else Fraction(0)

    @property
    def residual_rate(self) -> Fraction:
        judged = self.n - self.judge_failures - self.counts["error"]
        return Fraction(self.residual, judged) if judged else Fraction(0)

    def add(self, o: Outcome) -> None:
        self.counts[o.action] += 1
        if o.action == "error":
            return
        self.detected += int(o.detected)
        self.output_tokens += o.output_tokens
        self.latencies.append(o.latency_ms)
        if o.residual is None:
            if o.action != "blocked":
                self.judge_failures += 1
        else:
            self.residual += o.residual

    def row(self) -> dict:
        lat = np.asarray(self.latencies, dtype=float)
        return {
            "variant": self.name,
            "n": self.n,
            **{f"{a}_count": self.counts[a] for a in ACTIONS},
            "hallucination_rate": float(self.hallucination_rate),
            "block_rate": float(self.rate("blocked")),
            "pass_rate": float(self.rate("pass")),
            "rewrite_rate": float(self.rate("rewritten")),
            "error_rate": float(self.rate("error")),
            "residual_rate": float(self.residual_rate),
            "judge_failures": self.judge_failures,
            "mean_output_tokens": self.output_tokens / self.n if self.n else 0.0,
            "mean_latency_ms": float(lat.mean()) if lat.size else 0.0,
            "p95_latency_ms": float(np.percentile(lat, 95)) if lat.size else 0.0,
        }


@dataclass
class FlightReport:
    variants: Dict[str, VariantMetrics]
    outcomes: List[Outcome]
    latency_comparable: bool = True

    def __getitem__(self, name: str) -> VariantMetrics:
        return self.variants[name]

    def rows(self, include_latency: bool = True) -> List[dict]:
        out = []
        for name in sorted(self.variants):
            row = self.variants[name].row()
            row["latency_comparable"] = self.latency_comparable
            if not include_latency:
                for f in LATENCY_FIELDS:
                    row.pop(f)
            out.append(row)
        return out

    def table(self) -> str:
        cols = ("variant", "n", "hallucination_rate", "block_rate", "pass_rate", "rewrite_rate",
                "error_rate", "residual_rate", "mean_output_tokens", "mean_latency_ms", "p95_latency_ms")
        text = format_table(cols, [[r[c] for c in cols] for r in self.rows()])
        if not self.latency_comparable:
            text += "\n(latency measured under concurrent replay; not comparable across variants)"
        return text

    def write_jsonl(self, path: Union[str, Path], outcomes_path: Optional[Union[str, Path]] = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if outcomes_path:
            with open(outcomes_path, "w", encoding="utf-8") as fh:
                for o in self.outcomes:
                    fh.write(json.dumps(o.__dict__, sort_keys=True) + "\n")


def _replay_one(pipe: GuardPipeline, name: str, rec: TrafficRecord, judge: JudgeBackend) -> Outcome:
    t0 = time.perf_counter()
    try:
        body = pipe.handle(GuardRequest(rec.id, rec.document, rec.response))
    except Exception as exc:
        logger.warning("variant %s failed on %s: %s", name, rec.id, exc)
        return Outcome(rec.id, name, "error", (time.perf_counter() - t0) * 1000.0)
    latency = (time.perf_counter() - t0) * 1000.0
    action = body["action"]
    score = body.get("ensemble_score")
    detected = score is not None and score >= body["threshold"]
    residual = 0 if action == "blocked" else None
    if "final_text" in body:
        try:
            residual = judge_text(judge, rec.document, body["final_text"])
        except Exception as exc:
            logger.warning("judge failed on %s/%s: %s", name, rec.id, exc)
    return Outcome(rec.id, name, action, latency, int(body.get("output_tokens", 0)), detected, residual)


def run_flight(
    traffic: Sequence[TrafficRecord],
    variants: Sequence[PipelineConfig],
    judge: JudgeBackend,
    model: Optional[EnsembleModel] = None,
    rewriter_factory: Optional[Callable[[], RewriterBackend]] = None,
    workers: int = 1,
) -> FlightReport:
    """Replay ``traffic`` through every variant, each with its own pipeline.

    Variants run one after another per record so latencies are measured
    without interference. ``workers > 1`` spreads records over threads and
    marks latency as not comparable.
    """
    if not variants:
        raise ValueError("at least one variant is required")
    if not traffic:
        raise ValueError("traffic is empty")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")

    def load(cfg: PipelineConfig) -> EnsembleModel:
        if model is not None:
            return model
        if cfg.model_path:
            return EnsembleModel.load(cfg.model_path)
        from ..training import default_model

        return default_model()

    pipes = {cfg.name: GuardPipeline(cfg, load(cfg), rewriter_factory() if rewriter_factory else None)
             for cfg in variants}

    def replay(rec: TrafficRecord) -> List[Outcome]:
        return [_replay_one(pipes[name], name, rec, judge) for name in names]

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                per_record = list(pool.map(replay, traffic))
        else:
            per_record = [replay(rec) for rec in traffic]
    finally:
        for p in pipes.values():
            p.close()

    metrics = {name: VariantMetrics(name) for name in names}
    outcomes = [o for batch in per_record for o in batch]
    for o in outcomes:
        metrics[o.variant].add(o)
    return FlightReport(metrics, outcomes, latency_comparable=workers <= 1)
