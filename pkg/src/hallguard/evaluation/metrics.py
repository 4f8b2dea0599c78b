"""Detection, mitigation and rater-disagreement metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..ensemble import EnsembleModel
from ..features import FEATURE_NAMES, DetectorFeaturizer, prepare
from ..service.runtime import GuardPipeline
from ..rewrite import FinalAction, run_loop
from .corpus import EvalRecord
from .judge import JudgeBackend, judge_text

logger = logging.getLogger(__name__)

METHODS = ("ner", "nli", "sbd", "ensemble")


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def of(cls, predicted: Sequence[int], gold: Sequence[int]) -> "Confusion":
        p = np.asarray(predicted, dtype=int)
        g = np.asarray(gold, dtype=int)
        if p.shape != g.shape:
            raise ValueError("predicted and gold labels differ in length")
        return cls(int(((p == 1) & (g == 1)).sum()), int(((p == 1) & (g == 0)).sum()),
                   int(((p == 0) & (g == 1)).sum()), int(((p == 0) & (g == 0)).sum()))

    @property
    def precision(self) -> float:
        """TP / (TP + FP); 0 when nothing was predicted positive."""
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision, "recall": self.recall, "f1": self.f1}


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "n/a" if v is None else str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in body)) if body else len(str(h))
              for i, h in enumerate(headers)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
              for r in body]
    return "\n".join(line.rstrip() for line in lines)


@dataclass(frozen=True)
class DetectionMetrics:
    methods: Dict[str, Confusion]
    threshold: float
    n: int

    def __getitem__(self, method: str) -> Confusion:
        return self.methods[method]

    def table(self) -> str:
        rows = [(m, c.precision, c.recall, c.f1, c.tp, c.fp, c.fn, c.tn) for m, c in self.methods.items()]
        return format_table(("method", "precision", "recall", "f1", "tp", "fp", "fn", "tn"), rows)

    def to_rows(self) -> List[dict]:
        return [{"method": m, "threshold": self.threshold, "n": self.n, **c.to_dict()}
                for m, c in self.methods.items()]


def method_predictions(X: np.ndarray, model: EnsembleModel, threshold: float) -> Dict[str, np.ndarray]:
    """Each detector alone (flags anything it reports) and the fused ensemble."""
    col = {n: i for i, n in enumerate(FEATURE_NAMES)}
    return {
        "ner": (X[:, col["ner_unsupported_count"]] > 0).astype(int),
        "nli": (X[:, col["nli_flagged_count"]] > 0).astype(int),
        "sbd": (X[:, col["sbd_span_count"]] > 0).astype(int),
        "ensemble": (model.predict_proba(X) >= threshold).astype(int),
    }


def evaluate_detection(
    records: Sequence[EvalRecord],
    model: EnsembleModel,
    threshold: Optional[float] = None,
    featurizer: Optional[DetectorFeaturizer] = None,
    X: Optional[np.ndarray] = None,
) -> DetectionMetrics:
    if not records:
        raise ValueError("no records to evaluate")
    if threshold is None:
        threshold = model.thresholds.get("detection", 0.5)
    if X is None:
        X = (featurizer or DetectorFeaturizer()).transform([(r.document, r.response) for r in records])
    gold = [r.label for r in records]
    preds = method_predictions(np.asarray(X, dtype=float), model, threshold)
    return DetectionMetrics({m: Confusion.of(preds[m], gold) for m in METHODS}, float(threshold), len(records))


@dataclass
class MitigationMetrics:
    n: int = 0
    detected: int = 0
    judged: int = 0
    fixed: int = 0
    judge_failures: int = 0
    delivered: int = 0
    residual: int = 0
    blocked: int = 0
    output_tokens: int = 0
    failed_ids: List[str] = field(default_factory=list)

    @property
    def mitigation_rate(self) -> Optional[float]:
        """Share of detected, successfully judged records whose rewrite is clean; None if none."""
        return self.fixed / self.judged if self.judged else None

    @property
    def residual_rate(self) -> Optional[float]:
        """Share of judged records whose delivered text still hallucinates."""
        total = self.n - self.judge_failures
        return self.residual / total if total else None

    @property
    def mean_output_tokens(self) -> Optional[float]:
        return self.output_tokens / self.judged if self.judged else None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "failed_ids"}
        d.update(mitigation_rate=self.mitigation_rate, residual_rate=self.residual_rate,
                 mean_output_tokens=self.mean_output_tokens, failed_ids=list(self.failed_ids))
        return d

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "failed_ids"]
        return format_table(("metric", "value"), rows)


def evaluate_mitigation(records: Sequence[EvalRecord], pipeline: GuardPipeline,
                        judge: JudgeBackend) -> MitigationMetrics:
    """Run the detect-rewrite-verify loop on every record and judge the outcome.

    A record counts as fixed when the candidate sent to verification is judged
    clean, whether or not verification then delivered it. A judge failure
    excludes the record from the rates and is counted in ``judge_failures``.
    """
    if not records:
        raise ValueError("no records to evaluate")
    m = MitigationMetrics()
    for rec in records:
        m.n += 1
        doc, resp = prepare(rec.document, rec.response, pipeline.config.segmenter)
        session = run_loop(doc, resp, pipeline.detector, pipeline.rewriter,
                           pipeline.loop_config, pipeline.template)
        detected = session.initial.verdict.hallucinated
        delivered = session.final_action is not FinalAction.BLOCK
        try:
            after = judge_text(judge, rec.document, session.verified_text) if detected else None
            residual = judge_text(judge, rec.document, session.final_text) if delivered else 0
        except Exception as exc:
            logger.warning("judge failed on %s: %s", rec.id, exc)
            m.judge_failures += 1
            m.failed_ids.append(rec.id)
            if detected:
                m.detected += 1
            continue
        if detected:
            m.detected += 1
            m.judged += 1
            m.fixed += int(after == 0)
            m.output_tokens += session.output_tokens
        m.delivered += int(delivered)
        m.blocked += int(not delivered)
        m.residual += residual
    return m


RATERS = ("reference", "judge")


def tabulate_disagreements(judge_labels: Sequence[int], reference_labels: Sequence[int],
                           truth_labels: Sequence[int]) -> Dict[str, Dict[str, int]]:
    """Errors of each rater against the truth: FP says hallucinated when clean."""
    if not len(judge_labels) == len(reference_labels) == len(truth_labels):
        raise ValueError("label vectors must have equal length")
    out = {}
    for name, labels in (("reference", reference_labels), ("judge", judge_labels)):
        c = Confusion.of(labels, truth_labels)
        out[name] = {"false_positives": c.fp, "false_negatives": c.fn, "total": c.fp + c.fn}
    return out
