"""Sentence-level entailment scoring against document segments.

The backend returns one hallucination score per (premise, hypothesis) pair,
already collapsed from three-way NLI to ``1 - P(entailment)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Protocol

from .core import (
    DetectorError,
    DetectorReport,
    ResponseUnderTest,
    SourceDocument,
    SpanVerdict,
    normalize_number,
    normalize_text,
)
from .segmentation import is_punct, normalized_tokens


class NliBackend(Protocol):
    def score(self, premise: str, hypothesis: str) -> float: ...


class Aggregation(str, enum.Enum):
    MAX = "max"
    MEAN_TOP_K = "mean_top_k"


@dataclass(frozen=True)
class NliConfig:
    sentence_threshold: float = 0.5
    aggregation: Aggregation = Aggregation.MAX
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if not 0.0 <= self.sentence_threshold <= 1.0:
            raise ValueError("sentence_threshold must be in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def aggregate(self, scores: List[float]) -> float:
        if not scores:
            return 0.0
        if self.aggregation is Aggregation.MAX:
            return max(scores)
        top = sorted(scores, reverse=True)[: self.k]
        return sum(top) / len(top)


def _support_keys(tokens):
    keys = set()
    for tok in tokens:
        keys.add(tok)
        value = normalize_number(tok)
        if value is not None:
            keys.add(("#", value))
    return keys


def lexical_baseline_score(premise: str, hypothesis: str) -> float:
    """Fraction of hypothesis content tokens that the premise does not contain."""
    content = [t for t in normalized_tokens(hypothesis) if not is_punct(t)]
    if not content:
        return 0.0
    stripped = hypothesis.strip()
    if stripped in premise or normalize_text(hypothesis) in normalize_text(premise):
        return 0.0
    support = _support_keys(normalized_tokens(premise))
    supported = 0
    for tok in content:
        value = normalize_number(tok)
        if tok in support or (value is not None and ("#", value) in support):
            supported += 1
    return 1.0 - supported / len(content)


class LexicalNliBackend:
    """Deterministic token-overlap stand-in for a fine-tuned entailment model."""

    def score(self, premise: str, hypothesis: str) -> float:
        return lexical_baseline_score(premise, hypothesis)


NLI_FEATURES = ("nli_aggregate", "nli_flagged_count", "nli_mean")


def sentence_scores(doc: SourceDocument, resp: ResponseUnderTest, backend: NliBackend) -> List[float]:
    """Per-sentence score, keeping the best-supporting (lowest) segment score."""
    premises = doc.segment_texts()
    kept = []
    for sent in resp.sentence_texts():
        best = 1.0
        for premise in premises:
            try:
                s = float(backend.score(premise, sent))
            except DetectorError:
                raise
            except Exception as exc:
                raise DetectorError("nli", "backend_error", str(exc)) from exc
            if not 0.0 <= s <= 1.0:
                raise DetectorError("nli", "invalid_score", repr(s))
            best = min(best, s)
        kept.append(best)
    return kept


def detect(
    doc: SourceDocument,
    resp: ResponseUnderTest,
    backend: NliBackend = LexicalNliBackend(),
    cfg: NliConfig = NliConfig(),
) -> DetectorReport:
    scores = sentence_scores(doc, resp, backend)
    spans = [
        SpanVerdict(sp, "nli", "unsupported_sentence", s, sp.text(resp.text))
        for sp, s in zip(resp.sentences, scores)
        if s >= cfg.sentence_threshold
    ]
    agg = cfg.aggregate(scores)
    features = {
        "nli_aggregate": agg,
        "nli_flagged_count": float(len(spans)),
        "nli_mean": sum(scores) / len(scores) if scores else 0.0,
    }
    return DetectorReport("nli", agg, spans, features)


class NliDetector:
    name = "nli"

    def __init__(self, backend: NliBackend = None, config: NliConfig = NliConfig()):
        self.backend = LexicalNliBackend() if backend is None else backend
        self.config = config

    def detect(self, doc: SourceDocument, resp: ResponseUnderTest) -> DetectorReport:
        return detect(doc, resp, self.backend, self.config)
