"""Token-level span detection: per-token scores merged into flagged spans."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Protocol, Sequence

from .core import (
    CharSpan,
    DetectorError,
    DetectorReport,
    ResponseUnderTest,
    SourceDocument,
    SpanVerdict,
    normalize_number,
    normalize_text,
)
from .segmentation import is_punct, normalized_tokens, tokenize


class SbdBackend(Protocol):
    def label(self, document: str, response_tokens: Sequence[str]) -> List[float]: ...


@dataclass(frozen=True)
class SbdConfig:
    token_threshold: float = 0.5
    merge_gap: int = 2
    min_span_tokens: int = 1
    baseline_ngram: int = 3

    def __post_init__(self):
        if not 0.0 <= self.token_threshold <= 1.0:
            raise ValueError("token_threshold must be in [0, 1]")
        if self.merge_gap < 0:
            raise ValueError("merge_gap must be >= 0")
        if self.min_span_tokens < 1 or self.baseline_ngram < 1:
            raise ValueError("min_span_tokens and baseline_ngram must be >= 1")


def _key(token: str):
    value = normalize_number(token)
    return ("#", value) if value is not None else normalize_text(token)


def baseline_label(document: str, response_tokens: Sequence[str], n: int = 3) -> List[float]:
    """1.0 for tokens not covered by any response n-gram found in the document.

    Punctuation is ignored when forming n-grams and always scores 0. Responses
    with fewer content tokens than ``n`` fall back to their own length.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = [0.0] * len(response_tokens)
    content = [i for i, t in enumerate(response_tokens) if not is_punct(t)]
    if not content:
        return scores
    doc_keys = [_key(t) for t in normalized_tokens(document) if not is_punct(t)]
    keys = [_key(response_tokens[i]) for i in content]
    n = min(n, len(keys))
    doc_grams = {tuple(doc_keys[i:i + n]) for i in range(len(doc_keys) - n + 1)}
    covered = [False] * len(keys)
    for i in range(len(keys) - n + 1):
        if tuple(keys[i:i + n]) in doc_grams:
            for j in range(i, i + n):
                covered[j] = True
    for pos, ok in zip(content, covered):
        if not ok:
            scores[pos] = 1.0
    return scores


class NgramSbdBackend:
    def __init__(self, n: int = 3):
        self.n = n

    def label(self, document: str, response_tokens: Sequence[str]) -> List[float]:
        return baseline_label(document, response_tokens, self.n)


def merge_spans(token_scores: Sequence[float], cfg: SbdConfig = SbdConfig()) -> List[SpanVerdict]:
    """Merge flagged tokens into runs; span offsets here are token indices."""
    flagged = [i for i, s in enumerate(token_scores) if s >= cfg.token_threshold]
    runs = []
    for i in flagged:
        if runs and i - runs[-1][1] - 1 <= cfg.merge_gap:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    out = []
    for lo, hi in runs:
        if hi - lo + 1 < cfg.min_span_tokens:
            continue
        score = max(token_scores[lo:hi + 1])
        out.append(SpanVerdict(CharSpan(lo, hi + 1), "sbd", "span", float(score)))
    return out


SBD_FEATURES = ("sbd_flag_fraction", "sbd_span_count", "sbd_max_span_len")


def detect(
    doc: SourceDocument,
    resp: ResponseUnderTest,
    backend: SbdBackend = None,
    cfg: SbdConfig = SbdConfig(),
) -> DetectorReport:
    backend = NgramSbdBackend(cfg.baseline_ngram) if backend is None else backend
    tokens = tokenize(resp.text)
    if not tokens:
        return DetectorReport("sbd", 0.0, (), dict.fromkeys(SBD_FEATURES, 0.0))
    try:
        scores = [float(s) for s in backend.label(doc.text, [t.text for t in tokens])]
    except DetectorError:
        raise
    except Exception as exc:
        raise DetectorError("sbd", "backend_error", str(exc)) from exc
    if len(scores) != len(tokens):
        raise DetectorError("sbd", "length_mismatch", f"{len(scores)} scores for {len(tokens)} tokens")
    if any(not 0.0 <= s <= 1.0 for s in scores):
        raise DetectorError("sbd", "invalid_score")

    spans = []
    inside = 0
    longest = 0
    for sv in merge_spans(scores, cfg):
        lo, hi = sv.span.start, sv.span.end
        inside += hi - lo
        longest = max(longest, hi - lo)
        char_span = CharSpan(tokens[lo].start, tokens[hi - 1].end)
        spans.append(SpanVerdict(char_span, "sbd", "span", sv.score, char_span.text(resp.text)))
    features = {
        "sbd_flag_fraction": inside / len(tokens),
        "sbd_span_count": float(len(spans)),
        "sbd_max_span_len": float(longest),
    }
    score = max((s.score for s in spans), default=0.0)
    return DetectorReport("sbd", score, spans, features)


class SbdDetector:
    name = "sbd"

    def __init__(self, backend: SbdBackend = None, config: SbdConfig = SbdConfig()):
        self.backend = NgramSbdBackend(config.baseline_ngram) if backend is None else backend
        self.config = config

    def detect(self, doc: SourceDocument, resp: ResponseUnderTest) -> DetectorReport:
        return detect(doc, resp, self.backend, self.config)
