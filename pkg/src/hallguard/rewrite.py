"""Detect, rewrite, re-detect loop with a stricter verification gate.

Prompt v1 asks for step-by-step checking and a full rewrite. Prompt v2 shows
only the flagged sentences (plus one neighbour on each side) and asks for
indexed replacement lines, which keeps output tokens small and lets
unflagged sentences pass through byte-for-byte.
"""

from __future__ import annotations

import enum
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from .core import DetectorReport, ResponseUnderTest, SourceDocument, Verdict
from .pipeline import DetectionResult, FederatedDetector
from .segmentation import split_sentences

PLACEHOLDERS = ("{document}", "{response}", "{feedback}")
_PLACEHOLDER_RE = re.compile(r"\{(document|response|feedback)\}")
_V2_LINE = re.compile(r"^\s*\[(\d+)\][ \t]?(.*)$")
_V1_MARKER = "REWRITTEN:"


class RewriterBackend(Protocol):
    def rewrite(self, prompt: str) -> Tuple[str, int]: ...


class PromptVersion(str, enum.Enum):
    V1 = "v1"
    V2 = "v2"


class RewriteFormatError(ValueError):
    """Backend output that cannot be applied to the response."""


V1_TEMPLATE = """\
You are verifying a response against its source document.

<document>
{document}
</document>

<response>
{response}
</response>

Detector feedback:
{feedback}

Check the response sentence by sentence against the document and explain, step by step,
every statement that the document does not support. Then rewrite the full response so
that every statement is supported, fixing the errors with minimal changes.
Write the rewritten response after a line containing only "REWRITTEN:".
"""

V2_TEMPLATE = """\
Correct the flagged sentences so that the source document supports them. Make minimal
changes and do not explain.

<document>
{document}
</document>

<response>
{response}
</response>

Detector feedback:
{feedback}

Return one line per flagged sentence in the form "[index] corrected sentence".
An empty correction deletes the sentence. Do not return context sentences.
"""


@dataclass(frozen=True)
class PromptTemplate:
    version: PromptVersion
    text: str

    def __post_init__(self):
        object.__setattr__(self, "version", PromptVersion(self.version))
        for ph in PLACEHOLDERS:
            if self.text.count(ph) != 1:
                raise ValueError(f"template must contain {ph} exactly once")

    @classmethod
    def default(cls, version: Union[str, PromptVersion]) -> "PromptTemplate":
        version = PromptVersion(version)
        return cls(version, V1_TEMPLATE if version is PromptVersion.V1 else V2_TEMPLATE)

    @classmethod
    def from_file(cls, path: Union[str, Path], version: Union[str, PromptVersion]) -> "PromptTemplate":
        return cls(PromptVersion(version), Path(path).read_text(encoding="utf-8"))


def _one_line(s: str) -> str:
    return " ".join(s.split())


def flagged_sentences(resp: ResponseUnderTest, spans) -> List[int]:
    hit = set()
    for sv in spans:
        for i, sent in enumerate(resp.sentences):
            if sent.overlaps(sv.span):
                hit.add(i)
    return sorted(hit)


def build_feedback(
    reports: Mapping[str, DetectorReport], verdict: Verdict, resp: ResponseUnderTest
) -> str:
    """Render detector evidence for the rewriter, grouped by flagged sentence.

    Spans are ordered by start offset, then detector name. When no detector
    produced a span the feedback states a response-level suspicion instead.
    """
    if not verdict.hallucinated:
        raise ValueError("feedback is only built for hallucinated verdicts")
    spans = sorted(
        (sv for r in reports.values() for sv in r.spans),
        key=lambda s: (s.span.start, s.detector, s.span.end),
    )
    if not spans:
        return (
            f"The response as a whole is suspected to contain unsupported content "
            f"(ensemble score {verdict.score:.2f}), but no specific span was flagged."
        )
    by_sentence: Dict[int, list] = {}
    for sv in spans:
        idx = resp.sentence_index(sv.span)
        by_sentence.setdefault(-1 if idx is None else idx, []).append(sv)
    lines = []
    for idx in sorted(by_sentence, key=lambda i: by_sentence[i][0].span.start):
        if idx >= 0:
            quoted = json.dumps(_one_line(resp.sentences[idx].text(resp.text)), ensure_ascii=False)
            lines.append(f"Sentence [{idx + 1}]: {quoted}")
        for sv in by_sentence[idx]:
            text = json.dumps(_one_line(sv.span.text(resp.text)), ensure_ascii=False)
            lines.append(f"  - {sv.detector} {sv.label}: {text} (score {sv.score:.2f})")
    return "\n".join(lines)


def _render_response(version: PromptVersion, resp: ResponseUnderTest, flagged: Sequence[int]) -> str:
    if version is PromptVersion.V1:
        return resp.text
    targets = set(flagged) or set(range(len(resp.sentences)))
    shown = set()
    for i in targets:
        shown.update(j for j in (i - 1, i, i + 1) if 0 <= j < len(resp.sentences))
    lines = []
    for i in sorted(shown):
        tag = "flagged" if i in targets else "context"
        lines.append(f"[{i + 1}] ({tag}) {_one_line(resp.sentences[i].text(resp.text))}")
    return "\n".join(lines)


def build_prompt(
    template: PromptTemplate,
    doc: SourceDocument,
    resp: ResponseUnderTest,
    feedback: str,
    flagged: Sequence[int] = (),
) -> str:
    if not feedback.strip():
        raise ValueError("feedback must not be empty")
    values = {
        "document": doc.text,
        "response": _render_response(template.version, resp, flagged),
        "feedback": feedback,
    }
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.text)


def _splice(resp: ResponseUnderTest, replacements: Mapping[int, str]) -> str:
    text = resp.text
    for i in sorted(replacements, reverse=True):
        sent = resp.sentences[i]
        new = replacements[i].strip()
        start, end = sent.start, sent.end
        if not new:
            while end < len(text) and text[end].isspace():
                end += 1
            if end == len(text):
                while start > 0 and text[start - 1].isspace():
                    start -= 1
        text = text[:start] + new + text[end:]
    return text


def apply_rewrite(
    resp: ResponseUnderTest, version: Union[str, PromptVersion], backend_output: str
) -> Tuple[ResponseUnderTest, bool]:
    """Apply backend output; returns the new response and whether v2 fell back to full text."""
    version = PromptVersion(version)
    if not backend_output or not backend_output.strip():
        raise RewriteFormatError("empty rewriter output")
    fallback = False
    if version is PromptVersion.V1:
        head, marker, tail = backend_output.rpartition(_V1_MARKER)
        text = tail.strip() if marker else backend_output.strip()
    else:
        replacements = {}
        for line in backend_output.splitlines():
            m = _V2_LINE.match(line)
            if m:
                replacements[int(m.group(1)) - 1] = m.group(2)
        if replacements:
            bad = [i + 1 for i in replacements if not 0 <= i < len(resp.sentences)]
            if bad:
                raise RewriteFormatError(f"sentence index out of range: {bad}")
            text = _splice(resp, replacements)
        else:
            fallback = True
            text = backend_output.strip()
    return ResponseUnderTest(resp.id, text, tuple(split_sentences(text))), fallback


# ---------------------------------------------------------------------------
# the loop


class FinalAction(str, enum.Enum):
    PASS = "pass"
    DELIVER_REWRITTEN = "rewritten"
    BLOCK = "blocked"


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 2
    prompt_version: PromptVersion = PromptVersion.V2
    detection_threshold: Optional[float] = None
    verification_threshold: Optional[float] = None
    token_budget: Optional[int] = None
    deadline: Optional[float] = None  # seconds

    def __post_init__(self):
        object.__setattr__(self, "prompt_version", PromptVersion(self.prompt_version))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        d, v = self.detection_threshold, self.verification_threshold
        if d is not None and v is not None and v < d:
            raise ValueError("verification_threshold must be >= detection_threshold")

    def resolve(self, thresholds: Mapping[str, float]) -> Tuple[float, float]:
        """Concrete (detection, verification) thresholds, falling back to the model's."""
        det = self.detection_threshold
        if det is None:
            det = thresholds.get("detection", 0.5)
        ver = self.verification_threshold
        if ver is None:
            ver = max(det, thresholds.get("verification", det))
        if ver < det:
            raise ValueError("verification_threshold must be >= detection_threshold")
        return det, ver


@dataclass(frozen=True)
class RewriteIteration:
    prompt: str
    rewritten_text: Optional[str]
    output_tokens: int
    elapsed: float
    verdict: Optional[Verdict] = None
    event: Optional[str] = None


@dataclass
class RewriteSession:
    initial: DetectionResult
    iterations: List[RewriteIteration] = field(default_factory=list)
    final_action: FinalAction = FinalAction.PASS
    final_text: str = ""
    verified_text: str = ""
    final_score: float = 0.0
    final_result: Optional[DetectionResult] = None
    events: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    detection_threshold: float = 0.5
    verification_threshold: float = 0.5
    latency_ms: Dict[str, float] = field(default_factory=dict)

    @property
    def output_tokens(self) -> int:
        return sum(it.output_tokens for it in self.iterations)

    @property
    def rewrite_time(self) -> float:
        return sum(it.elapsed for it in self.iterations)


def run_loop(
    doc: SourceDocument,
    resp: ResponseUnderTest,
    detector: FederatedDetector,
    rewriter: RewriterBackend,
    cfg: LoopConfig = LoopConfig(),
    template: Optional[PromptTemplate] = None,
    clock: Callable[[], float] = time.monotonic,
) -> RewriteSession:
    """Detect, then rewrite up to ``cfg.max_iterations`` times, then verify.

    Detector failures propagate as :class:`DetectorError` (the caller owns
    the failure policy). Rewriter failures, exhausted token budgets and
    deadlines end the loop early and send the lowest-scoring candidate seen
    so far to verification.
    """
    det_t, ver_t = cfg.resolve(detector.model.thresholds)
    template = template or PromptTemplate.default(cfg.prompt_version)
    started = clock()
    first = detector.run(doc, resp, det_t)
    session = RewriteSession(first, detection_threshold=det_t, verification_threshold=ver_t)
    session.latency_ms.update({f"detect.{k}": v for k, v in first.latency_ms.items()})

    if not first.verdict.hallucinated:
        session.final_action = FinalAction.PASS
        session.final_text = session.verified_text = resp.text
        session.final_score = first.score
        session.final_result = first
        session.wall_time = clock() - started
        return session

    current, current_result = resp, first
    best, best_result = resp, first
    short_circuit = False
    for n in range(cfg.max_iterations):
        if cfg.token_budget is not None and session.output_tokens >= cfg.token_budget:
            session.events.append("token_budget_exhausted")
            short_circuit = True
            break
        if cfg.deadline is not None and clock() - started >= cfg.deadline:
            session.events.append("deadline_exceeded")
            short_circuit = True
            break
        feedback = build_feedback(current_result.reports, current_result.verdict, current)
        flagged = flagged_sentences(current, current_result.all_spans())
        prompt = build_prompt(template, doc, current, feedback, flagged)
        t0 = clock()
        try:
            text, tokens = rewriter.rewrite(prompt)
            tokens = int(tokens)
            if tokens < 0:
                raise ValueError("negative output token count")
        except Exception as exc:
            session.iterations.append(RewriteIteration(prompt, None, 0, clock() - t0, event="rewriter_error"))
            session.events.append(f"rewriter_failed: {exc}")
            short_circuit = True
            break
        elapsed = clock() - t0
        session.latency_ms[f"rewrite.{n + 1}"] = elapsed * 1000.0
        try:
            candidate, fallback = apply_rewrite(current, cfg.prompt_version, text)
        except RewriteFormatError as exc:
            session.iterations.append(RewriteIteration(prompt, text, tokens, elapsed, event="format_error"))
            session.events.append(f"format_error: {exc}")
            continue
        result = detector.run(doc, candidate, det_t)
        session.iterations.append(
            RewriteIteration(prompt, candidate.text, tokens, elapsed, result.verdict,
                             "fallback" if fallback else None)
        )
        if fallback:
            session.events.append("fallback")
        current, current_result = candidate, result
        if result.score < best_result.score:
            best, best_result = candidate, result
        if not result.verdict.hallucinated:
            break
        if cfg.token_budget is not None and session.output_tokens >= cfg.token_budget:
            session.events.append("token_budget_exhausted")
            short_circuit = True
            break

    t0 = clock()
    final, final_result = (best, best_result) if short_circuit else (current, current_result)
    session.final_score = final_result.score
    session.final_result = final_result
    session.verified_text = final.text
    if final_result.score >= ver_t:
        session.final_action = FinalAction.BLOCK
        session.final_text = ""
    else:
        # Pass is reserved for responses that were clean on first detection.
        session.final_text = final.text
        session.final_action = FinalAction.DELIVER_REWRITTEN
        if final.text == resp.text:
            session.events.append("delivered_unchanged")
    session.latency_ms["verification"] = (clock() - t0) * 1000.0
    session.wall_time = clock() - started
    return session
