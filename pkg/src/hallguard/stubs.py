"""Deterministic stand-ins for LLM rewriters and slow detectors.

They read the same prompts a real model would, so they exercise the full
prompt → output → splice path without network access.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .core import DetectorReport, ResponseUnderTest, SourceDocument
from .segmentation import count_tokens

_BLOCK = re.compile(r"<response>\n(.*)\n</response>", re.S)
_V2_ROW = re.compile(r"^\[(\d+)\] \((flagged|context)\) (.*)$")
_SENTENCE_HEAD = re.compile(r"^Sentence \[(\d+)\]: (\".*\")$")
_SPAN_ROW = re.compile(r"^  - \S+ [^:]+: (\".*\") \(score [0-9.]+\)$")


@dataclass
class ParsedPrompt:
    version: str
    response: str
    sentences: Dict[int, str] = field(default_factory=dict)
    flagged: List[int] = field(default_factory=list)
    quoted: Dict[int, str] = field(default_factory=dict)
    spans: Dict[int, List[str]] = field(default_factory=dict)


def parse_prompt(prompt: str) -> ParsedPrompt:
    blocks = _BLOCK.findall(prompt)
    block = blocks[-1] if blocks else ""
    rows = [_V2_ROW.match(line) for line in block.splitlines()]
    parsed = ParsedPrompt("v1", block)
    if block and all(rows):
        parsed.version = "v2"
        for m in rows:
            idx = int(m.group(1))
            parsed.sentences[idx] = m.group(3)
            if m.group(2) == "flagged":
                parsed.flagged.append(idx)
    current = None
    for line in prompt.splitlines():
        head = _SENTENCE_HEAD.match(line)
        if head:
            current = int(head.group(1))
            parsed.quoted[current] = json.loads(head.group(2))
            continue
        row = _SPAN_ROW.match(line)
        if row and current is not None:
            parsed.spans.setdefault(current, []).append(json.loads(row.group(1)))
    return parsed


def _delete_spans(sentence: str, spans: List[str]) -> str:
    out = sentence
    for span in sorted(set(spans), key=len, reverse=True):
        if span and span in out:
            out = out.replace(span, " ", 1)
    out = " ".join(out.split())
    out = re.sub(r"\s+([,.;:!?])", r"\1", out)
    if not any(ch.isalnum() for ch in out):
        return ""
    if sentence[:1].isupper():
        out = out[:1].upper() + out[1:]
    return out


class SpanDeletingRewriter:
    """Removes every flagged span from its sentence; drops sentences left empty."""

    def __init__(self, latency: float = 0.0, seconds_per_token: float = 0.0):
        self.latency = latency
        self.seconds_per_token = seconds_per_token

    def rewrite(self, prompt: str) -> Tuple[str, int]:
        p = parse_prompt(prompt)
        if p.version == "v2":
            lines = []
            for idx in p.flagged:
                cleaned = _delete_spans(p.sentences[idx], p.spans.get(idx, []))
                lines.append(f"[{idx}] {cleaned}".rstrip())
            text = "\n".join(lines)
        else:
            text = " ".join(p.response.split())
            for idx, sentence in p.quoted.items():
                cleaned = _delete_spans(sentence, p.spans.get(idx, []))
                text = text.replace(sentence, cleaned, 1)
            text = " ".join(text.split()) or "."
        tokens = count_tokens(text)
        self._sleep(tokens)
        return text, tokens

    def _sleep(self, tokens: int) -> None:
        delay = self.latency + self.seconds_per_token * tokens
        if delay > 0:
            time.sleep(delay)


class IdentityRewriter(SpanDeletingRewriter):
    """Returns the flagged sentences unchanged, so nothing ever gets fixed."""

    def rewrite(self, prompt: str) -> Tuple[str, int]:
        p = parse_prompt(prompt)
        if p.version == "v2":
            text = "\n".join(f"[{i}] {p.sentences[i]}" for i in p.flagged)
        else:
            text = p.response
        text = text or "."
        tokens = count_tokens(text)
        self._sleep(tokens)
        return text, tokens


class FailingRewriter:
    def __init__(self, exc: Optional[Exception] = None):
        self.exc = exc or RuntimeError("rewriter unavailable")

    def rewrite(self, prompt: str) -> Tuple[str, int]:
        raise self.exc


class DelayedDetector:
    """Sleeps ``delay`` seconds, then returns a fixed report."""

    def __init__(self, name: str, delay: float, report: Optional[DetectorReport] = None):
        self.name = name
        self.delay = delay
        self.report = report or DetectorReport(name, 0.0)

    def detect(self, doc: SourceDocument, resp: ResponseUnderTest) -> DetectorReport:
        time.sleep(self.delay)
        return self.report
