"""Sentence-level factuality judges.

A judge sees the source document and one response sentence and answers
hallucinated (1) or not (0). :class:`OracleJudge` answers from the
generator's corruption markers; :class:`LexicalJudge` is a reference-free
lexical stand-in. An LLM-backed judge only needs to implement ``judge``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Protocol, Set, Tuple

from ..core import HallucinationCategory
from ..nli import lexical_baseline_score
from ..segmentation import is_punct, normalized_tokens, split_sentences
from .corpus import CATEGORIES, EvalRecord, contains_marker


@dataclass(frozen=True)
class Judgement:
    label: int
    category: Optional[HallucinationCategory] = None


class JudgeBackend(Protocol):
    def judge(self, document: str, sentence: str) -> Judgement: ...


class JudgeError(RuntimeError):
    pass


def judge_text(judge: JudgeBackend, document: str, text: str) -> int:
    """1 when any sentence of ``text`` is judged hallucinated; empty text is clean."""
    for span in split_sentences(text):
        if judge.judge(document, span.text(text)).label:
            return 1
    return 0


def _content(text: str) -> Tuple[str, ...]:
    return tuple(t for t in normalized_tokens(text) if not is_punct(t))


def _ngrams(tokens: Tuple[str, ...], n: int) -> Set[Tuple[str, ...]]:
    return {tokens[i:i + n] for i in range(len(tokens) - n + 1)}


@dataclass(frozen=True)
class _Marker:
    text: str
    category: Optional[HallucinationCategory]
    unsupported: frozenset  # content trigrams of a long marker that the document lacks


class OracleJudge:
    """Flags a sentence that still carries a corruption marker of its document.

    Short markers (three content tokens or fewer: a swapped name, a changed
    figure, an inserted negation) must appear as a whole. A longer marker (an
    injected sentence) counts as present while any of its trigrams that the
    document does not support survives in the sentence, so partially trimmed
    injections are still caught.
    """

    def __init__(self, records: Iterable[EvalRecord] = ()):
        self._markers: Dict[str, List[_Marker]] = {}
        self._doc_trigrams: Dict[str, Set[Tuple[str, ...]]] = {}
        for rec in records:
            for m in rec.markers:
                self.add(rec.document, m, CATEGORIES.get(rec.corruption) if rec.corruption else None)

    def add(self, document: str, marker: str, category: Optional[HallucinationCategory] = None) -> None:
        tokens = _content(marker)
        unsupported = frozenset()
        if len(tokens) > 3:
            if document not in self._doc_trigrams:
                self._doc_trigrams[document] = _ngrams(_content(document), 3)
            unsupported = frozenset(_ngrams(tokens, 3) - self._doc_trigrams[document])
        self._markers.setdefault(document, []).append(_Marker(marker, category, unsupported))

    def judge(self, document: str, sentence: str) -> Judgement:
        sent_tris = None
        for m in self._markers.get(document, ()):
            if m.unsupported:
                if sent_tris is None:
                    sent_tris = _ngrams(_content(sentence), 3)
                hit = bool(m.unsupported & sent_tris)
            else:
                hit = contains_marker(sentence, m.text)
            if hit:
                return Judgement(1, m.category)
        return Judgement(0)


class LexicalJudge:
    """Flags sentences whose lexical support score reaches ``threshold``."""

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def judge(self, document: str, sentence: str) -> Judgement:
        return Judgement(int(lexical_baseline_score(document, sentence) >= self.threshold))
