"""Sentence splitting, offset-preserving tokenization and document windows."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, List, NamedTuple, Optional, Union

from .core import CharSpan, SourceDocument, normalize_text

DEFAULT_ABBREVIATIONS = frozenset(
    {
        "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "mt", "inc", "ltd",
        "co", "corp", "vs", "etc", "e.g", "i.e", "u.s", "u.k", "no", "fig",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct",
        "nov", "dec", "approx", "est", "dept", "gen", "gov", "rep", "sen",
    }
)

# decimals and thousands-grouped numbers stay whole; hyphenated words stay whole
TOKEN_RE = re.compile(r"\d+(?:[.,]\d+)+|\w+(?:-\w+)*|[^\w\s]")
_TERMINATOR = re.compile(r"[.!?]+[\"'”’)\]]*")


class Token(NamedTuple):
    text: str
    start: int
    end: int


def is_punct(token: str) -> bool:
    return not any(ch.isalnum() or ch == "_" for ch in token)


def load_abbreviations(path: Union[str, Path]) -> FrozenSet[str]:
    """Read an abbreviation list, one entry per line, trailing dots optional."""
    entries = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            entries.add(normalize_text(line).rstrip("."))
    return frozenset(entries)


@dataclass(frozen=True)
class SegmenterConfig:
    max_segment_tokens: int = 512
    segment_overlap_tokens: int = 64
    abbreviations: FrozenSet[str] = field(default=DEFAULT_ABBREVIATIONS)

    def __post_init__(self):
        if self.max_segment_tokens < 1:
            raise ValueError("max_segment_tokens must be positive")
        if not 0 <= self.segment_overlap_tokens < self.max_segment_tokens:
            raise ValueError("segment_overlap_tokens must be in [0, max_segment_tokens)")
        object.__setattr__(self, "abbreviations", frozenset(self.abbreviations))


def tokenize(text: str) -> List[Token]:
    """Tokenize ``text`` keeping character offsets into the original string."""
    return [Token(m.group(), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    return sum(1 for _ in TOKEN_RE.finditer(normalize_text(text)))


def normalized_tokens(text: str) -> List[str]:
    return TOKEN_RE.findall(normalize_text(text))


def _word_before(text: str, pos: int) -> str:
    i = pos
    while i > 0 and (text[i - 1].isalnum() or text[i - 1] == "."):
        i -= 1
    return text[i:pos].strip(".").lower()


def _starts_sentence(text: str, pos: int) -> Optional[bool]:
    """None at end of text, else whether whitespace then an uppercase start follows."""
    n = len(text)
    if pos >= n or not text[pos:].strip():
        return None
    if not text[pos].isspace():
        return False
    j = pos
    while j < n and text[j].isspace():
        j += 1
    while j < n and text[j] in "\"'“‘([":
        j += 1
    return j < n and text[j].isupper()


def split_sentences(
    text: str, abbreviations: Iterable[str] = DEFAULT_ABBREVIATIONS
) -> List[CharSpan]:
    """Split ``text`` into sentence spans covering all non-whitespace content.

    >>> [s for s in split_sentences("Dr. Smith arrived. He left.")]
    [CharSpan(start=0, end=18), CharSpan(start=19, end=27)]
    """
    abbrevs = abbreviations if isinstance(abbreviations, (set, frozenset)) else set(abbreviations)
    cuts = []
    for m in _TERMINATOR.finditer(text):
        follows = _starts_sentence(text, m.end())
        if follows is False:
            continue
        if m.group().rstrip("\"'”’)]") == "." and follows is not None:
            word = _word_before(text, m.start())
            if word in abbrevs or (len(word) == 1 and word.isalpha()):
                continue
        cuts.append(m.end())
    cuts.append(len(text))

    spans = []
    start = 0
    for cut in cuts:
        piece = text[start:cut]
        stripped = piece.strip()
        if stripped:
            lead = len(piece) - len(piece.lstrip())
            s = start + lead
            spans.append(CharSpan(s, s + len(stripped)))
        start = cut
    return spans


def _units(text: str, cfg: SegmenterConfig):
    """Sentence spans with token counts; oversize sentences hard-split at token boundaries."""
    units = []
    for sent in split_sentences(text, cfg.abbreviations):
        n = count_tokens(sent.text(text))
        if n <= cfg.max_segment_tokens:
            units.append((sent, n))
            continue
        toks = tokenize(sent.text(text))
        for k in range(0, len(toks), cfg.max_segment_tokens):
            chunk = toks[k:k + cfg.max_segment_tokens]
            span = CharSpan(sent.start + chunk[0].start, sent.start + chunk[-1].end)
            units.append((span, count_tokens(span.text(text))))
    return units


def segment_document(doc: SourceDocument, cfg: SegmenterConfig = SegmenterConfig()) -> List[CharSpan]:
    """Sliding windows of whole sentences over ``doc.text``.

    Consecutive windows share trailing sentences worth at least
    ``segment_overlap_tokens`` tokens whenever sentence granularity allows
    it while still making progress.
    """
    units = _units(doc.text, cfg)
    if not units:
        return []
    windows = []
    i, n = 0, len(units)
    while True:
        j, total = i, 0
        while j < n and total + units[j][1] <= cfg.max_segment_tokens:
            total += units[j][1]
            j += 1
        windows.append(CharSpan(units[i][0].start, units[j - 1][0].end))
        if j == n:
            return windows
        k, overlap = j, 0
        while k - 1 > i and overlap < cfg.segment_overlap_tokens:
            k -= 1
            overlap += units[k][1]
        while k < j and overlap + units[j][1] > cfg.max_segment_tokens:
            overlap -= units[k][1]
            k += 1
        i = k
