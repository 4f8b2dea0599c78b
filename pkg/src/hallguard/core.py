"""Domain types shared by every stage, plus text normalization helpers.

Scores everywhere use one orientation: 1.0 means certainly hallucinated,
0.0 means certainly faithful. Character offsets are indices into Python
strings (Unicode code points), never bytes.
"""

from __future__ import annotations

import enum
import re
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Dict, List, Optional, Sequence, Tuple


@dataclass(frozen=True, order=True)
class CharSpan:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def text(self, s: str) -> str:
        return s[self.start:self.end]

    def overlaps(self, other: "CharSpan") -> bool:
        return self.start < other.end and other.start < self.end

    def contains(self, other: "CharSpan") -> bool:
        return self.start <= other.start and other.end <= self.end


def check_spans(spans: Sequence[CharSpan], length: int, windows: bool = False) -> None:
    """Raise ValueError unless spans are in bounds, sorted and pairwise disjoint.

    With ``windows=True`` neighbours may overlap, but starts and ends must
    both strictly increase (sliding windows).
    """
    prev = None
    for sp in spans:
        if sp.end > length:
            raise ValueError(f"span {sp} exceeds text length {length}")
        if prev is not None:
            if windows:
                ok = sp.start > prev.start and sp.end > prev.end
            else:
                ok = sp.start >= prev.end
            if not ok:
                raise ValueError(f"span {sp} is out of order after {prev}")
        prev = sp


class Family(str, enum.Enum):
    SEMANTIC_FRAME = "SemanticFrame"
    DISCOURSE = "Discourse"
    CONTENT_VERIFIABILITY = "ContentVerifiability"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class HallucinationCategory:
    family: Family = Family.UNKNOWN
    leaf: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family is Family.UNKNOWN and self.leaf is not None:
            raise ValueError("Unknown family cannot carry a leaf label")

    def to_dict(self) -> dict:
        return {"family": self.family.value, "leaf": self.leaf}

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> Optional["HallucinationCategory"]:
        if d is None:
            return None
        return cls(Family(d["family"]), d.get("leaf"))


@dataclass(frozen=True)
class SourceDocument:
    id: str
    text: str
    segments: Tuple[CharSpan, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        check_spans(self.segments, len(self.text), windows=True)

    def segment_texts(self) -> List[str]:
        """Segment texts, or the whole document when it was never segmented."""
        if not self.segments:
            return [self.text]
        return [sp.text(self.text) for sp in self.segments]


@dataclass(frozen=True)
class ResponseUnderTest:
    id: str
    text: str
    sentences: Tuple[CharSpan, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        check_spans(self.sentences, len(self.text))

    @classmethod
    def from_text(cls, text: str, id: str = "response") -> "ResponseUnderTest":
        from .segmentation import split_sentences

        return cls(id, text, tuple(split_sentences(text)))

    def sentence_texts(self) -> List[str]:
        return [sp.text(self.text) for sp in self.sentences]

    def sentence_index(self, span: CharSpan) -> Optional[int]:
        """Index of the first sentence overlapping ``span``."""
        for i, sent in enumerate(self.sentences):
            if sent.overlaps(span):
                return i
        return None


@dataclass(frozen=True)
class SpanVerdict:
    """One piece of detector evidence: a flagged span of the response."""

    span: CharSpan
    detector: str
    label: str
    score: float
    text: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"span score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "start": self.span.start,
            "end": self.span.end,
            "type": self.label,
            "detector": self.detector,
            "score": self.score,
            "text": self.text,
        }


@dataclass(frozen=True)
class DetectorReport:
    detector: str
    score: float
    spans: Tuple[SpanVerdict, ...] = ()
    features: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"report score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Verdict:
    hallucinated: bool
    score: float
    threshold: float
    spans: Tuple[SpanVerdict, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"verdict score {self.score} outside [0, 1]")
        if self.hallucinated != (self.score >= self.threshold):
            raise ValueError("hallucinated flag disagrees with score/threshold")
        if not self.hallucinated and self.spans:
            raise ValueError("a clean verdict cannot carry spans")

    @classmethod
    def decide(cls, score: float, threshold: float, spans: Sequence[SpanVerdict] = ()) -> "Verdict":
        flagged = score >= threshold
        return cls(flagged, score, threshold, tuple(spans) if flagged else ())


class DetectorError(RuntimeError):
    """A detector or its backend failed; the service decides what that means."""

    def __init__(self, detector: str, cause: str, message: str = ""):
        super().__init__(f"{detector}: {cause}" + (f" ({message})" if message else ""))
        self.detector = detector
        self.cause = cause


_WS = re.compile(r"\s+")


def normalize_text(raw: str) -> str:
    """Lowercase, NFC-normalize and collapse whitespace runs to one space.

    >>> normalize_text("  May  5, 2021 ")
    'may 5, 2021'
    """
    s = unicodedata.normalize("NFC", raw)
    s = unicodedata.normalize("NFC", s.lower())
    return _WS.sub(" ", s).strip()


_NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12, "thirteen": 13, "fourteen": 14, "fifteen": 15,
    "sixteen": 16, "seventeen": 17, "eighteen": 18, "nineteen": 19,
    "twenty": 20, "thirty": 30, "forty": 40, "fifty": 50, "sixty": 60,
    "seventy": 70, "eighty": 80, "ninety": 90,
}
_TENS = {"twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"}

_DIGITS = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?")


def number_word_value(word: str) -> Optional[int]:
    w = word.lower()
    if w in _NUMBER_WORDS:
        return _NUMBER_WORDS[w]
    tens, sep, unit = w.partition("-")
    if sep and tens in _TENS and unit in _NUMBER_WORDS and 0 < _NUMBER_WORDS[unit] < 10:
        return _NUMBER_WORDS[tens] + _NUMBER_WORDS[unit]
    return None


def normalize_number(token: str) -> Optional[Decimal]:
    """Canonical decimal value of a numeric token, or None.

    Accepts plain digits, digits with thousands separators, percent forms
    ("40%", "40 percent") and the number words zero..twenty plus the tens.
    """
    t = normalize_text(token)
    for suffix in ("%", " percent", " per cent", "percent"):
        if t.endswith(suffix):
            t = t[: -len(suffix)].strip()
            break
    if not t:
        return None
    if _DIGITS.fullmatch(t):
        try:
            value = Decimal(t.replace(",", ""))
        except InvalidOperation:  # pragma: no cover - regex guards this
            return None
        return _canonical(value)
    word = number_word_value(t)
    if word is not None:
        return Decimal(word)
    return None


def _canonical(value: Decimal) -> Decimal:
    # 40, 40.0 and 4E+1 must compare and hash identically
    value = value.normalize()
    if value == value.to_integral_value():
        return value.quantize(Decimal(1))
    return value
