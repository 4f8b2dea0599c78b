"""Rule and gazetteer entity extraction, and source/response entity alignment.

A local, deterministic stand-in for a hosted NER service: it returns typed
mentions with confidences, which is all the alignment step needs.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .core import (
    CharSpan,
    DetectorReport,
    ResponseUnderTest,
    SourceDocument,
    SpanVerdict,
    normalize_number,
    normalize_text,
)
from .segmentation import is_punct, normalized_tokens, split_sentences, tokenize

GAZETTEER_CONFIDENCE = 1.0
PATTERN_CONFIDENCE = 0.9
CAPITALIZATION_CONFIDENCE = 0.6


class EntityType(str, enum.Enum):
    PERSON = "Person"
    ORGANIZATION = "Organization"
    LOCATION = "Location"
    DATE = "Date"
    TIME = "Time"
    MONEY = "Money"
    PERCENT = "Percent"
    QUANTITY = "Quantity"
    OTHER = "Other"


NUMERIC_TYPES = frozenset({EntityType.MONEY, EntityType.PERCENT, EntityType.QUANTITY})
NAME_TYPES = frozenset({EntityType.PERSON, EntityType.ORGANIZATION})


@dataclass(frozen=True)
class EntityMention:
    span: CharSpan
    surface: str
    entity_type: EntityType
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        if len(self.surface) != len(self.span):
            raise ValueError("surface does not match span length")


_DEFAULT_ENABLED = frozenset(
    {EntityType.PERSON, EntityType.DATE, EntityType.MONEY, EntityType.PERCENT}
)


@dataclass(frozen=True)
class NerConfig:
    enabled: Mapping[EntityType, bool] = field(
        default_factory=lambda: {t: t in _DEFAULT_ENABLED for t in EntityType}
    )
    thresholds: Mapping[EntityType, float] = field(
        default_factory=lambda: {t: 0.5 for t in EntityType}
    )
    fuzzy_match: bool = False

    def __post_init__(self):
        enabled = {t: False for t in EntityType}
        given = self.enabled
        if not isinstance(given, Mapping):
            given = {t: True for t in given}
        enabled.update({EntityType(k): bool(v) for k, v in given.items()})
        thresholds = {t: 0.5 for t in EntityType}
        thresholds.update({EntityType(k): float(v) for k, v in self.thresholds.items()})
        for t, v in thresholds.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold for {t.value} must be in [0, 1]")
        object.__setattr__(self, "enabled", enabled)
        object.__setattr__(self, "thresholds", thresholds)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NerConfig":
        kwargs = {}
        if "enabled" in d:
            kwargs["enabled"] = d["enabled"]
        if "thresholds" in d:
            kwargs["thresholds"] = d["thresholds"]
        if "fuzzy_match" in d:
            kwargs["fuzzy_match"] = bool(d["fuzzy_match"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "enabled": [t.value for t, on in self.enabled.items() if on],
            "thresholds": {t.value: v for t, v in self.thresholds.items()},
            "fuzzy_match": self.fuzzy_match,
        }


class Gazetteer:
    """Immutable phrase → entity type lookup over normalized token sequences."""

    def __init__(self, entries: Mapping[EntityType, Iterable[str]] = ()):
        table: Dict[Tuple[str, ...], EntityType] = {}
        surfaces: Dict[EntityType, List[str]] = {}
        for etype, phrases in dict(entries).items():
            etype = EntityType(etype)
            for phrase in phrases:
                key = tuple(normalized_tokens(phrase))
                if key and key not in table:
                    table[key] = etype
                    surfaces.setdefault(etype, []).append(phrase.strip())
        self._table = table
        self._surfaces = {k: tuple(v) for k, v in surfaces.items()}
        self.max_len = max((len(k) for k in table), default=0)

    @classmethod
    def from_files(cls, files: Mapping[Union[str, EntityType], Union[str, Path]]) -> "Gazetteer":
        entries = {}
        for etype, path in files.items():
            lines = Path(path).read_text(encoding="utf-8").splitlines()
            entries[EntityType(etype)] = [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
        return cls(entries)

    def lookup(self, tokens: Sequence[str]) -> Optional[EntityType]:
        return self._table.get(tuple(tokens))

    def entries(self, etype: EntityType) -> Tuple[str, ...]:
        """Phrases of one type, original casing, in load order."""
        return self._surfaces.get(EntityType(etype), ())

    def __contains__(self, phrase: str) -> bool:
        return tuple(normalized_tokens(phrase)) in self._table

    def __len__(self) -> int:
        return len(self._table)


def _read_packaged(name: str) -> List[str]:
    text = resources.files("hallguard.data.gazetteer").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@lru_cache(maxsize=1)
def default_gazetteer() -> Gazetteer:
    return Gazetteer(
        {
            EntityType.PERSON: _read_packaged("person.txt"),
            EntityType.ORGANIZATION: _read_packaged("organization.txt"),
            EntityType.LOCATION: _read_packaged("location.txt"),
        }
    )


# ---------------------------------------------------------------------------
# patterns

_MONTHS = (
    "January|February|March|April|May|June|July|August|September|October|"
    "November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sept|Sep|Oct|Nov|Dec"
)
_WEEKDAYS = "Monday|Tuesday|Wednesday|Thursday|Friday|Saturday|Sunday"
_NUMWORD = (
    r"(?:(?:twenty|thirty|forty|fifty|sixty|seventy|eighty|ninety)"
    r"(?:-(?:one|two|three|four|five|six|seven|eight|nine))?|"
    r"zero|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|"
    r"thirteen|fourteen|fifteen|sixteen|seventeen|eighteen|nineteen)"
)
_NUM = r"(?:(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|" + _NUMWORD + r")"
_SCALE = r"(?:\s(?:thousand|million|billion|trillion))"
_ORD = r"(?:st|nd|rd|th)?"
_UNITS = (
    r"km|kilometers|kilometres|miles|meters|metres|kg|kilograms|tons|tonnes|"
    r"liters|litres|people|employees|staff|workers|users|customers|members|"
    r"students|patients|items|units|products|stores|offices|branches|vehicles|"
    r"hours|days|weeks|months|years|minutes|countries|cities|projects|sites"
)

_PATTERNS: List[Tuple[re.Pattern, EntityType]] = [
    (re.compile(rf"\b(?:{_MONTHS})\.? \d{{1,2}}{_ORD},? \d{{4}}\b"), EntityType.DATE),
    (re.compile(rf"\b\d{{1,2}}{_ORD} (?:of )?(?:{_MONTHS}),? \d{{4}}\b"), EntityType.DATE),
    (re.compile(rf"\b(?:{_MONTHS})\.? \d{{1,2}}{_ORD}\b"), EntityType.DATE),
    (re.compile(rf"\b(?:{_MONTHS}),? \d{{4}}\b"), EntityType.DATE),
    (re.compile(r"\b\d{4}-\d{2}-\d{2}\b"), EntityType.DATE),
    (re.compile(r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"), EntityType.DATE),
    (re.compile(rf"\b(?:{_WEEKDAYS})\b"), EntityType.DATE),
    (re.compile(r"\b(?:[Ii]n|[Ss]ince|by|until|from|during|of) ((?:1[6-9]|20)\d{2})\b"), EntityType.DATE),
    (re.compile(r"\b\d{1,2}:\d{2}(?:\s?(?:[ap]\.m\.|[ap]m\b))?", re.I), EntityType.TIME),
    (re.compile(r"\b\d{1,2}\s?(?:[ap]\.m\.|[ap]m\b)", re.I), EntityType.TIME),
    (re.compile(r"\b(?:noon|midnight)\b", re.I), EntityType.TIME),
    (re.compile(rf"[$€£¥]\s?{_NUM}(?:{_SCALE}|(?:m|bn|k)\b)?", re.I), EntityType.MONEY),
    (re.compile(rf"\b(?:USD|EUR|GBP)\s?{_NUM}{_SCALE}?", re.I), EntityType.MONEY),
    (re.compile(rf"\b{_NUM}{_SCALE}? (?:dollars|euros|pounds|yen|usd|eur|gbp)\b", re.I), EntityType.MONEY),
    (re.compile(rf"\b{_NUM}\s?%"), EntityType.PERCENT),
    (re.compile(rf"\b{_NUM} (?:percent|per cent)\b", re.I), EntityType.PERCENT),
    (re.compile(rf"\b{_NUM}{_SCALE}? (?:{_UNITS})\b", re.I), EntityType.QUANTITY),
]

_STOPWORDS = frozenset(
    """a an the this that these those he she it they we i you his her its their our
    my your in on at by for from with after before during and but or if when while as
    according however meanwhile also there here today yesterday tomorrow then next last
    all some many most each every no not one two three first new its it's despite although
    what which who why how where because since until once overall later earlier finally""".split()
)
_NON_NAMES = frozenset(m.lower() for m in (_MONTHS + "|" + _WEEKDAYS).split("|"))
_TITLES = frozenset({"dr", "mr", "mrs", "ms", "prof", "sir", "dame"})
_ORG_SUFFIXES = frozenset(
    {"ltd", "inc", "corp", "corporation", "company", "co", "group", "bank", "university",
     "institute", "agency", "association", "foundation", "ministry", "council", "llc",
     "plc", "gmbh", "labs", "systems", "airlines", "partners", "holdings"}
)
_LOCATION_CUES = frozenset({"in", "at", "from", "near", "to", "across"})


def _pattern_candidates(text: str):
    for rx, etype in _PATTERNS:
        group = 1 if rx.groups else 0
        for m in rx.finditer(text):
            yield (m.start(group), m.end(group), etype, PATTERN_CONFIDENCE)


def _sentence_starts(text: str) -> set:
    return {sp.start for sp in split_sentences(text)}


def _gazetteer_candidates(text: str, tokens, gaz: Gazetteer):
    norm = [normalize_text(t.text) for t in tokens]
    for i, tok in enumerate(tokens):
        if not tok.text[:1].isupper():
            continue
        for n in range(min(gaz.max_len, len(tokens) - i), 0, -1):
            etype = gaz.lookup(norm[i:i + n])
            if etype is not None:
                yield (tok.start, tokens[i + n - 1].end, etype, GAZETTEER_CONFIDENCE)
                break


def _capitalized_candidates(text: str, tokens, gaz: Gazetteer):
    starts = _sentence_starts(text)
    i, n = 0, len(tokens)
    while i < n:
        tok = tokens[i]
        title = tok.text.lower() in _TITLES and i + 1 < n and tokens[i + 1].text == "."
        if not (tok.text[:1].isupper() and not is_punct(tok.text)) or (
            not title and (tok.text.lower() in _STOPWORDS or tok.text.lower() in _NON_NAMES)
        ):
            i += 1
            continue
        j = i + 2 if title else i + 1
        while j < n:
            t = tokens[j].text
            adjacent = tokens[j].start - tokens[j - 1].end <= 1
            if adjacent and t[:1].isupper() and not is_punct(t) and t.lower() not in _NON_NAMES:
                j += 1
            else:
                break
        words = tokens[i:j]
        if title and len(words) == 2:
            i = j
            continue
        lone_initial = len(words) == 1 and tok.start in starts
        if lone_initial and gaz.lookup([normalize_text(tok.text)]) is None:
            i = j
            continue
        last = words[-1].text.lower()
        prev = tokens[i - 1].text.lower() if i > 0 else ""
        if title:
            etype = EntityType.PERSON
        elif last in _ORG_SUFFIXES:
            etype = EntityType.ORGANIZATION
        elif prev in _LOCATION_CUES:
            etype = EntityType.LOCATION
        else:
            etype = EntityType.PERSON
        yield (tok.start, words[-1].end, etype, CAPITALIZATION_CONFIDENCE)
        i = j


def extract_entities(text: str, gazetteer: Optional[Gazetteer] = None) -> List[EntityMention]:
    """Typed entity mentions in ``text``, sorted and non-overlapping.

    Overlaps resolve longest-first, then leftmost; at equal extent the
    higher-confidence rule wins.
    """
    gaz = default_gazetteer() if gazetteer is None else gazetteer
    tokens = tokenize(text)
    cands = list(_pattern_candidates(text))
    cands.extend(_gazetteer_candidates(text, tokens, gaz))
    cands.extend(_capitalized_candidates(text, tokens, gaz))
    cands.sort(key=lambda c: (-(c[1] - c[0]), c[0], -c[3]))

    taken: List[Tuple[int, int]] = []
    chosen = []
    for start, end, etype, conf in cands:
        if any(start < e and s < end for s, e in taken):
            continue
        taken.append((start, end))
        chosen.append(EntityMention(CharSpan(start, end), text[start:end], etype, conf))
    chosen.sort(key=lambda m: m.span.start)
    return chosen


# ---------------------------------------------------------------------------
# alignment

_SCALES = {"thousand": 10**3, "k": 10**3, "million": 10**6, "m": 10**6,
           "billion": 10**9, "bn": 10**9, "trillion": 10**12}


def mention_number(surface: str) -> Optional[Decimal]:
    """Canonical value of a numeric mention such as "$1.2 million" or "forty dollars"."""
    toks = normalized_tokens(surface)
    for i, tok in enumerate(toks):
        value = normalize_number(tok)
        if value is None:
            continue
        if i + 1 < len(toks) and toks[i + 1] in _SCALES:
            value = normalize_number(str(value * _SCALES[toks[i + 1]]))
        return value
    return None


_MONTH_INDEX = {
    name: (i % 12) + 1
    for i, name in enumerate(
        "january february march april may june july august september october november december "
        "jan feb mar apr may jun jul aug sep oct nov dec".split()
    )
}
_MONTH_INDEX["sept"] = 9
_DATE_MDY = re.compile(r"([a-z]+)\.? (\d{1,2})(?:st|nd|rd|th)?,? (\d{4})")
_DATE_DMY = re.compile(r"(\d{1,2})(?:st|nd|rd|th)? (?:of )?([a-z]+),? (\d{4})")
_DATE_ISO = re.compile(r"(\d{4})-(\d{2})-(\d{2})")


def date_key(surface: str) -> str:
    s = normalize_text(surface)
    m = _DATE_MDY.fullmatch(s)
    if m and m.group(1) in _MONTH_INDEX:
        return f"{m.group(3)}-{_MONTH_INDEX[m.group(1)]:02d}-{int(m.group(2)):02d}"
    m = _DATE_DMY.fullmatch(s)
    if m and m.group(2) in _MONTH_INDEX:
        return f"{m.group(3)}-{_MONTH_INDEX[m.group(2)]:02d}-{int(m.group(1)):02d}"
    m = _DATE_ISO.fullmatch(s)
    if m:
        return f"{m.group(1)}-{m.group(2)}-{m.group(3)}"
    return s


def _name_tokens(surface: str) -> frozenset:
    return frozenset(t for t in normalized_tokens(surface) if not is_punct(t) and t not in _TITLES)


def mentions_match(resp: EntityMention, src: EntityMention, fuzzy: bool = False) -> bool:
    if normalize_text(resp.surface) == normalize_text(src.surface):
        return True
    if resp.entity_type is EntityType.DATE and src.entity_type is EntityType.DATE:
        return date_key(resp.surface) == date_key(src.surface)
    if resp.entity_type in NUMERIC_TYPES and src.entity_type in NUMERIC_TYPES:
        a, b = mention_number(resp.surface), mention_number(src.surface)
        return a is not None and a == b
    if fuzzy and resp.entity_type in NAME_TYPES and src.entity_type in NAME_TYPES:
        rt = _name_tokens(resp.surface)
        return bool(rt) and rt <= _name_tokens(src.surface)
    return False


def align(
    source_entities: Sequence[EntityMention],
    response_entities: Sequence[EntityMention],
    cfg: NerConfig = NerConfig(),
) -> List[SpanVerdict]:
    """Response mentions with no supporting source mention, as span verdicts."""
    out = []
    for m in response_entities:
        if not cfg.enabled[m.entity_type] or m.confidence < cfg.thresholds[m.entity_type]:
            continue
        if any(mentions_match(m, s, cfg.fuzzy_match) for s in source_entities):
            continue
        out.append(SpanVerdict(m.span, "ner", m.entity_type.value, m.confidence, m.surface))
    return out


NER_FEATURES = ("ner_unsupported_count", "ner_max_confidence", "ner_person_count",
                "ner_date_count", "ner_numeric_count")


class NerDetector:
    """Entity-alignment detector: flags response entities absent from the source."""

    name = "ner"

    def __init__(self, config: NerConfig = NerConfig(), gazetteer: Optional[Gazetteer] = None):
        self.config = config
        self.gazetteer = gazetteer

    def detect(self, doc: SourceDocument, resp: ResponseUnderTest) -> DetectorReport:
        return detect(doc, resp, self.config, self.gazetteer)


def detect(
    doc: SourceDocument,
    resp: ResponseUnderTest,
    cfg: NerConfig = NerConfig(),
    gazetteer: Optional[Gazetteer] = None,
) -> DetectorReport:
    flagged = align(extract_entities(doc.text, gazetteer), extract_entities(resp.text, gazetteer), cfg)
    per_type = {t: 0 for t in EntityType}
    for sv in flagged:
        per_type[EntityType(sv.label)] += 1
    score = max((sv.score for sv in flagged), default=0.0)
    features = {
        "ner_unsupported_count": float(len(flagged)),
        "ner_max_confidence": score,
        "ner_person_count": float(per_type[EntityType.PERSON]),
        "ner_date_count": float(per_type[EntityType.DATE] + per_type[EntityType.TIME]),
        "ner_numeric_count": float(sum(per_type[t] for t in NUMERIC_TYPES)),
    }
    return DetectorReport("ner", score, flagged, features)
