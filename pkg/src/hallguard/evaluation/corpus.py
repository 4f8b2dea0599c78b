"""Synthetic labelled corpus: extractive summaries with one injected error each.

Documents are built from sentence templates filled with gazetteer entities,
dates and figures. A clean record is a verbatim extract; a corrupted record
applies exactly one corruption and records where it happened (gold span) and
a marker string that never occurs in the source document.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from ..core import CharSpan, Family, HallucinationCategory, normalize_number, normalize_text
from ..ner import EntityType, Gazetteer, default_gazetteer, extract_entities
from ..segmentation import normalized_tokens, split_sentences

logger = logging.getLogger(__name__)

CORRUPTIONS = ("entity_swap", "number", "negation", "novel_sentence")

CATEGORIES = {
    "entity_swap": HallucinationCategory(Family.SEMANTIC_FRAME, "entity_error"),
    "number": HallucinationCategory(Family.SEMANTIC_FRAME, "circumstance_error"),
    "negation": HallucinationCategory(Family.SEMANTIC_FRAME, "predicate_error"),
    "novel_sentence": HallucinationCategory(Family.CONTENT_VERIFIABILITY, "out_of_article_error"),
}


@dataclass(frozen=True)
class EvalRecord:
    id: str
    document: str
    response: str
    label: int
    spans: Tuple[CharSpan, ...] = ()
    category: Optional[HallucinationCategory] = None
    corruption: Optional[str] = None
    markers: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        object.__setattr__(self, "markers", tuple(self.markers))
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        for sp in self.spans:
            if sp.end > len(self.response):
                raise ValueError(f"gold span {sp} outside the response")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "document": self.document,
            "response": self.response,
            "label": self.label,
            "spans": [[s.start, s.end] for s in self.spans],
            "category": self.category.to_dict() if self.category else None,
            "corruption": self.corruption,
            "markers": list(self.markers),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        return cls(
            id=str(d["id"]),
            document=d["document"],
            response=d["response"],
            label=int(d["label"]),
            spans=tuple(CharSpan(int(a), int(b)) for a, b in d.get("spans") or ()),
            category=HallucinationCategory.from_dict(d.get("category")),
            corruption=d.get("corruption"),
            markers=tuple(d.get("markers") or ()),
        )


def write_jsonl(records: Iterable[EvalRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> List[EvalRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# source documents

_MONTH_NAMES = ("January", "February", "March", "April", "May", "June", "July",
                "August", "September", "October", "November", "December")

_DOC_TEMPLATES = (
    "{person} joined {org} as chief executive in {month} {year}.",
    "On {date}, {org} opened a new office in {loc}.",
    "The company reported revenue of ${money} million for the year, up {pct}% from the previous year.",
    "{org} was founded in {year2} by {person2}.",
    "The team in {loc} has {count} employees.",
    "{person} said the project was completed ahead of schedule.",
    "The board meeting took place at {hour} am on {date2}.",
    "According to {person2}, the new product will launch in {loc2} next spring.",
    "The partnership with {org2} is expected to create {count2} jobs.",
    "Customer satisfaction scores were higher than last year.",
    "The report was reviewed by the audit committee before publication.",
    "{person} is responsible for operations across {small} countries.",
    "Shares of {org} rose {pct2}% after the announcement.",
    "The factory in {loc2} will double its output by {year3}.",
    "Most of the new hires are engineers who work on the mobile platform.",
    "{person2} has led the research group since {year2}.",
)

_NOVEL_TEMPLATES = (
    "{person} will present the findings at a conference in {loc} in {month}.",
    "Analysts expect a merger with {org} to close before {month} {year}.",
    "A second phase of the program will include {count} schools in {loc}.",
    "Critics argued that {org} ignored warnings from regulators in {loc}.",
    "{person} plans to step down after a dispute with investors over bonuses.",
    "Local officials praised {org} for donating ${money} million to hospitals.",
)

_AUX = re.compile(r"\b(was|is|will|were|has|are)\b")
_NUMBER_TOKEN = re.compile(r"(?<![\w.,])\d+(?:[.,]\d+)*(?![\w]|[.,]\d)")


def _pick(rng: random.Random, pool: Sequence[str], used: set) -> str:
    choices = [p for p in pool if normalize_text(p) not in used]
    value = rng.choice(choices or list(pool))
    used.add(normalize_text(value))
    return value


def _fill(template: str, rng: random.Random, gaz: Gazetteer, used: set, slots: Dict[str, str]) -> str:
    def slot(name: str) -> str:
        if name not in slots:
            base = name.rstrip("0123456789")
            if base == "person":
                people = [p for p in gaz.entries(EntityType.PERSON) if " " in p]
                slots[name] = _pick(rng, people, used)
            elif base == "org":
                slots[name] = _pick(rng, gaz.entries(EntityType.ORGANIZATION), used)
            elif base == "loc":
                slots[name] = _pick(rng, gaz.entries(EntityType.LOCATION), used)
            elif base == "month":
                slots[name] = rng.choice(_MONTH_NAMES)
            elif base == "year":
                slots[name] = str(rng.randint(1985, 2023))
            elif base == "date":
                slots[name] = f"{rng.choice(_MONTH_NAMES)} {rng.randint(1, 28)}, {rng.randint(2015, 2024)}"
            elif base == "money":
                slots[name] = f"{rng.randint(2, 950)}.{rng.randint(1, 9)}"
            elif base == "pct":
                slots[name] = str(rng.randint(2, 60))
            elif base == "count":
                slots[name] = str(rng.randint(25, 4000))
            elif base == "hour":
                slots[name] = str(rng.randint(8, 11))
            elif base == "small":
                slots[name] = str(rng.randint(3, 40))
            else:  # pragma: no cover - template typo
                raise KeyError(name)
        return slots[name]

    return re.sub(r"\{(\w+)\}", lambda m: slot(m.group(1)), template)


def synthesize_documents(
    seed: int, n_docs: int, gazetteer: Optional[Gazetteer] = None,
    min_sentences: int = 6, max_sentences: int = 9,
) -> List[Tuple[str, str]]:
    """``n_docs`` (id, text) pairs of templated business news, deterministic in ``seed``."""
    gaz = gazetteer or default_gazetteer()
    rng = random.Random(seed)
    docs = []
    for d in range(n_docs):
        used: set = set()
        slots: Dict[str, str] = {}
        k = rng.randint(min_sentences, max_sentences)
        picks = rng.sample(range(len(_DOC_TEMPLATES)), k)
        text = " ".join(_fill(_DOC_TEMPLATES[i], rng, gaz, used, slots) for i in picks)
        docs.append((f"doc-{seed}-{d:04d}", text))
    return docs


# ---------------------------------------------------------------------------
# corruptions


def _tokens_key(text: str) -> Tuple[str, ...]:
    return tuple(normalized_tokens(text))


def contains_marker(text: str, marker: str) -> bool:
    """Token-boundary containment of ``marker`` in ``text`` after normalization."""
    hay, needle = _tokens_key(text), _tokens_key(marker)
    if not needle:
        return False
    n = len(needle)
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


@dataclass
class _Corrupted:
    response: str
    span: CharSpan
    marker: str


def _entity_swap(doc: str, extract: str, rng: random.Random, gaz: Gazetteer) -> Optional[_Corrupted]:
    swappable = {EntityType.PERSON, EntityType.ORGANIZATION, EntityType.LOCATION}
    mentions = [m for m in extract_entities(extract, gaz) if m.entity_type in swappable]
    if not mentions:
        return None
    m = rng.choice(mentions)
    pool = [e for e in gaz.entries(m.entity_type)
            if (m.entity_type is not EntityType.PERSON or " " in e)
            and not contains_marker(doc, e) and normalize_text(e) not in normalize_text(doc)]
    if not pool:
        return None
    new = rng.choice(pool)
    s = m.span.start
    response = extract[:s] + new + extract[m.span.end:]
    return _Corrupted(response, CharSpan(s, s + len(new)), new)


def _perturb(value: str, rng: random.Random, doc_values: set) -> Optional[str]:
    is_decimal = "." in value
    base = float(value.replace(",", ""))
    for _ in range(50):
        if is_decimal:
            new = f"{base + rng.choice([-1, 1]) * rng.randint(1, 40) / 10:.1f}"
        elif 1900 <= base <= 2100:
            new = str(int(base) + rng.choice([-1, 1]) * rng.randint(1, 5))
        else:
            delta = max(1, int(round(base * rng.uniform(0.1, 0.6))))
            new = str(int(base) + rng.choice([-1, 1]) * delta)
        val = normalize_number(new)
        if val is not None and val > 0 and val not in doc_values:
            return new
    return None


def _number(doc: str, extract: str, rng: random.Random, gaz: Gazetteer) -> Optional[_Corrupted]:
    hits = list(_NUMBER_TOKEN.finditer(extract))
    if not hits:
        return None
    m = rng.choice(hits)
    doc_values = {normalize_number(t) for t in normalized_tokens(doc)} - {None}
    new = _perturb(m.group(), rng, doc_values)
    if new is None:
        return None
    response = extract[:m.start()] + new + extract[m.end():]
    return _Corrupted(response, CharSpan(m.start(), m.start() + len(new)), new)


def _negation(doc: str, extract: str, rng: random.Random, gaz: Gazetteer) -> Optional[_Corrupted]:
    options = []
    for m in _AUX.finditer(extract):
        nxt = re.match(r"\s+(\S+)", extract[m.end():])
        if not nxt:
            continue
        marker = f"{m.group()} not {nxt.group(1)}"
        if not contains_marker(doc, marker):
            options.append((m, marker))
    if not options:
        return None
    m, marker = rng.choice(options)
    response = extract[:m.end()] + " not" + extract[m.end():]
    return _Corrupted(response, CharSpan(m.end() + 1, m.end() + 4), marker)


def _novel_sentence(doc: str, extract: str, rng: random.Random, gaz: Gazetteer) -> Optional[_Corrupted]:
    used = {normalize_text(e) for t in (EntityType.PERSON, EntityType.ORGANIZATION, EntityType.LOCATION)
            for e in gaz.entries(t) if normalize_text(e) in normalize_text(doc)}
    sentence = _fill(rng.choice(_NOVEL_TEMPLATES), rng, gaz, used, {})
    spans = split_sentences(extract)
    cut = rng.randint(0, len(spans))
    if cut == len(spans):
        pos = len(extract)
        response = extract + " " + sentence
        start = pos + 1
    else:
        start = spans[cut].start
        response = extract[:start] + sentence + " " + extract[start:]
    return _Corrupted(response, CharSpan(start, start + len(sentence)), sentence)


_APPLY = {
    "entity_swap": _entity_swap,
    "number": _number,
    "negation": _negation,
    "novel_sentence": _novel_sentence,
}


def parse_mix(spec: Union[str, Mapping[str, float], None]) -> Dict[str, float]:
    """"entity_swap=2,number=1" → weights; None means a uniform mix."""
    if spec is None:
        return {c: 1.0 for c in CORRUPTIONS}
    if isinstance(spec, str):
        out = {}
        for part in spec.split(","):
            name, _, weight = part.partition("=")
            out[name.strip()] = float(weight) if weight else 1.0
        spec = out
    unknown = set(spec) - set(CORRUPTIONS)
    if unknown:
        raise ValueError(f"unknown corruption types: {sorted(unknown)}")
    if not any(w > 0 for w in spec.values()):
        raise ValueError("corruption mix needs at least one positive weight")
    return {k: float(v) for k, v in spec.items() if v > 0}


def extract_summary(text: str, rng: random.Random, k: int = 3) -> str:
    spans = split_sentences(text)
    if len(spans) < 3:
        raise ValueError("source documents need at least 3 sentences")
    picks = sorted(rng.sample(range(len(spans)), min(k, len(spans))))
    return " ".join(spans[i].text(text) for i in picks)


def generate_corrupted_corpus(
    seed: int,
    docs: Sequence[Tuple[str, str]],
    n_per_doc: int,
    mix: Union[str, Mapping[str, float], None] = None,
    positive_fraction: float = 0.5,
    gazetteer: Optional[Gazetteer] = None,
    summary_sentences: int = 3,
) -> List[EvalRecord]:
    """Labelled records, ``n_per_doc`` per document, deterministic in ``seed``.

    Within each document, the first ``round(n_per_doc * positive_fraction)``
    records are corrupted and the rest are clean extracts. A corruption that
    cannot be applied to its extract is skipped with a warning.
    """
    weights = parse_mix(mix)
    names = list(weights)
    gaz = gazetteer or default_gazetteer()
    rng = random.Random(seed)
    n_pos = int(round(n_per_doc * positive_fraction))
    records = []
    for doc_id, text in docs:
        for r in range(n_per_doc):
            extract = extract_summary(text, rng, summary_sentences)
            rid = f"{doc_id}-{r}"
            if r >= n_pos:
                records.append(EvalRecord(rid, text, extract, 0))
                continue
            kind = rng.choices(names, weights=[weights[n] for n in names])[0]
            bad = _APPLY[kind](text, extract, rng, gaz)
            if bad is None:
                logger.warning("skipping %s: %s not applicable", rid, kind)
                continue
            records.append(EvalRecord(rid, text, bad.response, 1, (bad.span,),
                                      CATEGORIES[kind], kind, (bad.marker,)))
    return records


def standard_corpus(seed: int, n_docs: int, n_per_doc: int = 4, mix=None) -> List[EvalRecord]:
    """Documents and records from one seed; distinct seeds give disjoint documents."""
    docs = synthesize_documents(seed, n_docs)
    return generate_corrupted_corpus(seed, docs, n_per_doc, mix)
