"""Rule-based extraction of normalized medical relations from criterion text.

A relation is an (attribute, comparator, values, unit) tuple. The parser is
schema-driven: each attribute carries synonyms, a value type and, where it
applies, a unit set or an ordered label list. Pattern matching runs on a
normalized rendering of the text (lowercase, spaced tokens), so the original
string and its detokenized re-rendering parse identically.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

COMPARATORS = ("<", "<=", ">", ">=", "=", "in_range", "in_set", "boolean")

CANONICAL_UNITS = ("kg/m2", "years", "mmHg", "ms", "%", "weeks", "g/dL")

# Normalized-token spellings -> canonical unit. Multi-token spellings are
# matched longest-first.
UNIT_SPELLINGS = {
    "kg / m2": "kg/m2",
    "kg / m 2": "kg/m2",
    "g / dl": "g/dL",
    "years": "years",
    "year": "years",
    "yrs": "years",
    "yr": "years",
    "mmhg": "mmHg",
    "ms": "ms",
    "msec": "ms",
    "milliseconds": "ms",
    "%": "%",
    "percent": "%",
    "weeks": "weeks",
    "week": "weeks",
    "wks": "weeks",
}

_NUM = r"\d+(?:\.\d+)?"
_TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")


@dataclass(frozen=True)
class Relation:
    """Normalized medical relation extracted from one criterion."""

    attribute: str
    comparator: str
    values: tuple = ()
    unit: Optional[str] = None

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if self.comparator == "boolean" and self.values:
            raise ValueError("boolean relation carries no values")
        if self.comparator == "in_range":
            if len(self.values) != 2 or self.values[0] > self.values[1]:
                raise ValueError("in_range needs (low, high) with low <= high")
        if self.unit is not None and self.unit not in CANONICAL_UNITS:
            raise ValueError(f"unit {self.unit!r} not in the canonical table")

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "comparator": self.comparator,
            "values": list(self.values),
            "unit": self.unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Relation":
        return cls(d["attribute"], d["comparator"], tuple(d["values"]), d.get("unit"))


@dataclass(frozen=True)
class AttributeSpec:
    """Schema entry: how one attribute is spotted and typed."""

    tag: str
    value_type: str  # numeric | ordinal | boolean
    synonyms: tuple
    unit: Optional[str] = None
    labels: tuple = ()

    def __post_init__(self):
        if self.value_type not in ("numeric", "ordinal", "boolean"):
            raise ValueError(f"bad value_type {self.value_type!r}")


@dataclass
class AttributeSchema:
    """Attribute tag -> spec; immutable after load."""

    specs: dict = field(default_factory=dict)

    @property
    def tags(self) -> list:
        return list(self.specs)

    def __contains__(self, tag: str) -> bool:
        return tag in self.specs

    def __getitem__(self, tag: str) -> AttributeSpec:
        return self.specs[tag]

    def to_file(self, path) -> None:
        rows = [
            {
                "tag": s.tag,
                "value_type": s.value_type,
                "synonyms": list(s.synonyms),
                "unit": s.unit,
                "labels": list(s.labels),
            }
            for s in self.specs.values()
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "AttributeSchema":
        with open(path, encoding="utf-8") as fh:
            rows = json.load(fh)
        specs = {
            r["tag"]: AttributeSpec(
                r["tag"], r["value_type"], tuple(r["synonyms"]), r.get("unit"),
                tuple(r.get("labels", ())),
            )
            for r in rows
        }
        return cls(specs)


def default_schema() -> AttributeSchema:
    """Schema for the twelve synthetic-corpus attributes."""
    specs = [
        AttributeSpec("age", "numeric", ("age", "aged"), unit="years"),
        AttributeSpec("bmi", "numeric", ("body mass index", "bmi"), unit="kg/m2"),
        AttributeSpec("gender", "ordinal", ("male", "female"), labels=("female", "male")),
        AttributeSpec("hba1c", "numeric", ("hba1c",), unit="%"),
        AttributeSpec(
            "nyha", "ordinal", ("nyha",), labels=("i", "ii", "iii", "iv")
        ),
        AttributeSpec(
            "sbp", "numeric",
            ("systolic blood pressure", "systolic pressure", "sbp"), unit="mmHg",
        ),
        AttributeSpec("qtc", "numeric", ("qtc",), unit="ms"),
        AttributeSpec("egfr", "numeric", ("egfr",), unit=None),
        AttributeSpec("life_expectancy", "numeric", ("life expectancy",), unit="weeks"),
        AttributeSpec("pregnancy", "boolean", ("pregnant", "pregnancy")),
        AttributeSpec("ecog", "ordinal", ("ecog",), labels=("0", "1", "2", "3", "4")),
        AttributeSpec("hemoglobin", "numeric", ("hemoglobin", "hgb"), unit="g/dL"),
    ]
    return AttributeSchema({s.tag: s for s in specs})


def normalize_text(text: str) -> str:
    """Lowercase, spaced-token rendering used by all pattern matching."""
    text = text.lower().replace("²", "2")
    return " ".join(_TOKEN_RE.findall(text))


def _find_attribute_spans(norm: str, schema: AttributeSchema) -> list:
    """(start, end, tag) spans of synonym hits, longest-first, no overlap."""
    hits = []
    for spec in schema.specs.values():
        for syn in spec.synonyms:
            for m in re.finditer(rf"(?<![\w]){re.escape(syn)}(?![\w])", norm):
                hits.append((m.start(), m.end(), spec.tag))
    hits.sort(key=lambda h: (h[0], -(h[1] - h[0])))
    taken: list = []
    for start, end, tag in sorted(hits, key=lambda h: (-(h[1] - h[0]), h[0])):
        if all(end <= s or start >= e for s, e, _ in taken):
            taken.append((start, end, tag))
    taken.sort()
    return taken


def _match_unit(tail: str) -> Optional[str]:
    """Canonical unit spelled out in the first few tokens of ``tail``."""
    tokens = tail.split()
    window = tokens[:5]
    spellings = sorted(UNIT_SPELLINGS, key=lambda s: -len(s.split()))
    for offset in range(len(window)):
        for spelling in spellings:
            parts = spelling.split()
            if window[offset : offset + len(parts)] == parts:
                return UNIT_SPELLINGS[spelling]
        # only look past the number's immediate neighbors when they are
        # connective words, not a different quantity
        if window[offset] not in ("(", ")", "old", "of", "or"):
            break
    return None


_RANGE_PATTERNS = (
    rf"within the range of ({_NUM}) (?:-|to) ({_NUM})",
    rf"in the range of ({_NUM}) (?:-|to) ({_NUM})",
    rf"between ({_NUM}) and ({_NUM})",
    rf"({_NUM}) (?:-|to) ({_NUM})",
)

_CUE_PATTERNS = (
    (rf"greater than or equal to ({_NUM})", ">="),
    (rf"less than or equal to ({_NUM})", "<="),
    (rf"(?:≥|> =|at least|no less than) ({_NUM})", ">="),
    (rf"(?:≤|< =|at most|no more than|not exceeding|up to) ({_NUM})", "<="),
    (rf"(?:>|above|over|greater than|more than|exceeding) ({_NUM})", ">"),
    (rf"(?:<|below|under|less than) ({_NUM})", "<"),
    (rf"(?:=|equal to|exactly) ({_NUM})", "="),
)

_POST_CUE_GE = re.compile(
    rf"({_NUM})(?: \w+){{0,2}} or (?:older|above|more|greater|higher)(?![\w])"
)
_POST_CUE_LE = re.compile(
    rf"({_NUM})(?: \w+){{0,2}} or (?:younger|below|less|fewer|lower)(?![\w])"
)


def _parse_numeric(window: str, spec: AttributeSpec) -> Optional[Relation]:
    for pat in _RANGE_PATTERNS:
        m = re.search(pat, window)
        if m:
            lo, hi = sorted((float(m.group(1)), float(m.group(2))))
            unit = _match_unit(window[m.end() :].lstrip())
            return Relation(spec.tag, "in_range", (lo, hi), unit)
    for pat, comp in _CUE_PATTERNS:
        m = re.search(pat, window)
        if m:
            value = float(m.group(1))
            unit = _match_unit(window[m.end() :].lstrip())
            return Relation(spec.tag, comp, (value,), unit)
    for post, comp in ((_POST_CUE_GE, ">="), (_POST_CUE_LE, "<=")):
        m = post.search(window)
        if m:
            value = float(m.group(1))
            unit = _match_unit(window[m.start() + len(m.group(1)) :].lstrip())
            return Relation(spec.tag, comp, (value,), unit)
    m = re.search(rf"of ({_NUM})", window)
    if m:
        value = float(m.group(1))
        unit = _match_unit(window[m.end() :].lstrip())
        return Relation(spec.tag, "=", (value,), unit)
    return None


def _parse_ordinal(window: str, spec: AttributeSpec) -> Optional[Relation]:
    labels = list(spec.labels)
    # longest-first alternation so "iii" is never read as "i" + "ii"
    alt = "|".join(re.escape(x) for x in sorted(labels, key=len, reverse=True))
    lab = rf"(?<![\w])(?:{alt})(?![\w])"

    def in_set(selected: Iterable[str]) -> Relation:
        return Relation(spec.tag, "in_set", tuple(sorted(set(selected))))

    m = re.search(rf"(?:above|over|worse than) ({lab})", window)
    if m:
        idx = labels.index(m.group(1))
        return in_set(labels[idx + 1 :]) if idx + 1 < len(labels) else None
    m = re.search(rf"(?:below|under|better than) ({lab})", window)
    if m:
        idx = labels.index(m.group(1))
        return in_set(labels[:idx]) if idx > 0 else None
    m = re.search(rf"({lab}) or (?:above|higher|worse|greater)(?![\w])", window)
    if m:
        return in_set(labels[labels.index(m.group(1)) :])
    m = re.search(rf"({lab}) or (?:below|lower|better|less)(?![\w])", window)
    if m:
        return in_set(labels[: labels.index(m.group(1)) + 1])
    m = re.search(rf"({lab}) (?:-|to) ({lab})", window)
    if m:
        i, j = sorted((labels.index(m.group(1)), labels.index(m.group(2))))
        return in_set(labels[i : j + 1])
    enum = re.search(rf"({lab})((?: (?:and|or|,) (?:{lab}))+)", window)
    if enum:
        found = [enum.group(1)] + re.findall(rf"(?:and|or|,) ({lab})", enum.group(2))
        return in_set(found)
    m = re.search(rf"({lab})", window)
    if m:
        return in_set([m.group(1)])
    return None


def parse_criterion(text: str, schema: Optional[AttributeSchema] = None) -> set:
    """Extract the relation set of one criterion; empty set when nothing parses."""
    schema = schema or default_schema()
    norm = normalize_text(text)
    spans = _find_attribute_spans(norm, schema)
    relations: set = set()
    for i, (start, end, tag) in enumerate(spans):
        spec = schema[tag]
        if spec.value_type == "boolean":
            relations.add(Relation(tag, "boolean"))
            continue
        if spec.value_type == "ordinal" and tag == "gender":
            # the synonym tokens are themselves the values
            present = {
                lab for lab in spec.labels
                if re.search(rf"(?<![\w]){lab}(?![\w])", norm)
            }
            if present:
                relations.add(Relation(tag, "in_set", tuple(sorted(present))))
            continue
        window_end = spans[i + 1][0] if i + 1 < len(spans) else len(norm)
        window = norm[end:window_end]
        parsed = (
            _parse_numeric(window, spec)
            if spec.value_type == "numeric"
            else _parse_ordinal(window, spec)
        )
        if parsed is not None:
            relations.add(parsed)
    return relations


def relation_set(criteria, schema: Optional[AttributeSchema] = None) -> set:
    """Union of per-criterion parses over a list of criterion texts or Criterion objects."""
    schema = schema or default_schema()
    out: set = set()
    for c in criteria:
        text = c if isinstance(c, str) else c.text
        out |= parse_criterion(text, schema)
    return out


def compare_sets(pred: set, gold: set) -> dict:
    """Exact-tuple overlap counts between predicted and gold relation sets."""
    tp = len(pred & gold)
    return {"tp": tp, "fp": len(pred) - tp, "fn": len(gold) - tp}
