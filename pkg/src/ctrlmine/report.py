"""Text and JSON emission of properties, enforcement histograms and scores."""

from __future__ import annotations

import json
import logging
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .clauses import format_const, parse_clause
from .errors import ParseError
from .invariant_engine import Property, PropertySet
from .partition import parse_precondition
from .postprocess import EqualityClassProperty
from .trace_model import root_signal

logger = logging.getLogger(__name__)

PAPER_TEXT = "paper_text"
MACHINE = "machine"
PROPERTIES_FORMAT = "ctrlmine-properties/1"
PROPERTY_SETS_FORMAT = "ctrlmine-property-sets/1"


# -- human-readable ---------------------------------------------------------------


def _member_text(m) -> str:
    return m if isinstance(m, str) else format_const(m)


def header_line(p: EqualityClassProperty) -> str:
    insn = p.precondition.instruction or "*"
    cond = p.precondition.condition_text
    if cond:
        return f'..{insn}():::EXIT;condition="{cond}"'
    return f"..{insn}():::EXIT"


def class_line(cls) -> str:
    return "[" + ", ".join(repr(_member_text(m)) for m in cls) + "]"


def _render_text(props: Sequence[EqualityClassProperty]) -> str:
    out = [f"# {len(props)} properties"]
    for p in props:
        out.append("=" * 75)
        out.append(header_line(p))
        out += [class_line(c) for c in p.classes]
        out += [str(r) for r in p.residuals]
    return "\n".join(out) + "\n"


# -- machine format ---------------------------------------------------------------


def _encode_member(m):
    if isinstance(m, str):
        return m
    if isinstance(m, bytes):
        return {"hex": m.hex()}
    return {"int": m}


def _decode_member(m):
    if isinstance(m, str):
        return m
    if "hex" in m:
        return bytes.fromhex(m["hex"])
    return int(m["int"])


def property_record(p: EqualityClassProperty) -> dict:
    return {
        "precondition": str(p.precondition),
        "classes": [[_encode_member(m) for m in c] for c in p.classes],
        "residuals": [str(r) for r in p.residuals],
        "enforced_by": sorted(p.enforced_by),
        "support": p.support,
        "tag": p.tag,
    }


def property_from_record(rec: Mapping) -> EqualityClassProperty:
    return EqualityClassProperty(
        parse_precondition(rec["precondition"]),
        tuple(tuple(_decode_member(m) for m in c) for c in rec["classes"]),
        tuple(parse_clause(r) for r in rec["residuals"]),
        int(rec["support"]),
        frozenset(rec["enforced_by"]),
        rec.get("tag", ""),
    )


def _render_machine(props: Sequence[EqualityClassProperty]) -> str:
    lines = [json.dumps({"format": PROPERTIES_FORMAT, "count": len(props)})]
    lines += [json.dumps(property_record(p)) for p in props]
    return "\n".join(lines) + "\n"


def render(props: Iterable[EqualityClassProperty], style: str = PAPER_TEXT) -> str:
    props = list(props)
    if style == PAPER_TEXT:
        return _render_text(props)
    if style == MACHINE:
        return _render_machine(props)
    raise ValueError(f"unknown style {style!r}")


def _json_lines(text: str, fmt: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty property file")
    try:
        head = json.loads(lines[0])
        if head.get("format") != fmt:
            raise ParseError(f"expected format {fmt}, got {head.get('format')!r}", 1)
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad JSON: {exc}") from None
    if head.get("count") is not None and head["count"] != len(records):
        raise ParseError(f"header announces {head['count']} records, found {len(records)}")
    return records


def parse_machine(text: str) -> list[EqualityClassProperty]:
    try:
        return [property_from_record(r) for r in _json_lines(text, PROPERTIES_FORMAT)]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad property record: {exc}") from None


def dump_property_sets(per_label: Mapping[str, PropertySet]) -> str:
    """Raw mining output: one JSON record per (label, program point)."""
    records = []
    for label in per_label:
        for p in per_label[label]:
            records.append({
                "label": label,
                "precondition": str(p.precondition),
                "clauses": [str(c) for c in p.clauses],
                "support": p.support,
            })
    lines = [json.dumps({"format": PROPERTY_SETS_FORMAT, "count": len(records), "labels": list(per_label)})]
    lines += [json.dumps(r) for r in records]
    return "\n".join(lines) + "\n"


def load_property_sets(text: str) -> dict[str, PropertySet]:
    head = json.loads(text.splitlines()[0]) if text.strip() else {}
    out = {label: PropertySet(label) for label in head.get("labels", [])}
    try:
        for r in _json_lines(text, PROPERTY_SETS_FORMAT):
            label = r["label"]
            prop = Property(
                parse_precondition(r["precondition"]),
                tuple(parse_clause(c) for c in r["clauses"]),
                int(r["support"]),
                frozenset([label]),
            )
            out.setdefault(label, PropertySet(label)).add(prop)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad property-set record: {exc}") from None
    return out


# -- enforcement histogram --------------------------------------------------------


@dataclass
class EnforcementHistogram:
    buckets: dict[int, int] = field(default_factory=dict)
    subsets: dict[tuple[str, ...], int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.buckets.values())

    def to_text(self) -> str:
        lines = ["enforcing_labels clauses"]
        lines += [f"{k} {self.buckets[k]}" for k in sorted(self.buckets)]
        lines.append("subset clauses")
        for s in sorted(self.subsets, key=lambda t: (len(t), t)):
            lines.append(f"{'+'.join(s)} {self.subsets[s]}")
        return "\n".join(lines) + "\n"


def enforcement_histogram(provenance: Iterable[frozenset[str]]) -> EnforcementHistogram:
    """Count retained clauses by how many labels enforce them.

    ``provenance`` holds one ``enforced_by`` set per retained clause, as
    produced by :meth:`ctrlmine.postprocess.IntersectResult.provenance`.
    """
    sizes: Counter = Counter()
    subsets: Counter = Counter()
    for labels in provenance:
        sizes[len(labels)] += 1
        if 1 <= len(labels) <= 3:
            subsets[tuple(sorted(labels))] += 1
    return EnforcementHistogram(dict(sorted(sizes.items())), dict(subsets))


# -- scoring ----------------------------------------------------------------------


@dataclass(frozen=True)
class MentionCounts:
    counts: Mapping[str, int]

    def __post_init__(self):
        for sig, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative mention count for {sig}")


def parse_mention_counts(text: str) -> MentionCounts:
    counts: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError
            counts[parts[0]] = int(parts[1])
        except ValueError:
            raise ParseError(f"bad mention count line {line!r}", lineno) from None
        if counts[parts[0]] < 0:
            raise ParseError(f"negative count for {parts[0]}", lineno)
    return MentionCounts(counts)


@dataclass
class ScoreReport:
    scores: list[int]
    minimum: int
    maximum: int
    median: float
    mean: float
    total: int
    cdf: list[tuple[int, float]]
    missing: list[str]

    def to_text(self) -> str:
        lines = [
            f"properties {len(self.scores)}",
            f"min {self.minimum}",
            f"max {self.maximum}",
            f"median {self.median:g}",
            f"mean {self.mean:.2f}",
            f"total {self.total}",
            "cdf",
        ]
        lines += [f"{s} {f:.4f}" for s, f in self.cdf]
        return "\n".join(lines) + "\n"


def property_signals(p) -> set[str]:
    """Distinct root signals a property mentions; orig(X) and D_X count as X."""
    names = p.signals() if hasattr(p, "signals") else {v for c in p.clauses for v in c.variables}
    return {root_signal(n) for n in names}


def spec_score(props: Iterable, counts: MentionCounts) -> ScoreReport:
    """Score each property by the summed mention counts of its distinct signals."""
    scores = []
    missing: set[str] = set()
    for p in props:
        total = 0
        for sig in property_signals(p):
            if sig not in counts.counts:
                missing.add(sig)
            total += counts.counts.get(sig, 0)
        scores.append(total)
    for sig in sorted(missing):
        logger.warning("no mention count for %s; scoring it as 0", sig)
    if not scores:
        return ScoreReport([], 0, 0, 0.0, 0.0, 0, [], sorted(missing))
    ordered = sorted(scores)
    n = len(ordered)
    cdf = []
    for i, s in enumerate(ordered):
        if i + 1 == n or ordered[i + 1] != s:
            cdf.append((s, (i + 1) / n))
    return ScoreReport(
        scores, ordered[0], ordered[-1], statistics.median(ordered),
        statistics.fmean(ordered), sum(ordered), cdf, sorted(missing),
    )
