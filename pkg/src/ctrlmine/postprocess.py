"""Reduction of per-label mined properties into a final specification.

Stages, in order: cross-label intersection, bitmask generalisation of
label-specific constants, equality closure, composition by precondition,
and the split into global and signal-specific properties.
"""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from .clauses import Clause, Const, Eq, InSet, Masked, OrigEq, const_key, is_canonical, sort_clauses
from .invariant_engine import Property, PropertySet
from .partition import Precondition
from .signal_space import CandidateSignal
from .trace_model import orig_name, strip_orig

logger = logging.getLogger(__name__)

Member = Union[str, int, bytes]

TAG_INSN_ONLY = "insn-only"
TAG_PRECONDITION_ONLY = "precondition-only"


def _is_const(member: Member) -> bool:
    return not isinstance(member, str)


def member_key(member: Member) -> tuple:
    """Constants first (ascending), then names in ASCII order."""
    if _is_const(member):
        return (0, const_key(member))
    return (1, member)


def _pair_clause(a: str, b: str) -> Clause:
    if b == orig_name(a):
        return OrigEq(a)
    if a == orig_name(b):
        return OrigEq(b)
    return Eq(a, b)


@dataclass(frozen=True)
class EqualityClassProperty:
    precondition: Precondition
    classes: tuple[tuple[Member, ...], ...] = ()
    residuals: tuple = ()
    support: int = 0
    enforced_by: frozenset[str] = frozenset()
    tag: str = ""

    def __post_init__(self):
        classes = []
        for cls in self.classes:
            members = tuple(sorted(set(cls), key=member_key))
            if len(members) < 2:
                raise ValueError(f"equality class {members} has fewer than two members")
            if sum(_is_const(m) for m in members) > 1:
                raise ValueError(f"equality class {members} holds two constants")
            classes.append(members)
        classes.sort(key=lambda c: [member_key(m) for m in c])
        seen: set = set()
        for cls in classes:
            if seen & set(cls):
                raise ValueError("equality classes must be disjoint")
            seen |= set(cls)
        object.__setattr__(self, "classes", tuple(classes))
        object.__setattr__(self, "residuals", tuple(sort_clauses(set(self.residuals))))

    @property
    def clauses(self) -> list[Clause]:
        """Expand classes into grammar clauses (for replay and global matching)."""
        out: list[Clause] = []
        for cls in self.classes:
            names = [m for m in cls if isinstance(m, str)]
            consts = [m for m in cls if _is_const(m)]
            if consts:
                out += [Const(n, consts[0]) for n in names]
            else:
                out += [_pair_clause(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
        return out + list(self.residuals)

    def signals(self) -> set[str]:
        names = {m for cls in self.classes for m in cls if isinstance(m, str)}
        for c in self.residuals:
            names.update(c.variables)
        return names

    def clause_count(self) -> int:
        return len(self.clauses)


# -- union-find -------------------------------------------------------------------


class UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def add(self, x) -> None:
        self.parent.setdefault(x, x)

    def find(self, x):
        self.add(x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra

    def groups(self) -> list[list]:
        out: dict = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return list(out.values())


# -- intersection -----------------------------------------------------------------


@dataclass
class IntersectResult:
    merged: PropertySet
    # clauses kept by some but not all populated labels: (point, clause, labels)
    partial: list[tuple[Precondition, Clause, frozenset[str]]] = field(default_factory=list)

    def provenance(self) -> list[frozenset[str]]:
        """enforced_by of every retained clause, merged and partial alike."""
        out = [p.enforced_by for p in self.merged.points.values() for _ in p.clauses]
        return out + [labels for _, _, labels in self.partial]


def intersect(per_label: Mapping[str, PropertySet]) -> IntersectResult:
    """Keep a clause only if every label that populates its point agrees.

    Clause identity is value equality of the normalised clause objects, so
    ``Eq(a, b)`` and ``Eq(b, a)`` match.
    """
    if not per_label:
        raise ValueError("intersect needs at least one label")
    points: dict[Precondition, dict[str, Property]] = defaultdict(dict)
    for label, ps in per_label.items():
        for pc, prop in ps.points.items():
            points[pc][label] = prop
    merged = PropertySet("*")
    partial = []
    for pc in sorted(points, key=Precondition.sort_key):
        props = points[pc]
        labels = frozenset(props)
        clause_sets = [set(p.clauses) for p in props.values()]
        common = set.intersection(*clause_sets)
        support = sum(p.support for p in props.values())
        merged.add(Property(pc, tuple(sort_clauses(common)), support, labels))
        seen: dict[Clause, set[str]] = defaultdict(set)
        for label, p in props.items():
            for c in p.clauses:
                if c not in common:
                    seen[c].add(label)
        for c in sort_clauses(seen):
            partial.append((pc, c, frozenset(seen[c])))
    return IntersectResult(merged, partial)


# -- masks ------------------------------------------------------------------------


def detect_masks(
    per_label_constants: Mapping[str, Sequence[Const]],
    widths: Optional[Mapping[str, int]] = None,
    canonical_bit: int = 47,
) -> list[Masked]:
    """Generalise constants that differ between labels to their stable bits.

    Only variables with an integer constant in every label are considered.
    The canonical tag is added for 64-bit variables whose constants are all
    in canonical form.
    """
    if len(per_label_constants) < 2:
        return []
    by_var: dict[str, list[int]] = defaultdict(list)
    for consts in per_label_constants.values():
        for c in consts:
            if isinstance(c.value, int):
                by_var[c.var].append(c.value)
    n_labels = len(per_label_constants)
    out = []
    for var in sorted(by_var):
        values = by_var[var]
        if len(values) != n_labels or len(set(values)) == 1:
            continue
        width = (widths or {}).get(strip_orig(var), 64)
        full = (1 << width) - 1
        diff = 0
        for v in values[1:]:
            diff |= v ^ values[0]
        mask = full & ~diff
        if mask == 0:
            continue
        canonical = width == 64 and all(is_canonical(v, canonical_bit) for v in values)
        out.append(Masked(var, mask, values[0] & mask, canonical, canonical_bit))
    return out


def apply_masks(
    per_label: Mapping[str, PropertySet],
    result: IntersectResult,
    widths: Optional[Mapping[str, int]] = None,
    canonical_bit: int = 47,
) -> int:
    """Add mask clauses to ``result.merged`` in place; returns how many."""
    added = 0
    for pc, prop in list(result.merged.points.items()):
        if len(prop.enforced_by) < 2:
            continue
        consts = {
            label: [c for c in per_label[label].points[pc].clauses if isinstance(c, Const)]
            for label in sorted(prop.enforced_by)
        }
        masks = detect_masks(consts, widths, canonical_bit)
        if masks:
            clauses = tuple(sort_clauses(set(prop.clauses) | set(masks)))
            result.merged.add(Property(pc, clauses, prop.support, prop.enforced_by))
            added += len(masks)
    return added


# -- closure and composition ------------------------------------------------------


@dataclass
class Diagnostics:
    messages: list[str] = field(default_factory=list)

    def warn(self, msg: str) -> None:
        logger.debug(msg)
        self.messages.append(msg)


_EQUALITY = (Eq, Const, OrigEq)


Validator = Callable[[Precondition, Sequence[Clause]], bool]


def _close(pc: Precondition, clauses: Iterable[Clause], support: int, enforced_by: frozenset,
           diag: Optional[Diagnostics], tag: str = "",
           validate: Optional[Validator] = None, exact: bool = False) -> list[EqualityClassProperty]:
    """Close one point. With ``exact`` a class is kept only if it expands back
    to precisely the clauses it was built from, so no clause is gained or lost."""
    clauses = list(clauses)
    uf = UnionFind()
    equalities = [c for c in clauses if isinstance(c, _EQUALITY)]
    residual = [c for c in clauses if not isinstance(c, _EQUALITY)]
    for c in equalities:
        if isinstance(c, Const):
            uf.union(c.var, ("const", c.value))
        else:
            a, b = c.variables
            uf.union(a, b)
    by_root: dict = defaultdict(list)
    for c in equalities:
        by_root[uf.find(c.variables[0])].append(c)
    classes = []
    for group in uf.groups():
        members = [g[1] if isinstance(g, tuple) else g for g in group]
        original = by_root[uf.find(group[0])]
        if sum(_is_const(m) for m in members) > 1:
            if diag is not None:
                shown = sorted((str(m) for m in members))
                diag.warn(f"{pc}: equality class {shown} holds several constants; kept pairwise")
            residual += original
            continue
        if len(members) < 2:
            continue
        expanded = EqualityClassProperty(pc, (tuple(members),)).clauses
        known = set(original)
        if exact and set(expanded) != known:
            residual += original
            continue
        if validate is not None:
            derived = [c for c in expanded if c not in known]
            if derived and not validate(pc, derived):
                if diag is not None:
                    diag.warn(f"{pc}: closing {sorted(map(str, members))} fails replay; kept pairwise")
                residual += original
                continue
        classes.append(tuple(members))
    out = [EqualityClassProperty(pc, (cls,), (), support, enforced_by, tag) for cls in classes]
    if residual or not classes:
        out.append(EqualityClassProperty(pc, (), tuple(residual), support, enforced_by, tag))
    return out


def closure(
    props: Iterable[Property],
    diagnostics: Optional[Diagnostics] = None,
    validate: Optional[Validator] = None,
) -> list[EqualityClassProperty]:
    """Union-find over Eq/Const/OrigEq at each point.

    Emits one property per equality class plus one carrying the residual
    (non-equality) clauses; :func:`compose` merges them back per point.

    Each clause was judged only where its own variables are known, so a
    chain ``a == b``, ``b == c`` says nothing about rows where ``b`` is
    invalid. When ``validate`` is given, the clauses a class adds beyond its
    inputs are replayed through it and a failing class is left pairwise.
    """
    out = []
    for p in props:
        out += _close(p.precondition, p.clauses, p.support, p.enforced_by, diagnostics, "", validate)
    return out


def compose(props: Iterable[EqualityClassProperty]) -> list[EqualityClassProperty]:
    grouped: dict[Precondition, list[EqualityClassProperty]] = defaultdict(list)
    for p in props:
        grouped[p.precondition].append(p)
    out = []
    for pc in sorted(grouped, key=Precondition.sort_key):
        group = grouped[pc]
        classes = [c for p in group for c in p.classes]
        residuals = [r for p in group for r in p.residuals]
        labels = frozenset().union(*(p.enforced_by for p in group))
        tag = group[0].tag
        out.append(EqualityClassProperty(pc, tuple(classes), tuple(residuals),
                                         max(p.support for p in group), labels, tag))
    return out


# -- global properties ------------------------------------------------------------


def family(signal: str) -> frozenset[str]:
    """A candidate together with its orig and delta variables."""
    base = {signal, f"D_{signal}"}
    return frozenset(base | {orig_name(s) for s in base})


def _covered(unit: Clause, fam: frozenset[str]) -> bool:
    return all(v in fam for v in unit.variables)


def units(prop: EqualityClassProperty) -> frozenset[Clause]:
    return frozenset(prop.clauses)


@dataclass
class GlobalSplit:
    globals: list[EqualityClassProperty]
    specific: dict[str, list[EqualityClassProperty]]
    global_units: dict[str, frozenset[Clause]]

    @property
    def distinguishing(self) -> list[str]:
        """Candidates with a specific clause not merely restating their own partition."""
        out = []
        for s, props in self.specific.items():
            fam = family(s)
            if any(not _covered(u, fam) for p in props for u in units(p)):
                out.append(s)
        return sorted(out)


def _value_sets(us: Iterable[Clause]) -> dict[str, tuple]:
    out: dict[str, tuple] = {}
    for c in us:
        if isinstance(c, Const):
            out[c.var] = (c.value,)
        elif isinstance(c, InSet) and c.var not in out:
            out[c.var] = c.values
    return out


def _implied(unit: Clause, values: Mapping[str, tuple]) -> bool:
    """True when the partition's own Const/InSet clauses force ``unit`` to hold."""
    if not all(v in values for v in unit.variables):
        return False
    return all(unit.holds(combo) for combo in itertools.product(*(values[v] for v in unit.variables)))


def split_globals(
    per_signal: Mapping[str, Sequence[EqualityClassProperty]],
    diagnostics: Optional[Diagnostics] = None,
    validate: Optional[Validator] = None,
) -> GlobalSplit:
    """Separate clauses common to every candidate from signal-specific ones.

    Properties are compared per heading (instruction) after dropping the
    precondition's own control clauses, at the granularity of expanded
    clauses. A clause is global at heading ``h`` when every populated
    partition of every candidate at ``h`` either holds it or restricts its
    variables to values under which it is true (so ``N in {0, 1}`` still
    counts as common although N's own partitions pin N to 0 or 1).
    """
    by_heading: dict[str, list[tuple[frozenset[Clause], dict]]] = defaultdict(list)
    for props in per_signal.values():
        for p in props:
            us = units(p)
            by_heading[p.precondition.instruction].append((us, _value_sets(us)))
    global_units: dict[str, frozenset[Clause]] = {}
    for h, entries in by_heading.items():
        pool = set().union(*(us for us, _ in entries))
        keep = {
            u for u in pool
            if all(u in us or _implied(u, consts) for us, consts in entries)
        }
        if validate is not None and keep and not validate(Precondition(h), sort_clauses(keep)):
            # observations where every candidate is invalid are seen by no partition
            bad = {u for u in keep if not validate(Precondition(h), [u])}
            if diagnostics is not None:
                diagnostics.warn(f"{h}: {len(bad)} common clauses fail replay at the bare heading")
            keep -= bad
        global_units[h] = frozenset(keep)
    glob = []
    for h in sorted(global_units):
        if global_units[h]:
            pc = Precondition(h)
            closed = _close(pc, global_units[h], 0, frozenset(), diagnostics, TAG_INSN_ONLY, validate, exact=True)
            glob += compose(closed)
    specific: dict[str, list[EqualityClassProperty]] = {}
    for s, props in per_signal.items():
        out = []
        for p in props:
            rest = units(p) - global_units.get(p.precondition.instruction, frozenset())
            if not rest:
                continue
            tag = TAG_PRECONDITION_ONLY if p.precondition.instruction == "*" else ""
            out += compose(_close(p.precondition, rest, p.support, p.enforced_by, diagnostics, tag, exact=True))
        specific[s] = out
    return GlobalSplit(glob, specific, global_units)


# -- whole pipeline ---------------------------------------------------------------


@dataclass
class Specification:
    intersected: IntersectResult
    closed: list[EqualityClassProperty]
    split: GlobalSplit
    diagnostics: Diagnostics
    masks_added: int = 0

    @property
    def final(self) -> list[EqualityClassProperty]:
        """Globals followed by specific properties, in canonical order."""
        props = list(self.split.globals)
        for s in sorted(self.split.specific):
            props += self.split.specific[s]
        return props


def run_postprocess(
    per_label: Mapping[str, PropertySet],
    candidates: Sequence[CandidateSignal],
    widths: Optional[Mapping[str, int]] = None,
    canonical_bit: int = 47,
    validate: Optional[Validator] = None,
) -> Specification:
    """Run every reduction stage; ``validate`` replays closure-derived clauses."""
    diag = Diagnostics()
    result = intersect(per_label)
    added = apply_masks(per_label, result, widths, canonical_bit)
    closed = compose(closure(result.merged, diag, validate))
    per_signal: dict[str, list[EqualityClassProperty]] = {c.name: [] for c in candidates}
    for p in closed:
        s = p.precondition.signal
        if s in per_signal:
            per_signal[s].append(p)
    split = split_globals(per_signal, diag, validate)
    logger.info(
        "postprocess: %d merged points, %d composed, %d global, %d distinguishing signals",
        len(result.merged), len(closed), len(split.globals), len(split.distinguishing),
    )
    return Specification(result, closed, split, diag, added)
