"""Preconditions over a single control signal, and observation slicing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional

from .errors import ParseError
from .signal_space import CandidateSignal
from .trace_model import Trace, TraceSet, Value, orig_name

PSEUDO_INSN = "*"

ORIG_VAL = "orig_val"   # orig(s) == v
POST_VAL = "post_val"   # s == v
SAME = "same"           # s == orig(s)
DIFF = "diff"           # s != orig(s)


@dataclass(frozen=True, order=True)
class PreClause:
    kind: str
    signal: str
    value: int = 0

    def holds(self, pre: Value, post: Value) -> bool:
        """Both values must be known; callers filter invalid ones first."""
        if self.kind == ORIG_VAL:
            return pre == self.value
        if self.kind == POST_VAL:
            return post == self.value
        if self.kind == SAME:
            return pre == post
        return pre != post

    def __str__(self) -> str:
        s = self.signal
        if self.kind == ORIG_VAL:
            return f"{orig_name(s)}=={self.value}"
        if self.kind == POST_VAL:
            return f"{s}=={self.value}"
        if self.kind == SAME:
            return f"{s}=={orig_name(s)}"
        return f"not({s}=={orig_name(s)})"


_PRE_PATTERNS = (
    (re.compile(r"^orig\((\w+)\)==(\d+)$"), ORIG_VAL),
    (re.compile(r"^not\((\w+)==orig\(\1\)\)$"), DIFF),
    (re.compile(r"^(\w+)!=orig\(\1\)$"), DIFF),
    (re.compile(r"^(\w+)==orig\(\1\)$"), SAME),
    (re.compile(r"^(\w+)==(\d+)$"), POST_VAL),
)


def parse_pre_clause(text: str) -> PreClause:
    text = text.replace(" ", "")
    for pat, kind in _PRE_PATTERNS:
        m = pat.match(text)
        if m:
            value = int(m.group(2)) if kind in (ORIG_VAL, POST_VAL) else 0
            return PreClause(kind, m.group(1), value)
    raise ParseError(f"bad precondition clause {text!r}")


@dataclass(frozen=True)
class Precondition:
    instruction: Optional[str] = None
    clauses: tuple[PreClause, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(sorted(self.clauses)))
        sigs = {c.signal for c in self.clauses}
        if len(sigs) > 1:
            raise ValueError(f"precondition mixes control signals {sorted(sigs)}")
        kinds = [c.kind for c in self.clauses]
        if SAME in kinds and DIFF in kinds:
            raise ValueError("contradictory precondition: same and diff")
        for k in (ORIG_VAL, POST_VAL):
            if len({c.value for c in self.clauses if c.kind == k}) > 1:
                raise ValueError("contradictory precondition values")

    def sort_key(self) -> tuple:
        return (self.instruction or "", tuple((c.signal, c.kind, c.value) for c in self.clauses))

    @property
    def signal(self) -> Optional[str]:
        return self.clauses[0].signal if self.clauses else None

    def matches_insn(self, mnemonic: str) -> bool:
        return self.instruction in (None, PSEUDO_INSN) or self.instruction == mnemonic

    def with_instruction(self, insn: Optional[str]) -> "Precondition":
        return Precondition(insn, self.clauses)

    def without_signal(self) -> "Precondition":
        return Precondition(self.instruction, ())

    def admits(self, mnemonic: str, pre: Mapping[str, Value], post: Mapping[str, Value]) -> bool:
        if not self.matches_insn(mnemonic):
            return False
        for c in self.clauses:
            a, b = pre.get(c.signal), post.get(c.signal)
            if a is None or b is None:
                return False
            if not c.holds(a, b):
                return False
        return True

    @property
    def condition_text(self) -> str:
        return " and ".join(str(c) for c in self.clauses)

    def __str__(self) -> str:
        parts = [self.instruction] if self.instruction else []
        parts += [str(c) for c in self.clauses]
        return " & ".join(parts) or "true"


def parse_precondition(text: str) -> Precondition:
    """Parse ``insn & clause & ...``; ``*`` is the pseudo-instruction."""
    parts = [p.strip() for p in text.split("&") if p.strip()]
    if parts == ["true"]:
        return Precondition()
    insn = None
    if parts and re.fullmatch(r"[A-Za-z_][\w.]*|\*", parts[0]):
        insn = parts.pop(0)
    return Precondition(insn, tuple(parse_pre_clause(p) for p in parts))


def make_partitions(sig: CandidateSignal) -> list[Precondition]:
    """Four before/after value combinations for a 1-bit signal, else same/changed."""
    s = sig.name
    if sig.one_bit:
        return [
            Precondition(None, (PreClause(ORIG_VAL, s, a), PreClause(POST_VAL, s, b)))
            for a in (0, 1)
            for b in (0, 1)
        ]
    return [Precondition(None, (PreClause(SAME, s),)), Precondition(None, (PreClause(DIFF, s),))]


@dataclass(frozen=True)
class Observation:
    pre_values: Mapping[str, Value]
    post_values: Mapping[str, Value]
    instruction: str
    trace_index: int = 0
    event_index: int = 0


def observations(trace: Trace, trace_index: int = 0) -> Iterator[Observation]:
    """Consecutive event pairs; event 0 has no predecessor and yields nothing."""
    events = trace.events
    for i in range(1, len(events)):
        yield Observation(events[i - 1].valuation, events[i].valuation, events[i].instruction, trace_index, i)


def slice_observations(obs: Iterable[Observation], insn: str, pc: Precondition) -> list[Observation]:
    pc = pc.with_instruction(insn)
    return [o for o in obs if pc.admits(o.instruction, o.pre_values, o.post_values)]


def slice(ts: TraceSet, insn: str, pc: Precondition) -> dict[str, list[Observation]]:  # noqa: A001
    """Observations of ``insn`` (or of everything, for ``*``) admitted by ``pc``, per label."""
    out: dict[str, list[Observation]] = {label: [] for label in ts.labels}
    for ti, trace in enumerate(ts.traces):
        out[trace.origin_label].extend(slice_observations(observations(trace, ti), insn, pc))
    return out
