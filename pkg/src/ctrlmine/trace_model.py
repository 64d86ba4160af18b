"""Signals, valuations, events and traces.

A signal value is one of three things:

* ``int`` -- a known value of at most 64 bits,
* ``bytes`` -- a known value of a register wider than 64 bits (only ever
  compared for equality),
* ``None`` -- invalid, i.e. the value is not known at this event.

Events key their valuation by signal *name*; names are unique within a
:class:`~ctrlmine.signal_space.SignalSpace` so this is equivalent to keying
by :class:`SignalId`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Optional, Union

from .errors import ParseError, UnknownSignalError

if TYPE_CHECKING:
    from .signal_space import SignalSpace

Value = Union[int, bytes, None]
INVALID: Value = None

ARCHIVE_FORMAT = "ctrlmine-archive/1"


class SignalKind(str, Enum):
    REGISTER = "register"
    BIT = "bit"
    FIELD = "field"
    DERIVED = "derived"
    DELTA = "delta"
    ORIG = "orig"


@dataclass(frozen=True)
class SignalId:
    name: str
    kind: SignalKind = SignalKind.REGISTER
    parent: Optional["SignalId"] = None
    bit_range: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("signal name must be non-empty")
        if self.bit_range is not None:
            lo, hi = self.bit_range
            if not 0 <= lo <= hi:
                raise ValueError(f"{self.name}: bad bit range {self.bit_range}")
        if self.kind is SignalKind.REGISTER:
            if self.parent is not None or self.bit_range is not None:
                raise ValueError(f"register {self.name} cannot have a parent or range")
            return
        if self.parent is None:
            raise ValueError(f"{self.kind.value} signal {self.name} needs a parent")
        if self.kind is SignalKind.BIT and self.slice_width != 1:
            raise ValueError(f"bit signal {self.name} must be one bit wide")
        if self.kind is SignalKind.FIELD and (self.slice_width or 0) < 2:
            raise ValueError(f"field signal {self.name} must be at least two bits wide")
        if self.kind in (SignalKind.ORIG, SignalKind.DELTA) and self.parent.kind in (
            SignalKind.ORIG,
            SignalKind.DELTA,
        ):
            raise ValueError(f"{self.name}: orig/delta cannot wrap another orig/delta")

    @property
    def slice_width(self) -> Optional[int]:
        if self.bit_range is None:
            return None
        return self.bit_range[1] - self.bit_range[0] + 1

    def orig(self) -> "SignalId":
        return SignalId(orig_name(self.name), SignalKind.ORIG, parent=self)

    def __str__(self) -> str:
        return self.name


def orig_name(name: str) -> str:
    return f"orig({name})"


def strip_orig(name: str) -> str:
    """``orig(X)`` -> ``X``; any other name is returned unchanged."""
    if name.startswith("orig(") and name.endswith(")"):
        return name[5:-1]
    return name


def is_orig(name: str) -> bool:
    return name.startswith("orig(") and name.endswith(")")


def root_signal(name: str) -> str:
    """Resolve ``orig(D_X)``, ``D_X`` and ``orig(X)`` all to ``X``."""
    name = strip_orig(name)
    if name.startswith("D_"):
        name = name[2:]
    return name


def fits(value: Value, width: int) -> bool:
    if value is None:
        return True
    if isinstance(value, bytes):
        return len(value) <= (width + 7) // 8
    return 0 <= value < (1 << width)


@dataclass(frozen=True)
class TraceEvent:
    instruction: str
    valuation: Mapping[str, Value]
    index: int = 0

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("instruction mnemonic must be non-empty")
        if self.index < 0:
            raise ValueError("event index must be >= 0")


@dataclass(frozen=True)
class Trace:
    events: tuple[TraceEvent, ...]
    origin_label: str = "baremetal"

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        for i, ev in enumerate(self.events):
            if ev.index != i:
                raise ValueError(f"event {i} carries index {ev.index}")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)


@dataclass(frozen=True)
class TraceSet:
    traces: tuple[Trace, ...]
    signal_space: "SignalSpace"
    labels: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        seen: list[str] = []
        for t in self.traces:
            if t.origin_label not in seen:
                seen.append(t.origin_label)
        object.__setattr__(self, "labels", tuple(seen))

    def by_label(self, label: str) -> list[Trace]:
        return [t for t in self.traces if t.origin_label == label]

    @property
    def event_count(self) -> int:
        return sum(len(t) for t in self.traces)


def _extract(value: Value, lo: int, hi: int) -> Value:
    if value is None:
        return None
    if isinstance(value, bytes):
        value = int.from_bytes(value, "big")
    return (value >> lo) & ((1 << (hi - lo + 1)) - 1)


def value_of(event: TraceEvent, sig: SignalId, prev: Optional[TraceEvent] = None) -> Value:
    """Value of ``sig`` at ``event``.

    Bit, field and derived signals not already present in the valuation are
    sliced out of their parent register. ``orig`` signals need ``prev``; at
    the first event of a trace they are invalid.
    """
    if sig.kind is SignalKind.ORIG:
        if prev is None:
            return None
        return value_of(prev, sig.parent)
    if sig.name in event.valuation:
        return event.valuation[sig.name]
    if sig.kind in (SignalKind.BIT, SignalKind.FIELD, SignalKind.DERIVED) and sig.bit_range:
        parent = value_of(event, sig.parent)
        return _extract(parent, *sig.bit_range)
    raise UnknownSignalError(f"signal {sig.name!r} not present in event {event.index}")


def compute_derived(event: TraceEvent, prev: Optional[TraceEvent], space: "SignalSpace") -> TraceEvent:
    """Return ``event`` augmented with every bit, field, DPL and delta signal.

    Everything is recomputed from the base registers, so applying this to an
    already-derived event is a no-op.
    """
    vals = {name: event.valuation[name] for name in space.register_names if name in event.valuation}
    for sig in space.slice_signals():
        vals[sig.name] = _extract(vals.get(sig.parent.name), *sig.bit_range)
    for sig in space.delta_signals():
        target = sig.parent
        cur = value_of(event, target) if _resolvable(event, target) else None
        before = value_of(prev, target) if prev is not None and _resolvable(prev, target) else None
        vals[sig.name] = _delta(cur, before, space.width(target.name))
    return TraceEvent(event.instruction, vals, event.index)


def _resolvable(event: TraceEvent, sig: SignalId) -> bool:
    if sig.name in event.valuation:
        return True
    return sig.parent is not None and sig.parent.name in event.valuation


def _delta(cur: Value, before: Value, width: int) -> Value:
    if cur is None or before is None or isinstance(cur, bytes) or isinstance(before, bytes):
        return None
    if width == 1:
        return cur - before + 1
    return (cur - before) % (1 << width)


# -- archive (de)serialisation -------------------------------------------------


def encode_value(value: Value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bytes):
        return "#" + value.hex()
    return format(value, "x")


def decode_value(text: Optional[str]) -> Value:
    if text is None:
        return None
    if text.startswith("#"):
        return bytes.fromhex(text[1:])
    return int(text, 16)


def trace_to_json(trace: Trace) -> dict:
    names: list[str] = list(trace.events[0].valuation) if trace.events else []
    rows = []
    for ev in trace.events:
        if len(ev.valuation) != len(names) or any(n not in ev.valuation for n in names):
            raise ValueError(f"event {ev.index} has a different signal set than event 0")
        rows.append([ev.instruction, [encode_value(ev.valuation[n]) for n in names]])
    return {"label": trace.origin_label, "signals": names, "events": rows}


def trace_from_json(obj: Mapping) -> Trace:
    names = obj["signals"]
    events = []
    for i, (insn, vals) in enumerate(obj["events"]):
        if len(vals) != len(names):
            raise ParseError(f"event {i} has {len(vals)} values, expected {len(names)}")
        events.append(TraceEvent(insn, dict(zip(names, map(decode_value, vals))), i))
    return Trace(tuple(events), obj["label"])


def dumps_archive(ts: TraceSet) -> str:
    doc = {
        "format": ARCHIVE_FORMAT,
        "space": ts.signal_space.to_config(),
        "traces": [trace_to_json(t) for t in ts.traces],
    }
    return json.dumps(doc, separators=(",", ":"))


def loads_archive(text: str) -> TraceSet:
    from .signal_space import parse_space

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"archive is not valid JSON: {exc.msg}", exc.lineno) from exc
    if doc.get("format") != ARCHIVE_FORMAT:
        raise ParseError(f"unsupported archive format {doc.get('format')!r}")
    space = parse_space(doc["space"])
    return TraceSet(tuple(trace_from_json(t) for t in doc["traces"]), space)


def merge_trace_sets(sets: Iterable[TraceSet]) -> TraceSet:
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to merge")
    space = sets[0].signal_space
    for s in sets[1:]:
        if s.signal_space.to_config() != space.to_config():
            raise ValueError("trace sets use different signal spaces")
    return TraceSet(tuple(t for s in sets for t in s.traces), space)
