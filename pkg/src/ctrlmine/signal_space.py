"""Register layout, signal expansion and control-signal discovery.

The configuration is line oriented::

    REG   <name> <width>
    CAT   <category> <reg>[,<reg>...]
    CTRLCAT <category>
    FIELD <name> <reg> <lo>:<hi>      # lo == hi declares a single bit
    DPL   <segreg> <lo>:<hi>          # derives <segreg>_DPL
    DELTA <signal>[,<signal>...]      # optional; default is every 1-bit signal
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

from .errors import ConfigError, ParseError, UnknownSignalError
from .trace_model import (
    SignalId,
    SignalKind,
    Trace,
    TraceSet,
    compute_derived,
    is_orig,
    strip_orig,
)

logger = logging.getLogger(__name__)

SPACE_DIRECTIVES = ("REG", "CAT", "CTRLCAT", "FIELD", "DPL", "DELTA")


@dataclass(frozen=True)
class FieldRule:
    name: str
    register: str
    lo: int
    hi: int


@dataclass(frozen=True)
class SignalSpace:
    registers: tuple[tuple[str, int], ...]
    categories: tuple[tuple[str, tuple[str, ...]], ...] = ()
    control_categories: tuple[str, ...] = ()
    fields: tuple[FieldRule, ...] = ()
    dpl_rules: tuple[tuple[str, int, int], ...] = ()
    deltas: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        widths = {}
        for name, width in self.registers:
            if name in widths:
                raise ConfigError(f"register {name} declared twice")
            if width < 1:
                raise ConfigError(f"register {name} has width {width}")
            widths[name] = width
        cats = dict(self.categories)
        for cat, regs in self.categories:
            for r in regs:
                if r not in widths:
                    raise ConfigError(f"category {cat} names unknown register {r}")
        for cat in self.control_categories:
            if cat not in cats:
                raise ConfigError(f"control category {cat} is not a declared category")
        for f in self.fields:
            self._check_slice(f.name, f.register, f.lo, f.hi, widths)
        for seg, lo, hi in self.dpl_rules:
            self._check_slice(f"{seg}_DPL", seg, lo, hi, widths)
        names = list(widths) + [f.name for f in self.fields] + [f"{s}_DPL" for s, _, _ in self.dpl_rules]
        if len(set(names)) != len(names):
            raise ConfigError("signal names must be unique")
        for d in self.deltas or ():
            if d not in names:
                raise ConfigError(f"DELTA names unknown signal {d}")

    @staticmethod
    def _check_slice(name, reg, lo, hi, widths):
        if reg not in widths:
            raise ConfigError(f"{name}: unknown register {reg}")
        if not 0 <= lo <= hi < widths[reg]:
            raise ConfigError(f"{name}: slice {lo}:{hi} outside {reg} (width {widths[reg]})")
        if widths[reg] > 64:
            raise ConfigError(f"{name}: cannot slice wide register {reg}")

    # -- lookup ---------------------------------------------------------------

    @cached_property
    def register_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.registers)

    @cached_property
    def _signals(self) -> dict[str, SignalId]:
        sigs: dict[str, SignalId] = {n: SignalId(n) for n in self.register_names}
        for f in self.fields:
            kind = SignalKind.BIT if f.lo == f.hi else SignalKind.FIELD
            sigs[f.name] = SignalId(f.name, kind, sigs[f.register], (f.lo, f.hi))
        for seg, lo, hi in self.dpl_rules:
            name = f"{seg}_DPL"
            sigs[name] = SignalId(name, SignalKind.DERIVED, sigs[seg], (lo, hi))
        for target in self.delta_targets:
            name = f"D_{target}"
            if name in sigs:
                raise ConfigError(f"delta name {name} collides with a declared signal")
            sigs[name] = SignalId(name, SignalKind.DELTA, sigs[target])
        return sigs

    @cached_property
    def _widths(self) -> dict[str, int]:
        widths = dict(self.registers)
        for f in self.fields:
            widths[f.name] = f.hi - f.lo + 1
        for seg, lo, hi in self.dpl_rules:
            widths[f"{seg}_DPL"] = hi - lo + 1
        for target in self.delta_targets:
            w = widths[target]
            widths[f"D_{target}"] = 2 if w == 1 else w
        return widths

    @cached_property
    def delta_targets(self) -> tuple[str, ...]:
        if self.deltas is not None:
            return self.deltas
        one_bit = [n for n, w in self.registers if w == 1]
        one_bit += [f.name for f in self.fields if f.lo == f.hi]
        one_bit += [f"{s}_DPL" for s, lo, hi in self.dpl_rules if lo == hi]
        return tuple(one_bit)

    @cached_property
    def category_map(self) -> dict[str, tuple[str, ...]]:
        return dict(self.categories)

    def signal(self, name: str) -> SignalId:
        if is_orig(name):
            return self.signal(strip_orig(name)).orig()
        try:
            return self._signals[name]
        except KeyError:
            raise UnknownSignalError(f"unknown signal {name!r}") from None

    def width(self, name: str) -> int:
        try:
            return self._widths[strip_orig(name)]
        except KeyError:
            raise UnknownSignalError(f"unknown signal {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return strip_orig(name) in self._signals

    def all_signals(self) -> list[SignalId]:
        return list(self._signals.values())

    @cached_property
    def signal_names(self) -> tuple[str, ...]:
        """Every non-orig signal, name-sorted."""
        return tuple(sorted(self._signals))

    def slice_signals(self) -> list[SignalId]:
        return [s for s in self._signals.values() if s.kind in (SignalKind.BIT, SignalKind.FIELD, SignalKind.DERIVED)]

    def delta_signals(self) -> list[SignalId]:
        return [s for s in self._signals.values() if s.kind is SignalKind.DELTA]

    def field_signals(self) -> list[SignalId]:
        """Registers plus their slices: the universe scanned for unused fields."""
        return [s for s in self._signals.values() if s.kind is not SignalKind.DELTA]

    def control_registers(self) -> list[str]:
        regs: list[str] = []
        for cat in self.control_categories:
            for r in self.category_map[cat]:
                if r not in regs:
                    regs.append(r)
        return regs

    # -- serialisation --------------------------------------------------------

    def to_config(self) -> str:
        lines = [f"REG {n} {w}" for n, w in self.registers]
        lines += [f"CAT {c} {','.join(regs)}" for c, regs in self.categories]
        lines += [f"CTRLCAT {c}" for c in self.control_categories]
        lines += [f"FIELD {f.name} {f.register} {f.lo}:{f.hi}" for f in self.fields]
        lines += [f"DPL {s} {lo}:{hi}" for s, lo, hi in self.dpl_rules]
        if self.deltas is not None:
            lines.append(f"DELTA {','.join(self.deltas)}")
        return "\n".join(lines) + "\n"


def _range(text: str, lineno: int) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise ParseError(f"bad bit range {text!r}", lineno) from None
    return lo, hi


def parse_space(text: str, *, ignore_unknown: Iterable[str] = ()) -> SignalSpace:
    """Parse a signal-space configuration.

    Directives listed in ``ignore_unknown`` are skipped, which lets richer
    files (ISA definitions) embed a signal space.
    """
    skip = set(ignore_unknown)
    regs: list[tuple[str, int]] = []
    cats: list[tuple[str, tuple[str, ...]]] = []
    ctrl: list[str] = []
    fields: list[FieldRule] = []
    dpls: list[tuple[str, int, int]] = []
    deltas: Optional[list[str]] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0], parts[1:]
        try:
            if op == "REG" and len(args) == 2:
                regs.append((args[0], int(args[1])))
            elif op == "CAT" and len(args) == 2:
                cats.append((args[0], tuple(args[1].split(","))))
            elif op == "CTRLCAT" and len(args) == 1:
                ctrl.append(args[0])
            elif op == "FIELD" and len(args) == 3:
                lo, hi = _range(args[2], lineno)
                fields.append(FieldRule(args[0], args[1], lo, hi))
            elif op == "DPL" and len(args) == 2:
                lo, hi = _range(args[1], lineno)
                dpls.append((args[0], lo, hi))
            elif op == "DELTA" and len(args) == 1:
                deltas = (deltas or []) + args[0].split(",")
            elif op in skip:
                continue
            else:
                raise ParseError(f"unrecognised directive {line!r}", lineno)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return SignalSpace(
        tuple(regs), tuple(cats), tuple(ctrl), tuple(fields), tuple(dpls),
        tuple(deltas) if deltas is not None else None,
    )


# -- operations -------------------------------------------------------------------


def unpack(trace: Trace, space: SignalSpace) -> Trace:
    """Add every bit, field, DPL and delta signal to each event of ``trace``."""
    out = []
    prev = None
    for ev in trace.events:
        out.append(compute_derived(ev, prev, space))
        prev = ev
    return Trace(tuple(out), trace.origin_label)


def unpack_set(ts: TraceSet) -> TraceSet:
    return TraceSet(tuple(unpack(t, ts.signal_space) for t in ts.traces), ts.signal_space)


@dataclass(frozen=True, order=True)
class CandidateSignal:
    name: str
    width: int
    is_register: bool = False

    @property
    def one_bit(self) -> bool:
        return self.width == 1

    @property
    def partition_count(self) -> int:
        return 4 if self.one_bit else 2


def find_constant_fields(ts: TraceSet) -> frozenset[SignalId]:
    """Registers and slices that never take two distinct known values.

    Instructions are ignored entirely (every event belongs to one
    pseudo-instruction). A signal that is invalid everywhere counts as
    constant: it can support no property.
    """
    space = ts.signal_space
    live: set[str] = set()
    first: dict[str, object] = {}
    names = [s.name for s in space.field_signals()]
    for trace in ts.traces:
        for ev in trace.events:
            val = ev.valuation
            for name in names:
                if name in live:
                    continue
                v = val.get(name)
                if v is None:
                    continue
                seen = first.setdefault(name, v)
                if seen != v:
                    live.add(name)
            if len(live) == len(names):
                break
    return frozenset(space.signal(n) for n in names if n not in live)


def control_candidates(space: SignalSpace) -> list[CandidateSignal]:
    """Every 1-bit, 2-bit and whole-register signal of the control categories."""
    regs = space.control_registers()
    out = []
    for name in regs:
        w = space.width(name)
        out.append(CandidateSignal(name, w, is_register=w > 2))
    for sig in space.slice_signals():
        if sig.parent.name in regs and sig.slice_width in (1, 2):
            out.append(CandidateSignal(sig.name, sig.slice_width))
    return sorted(out)


def discover_candidates(ts: TraceSet) -> list[CandidateSignal]:
    dead = {s.name for s in find_constant_fields(ts)}
    found = [c for c in control_candidates(ts.signal_space) if c.name not in dead]
    logger.info("discovered %d candidate control signals (%d dead fields)", len(found), len(dead))
    return found


def format_candidates(cands: Iterable[CandidateSignal]) -> str:
    return "".join(f"{c.name} {c.width}{' register' if c.is_register else ''}\n" for c in cands)


def parse_candidates(text: str) -> list[CandidateSignal]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            out.append(CandidateSignal(parts[0], int(parts[1]), len(parts) > 2 and parts[2] == "register"))
        except (IndexError, ValueError):
            raise ParseError(f"bad candidate line {line!r}", lineno) from None
    return out
