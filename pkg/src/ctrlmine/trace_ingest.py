"""Translation-block trace logs and their per-instruction extension.

Canonical ``.atrc`` format (UTF-8, line oriented)::

    SIGNALS EAX 32 CS 16 ...
    TB
    I ljmpw ea
    S EAX=0 CS=8 ...

Blank lines and ``#`` comments are ignored; hex values are lowercase and
unprefixed. Registers wider than 64 bits are held as ``bytes``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .errors import ConfigError, ExtensionError, ParseError
from .signal_space import SignalSpace
from .trace_model import Trace, TraceEvent, Value, fits

MODIFIES_ALL = "modifies_all"
MODIFIES_NONE = "modifies_none"


@dataclass(frozen=True)
class TbEvent:
    instructions: tuple[tuple[str, bytes], ...]
    end_state: Mapping[str, Value]

    def __post_init__(self):
        if not self.instructions:
            raise ValueError("a translation block needs at least one instruction")


@dataclass(frozen=True)
class EffectsTable:
    entries: Mapping[str, frozenset[str]] = field(default_factory=dict)
    default_policy: str = MODIFIES_ALL
    far_rules: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        if self.default_policy not in (MODIFIES_ALL, MODIFIES_NONE):
            raise ConfigError(f"unknown default policy {self.default_policy!r}")

    def modified(self, mnemonic: str, registers: Iterable[str]) -> frozenset[str]:
        if mnemonic in self.entries:
            return self.entries[mnemonic]
        if self.default_policy == MODIFIES_ALL:
            return frozenset(registers)
        return frozenset()

    def validate(self, space: SignalSpace) -> None:
        regs = set(space.register_names)
        for mnem, mods in self.entries.items():
            unknown = mods - regs
            if unknown:
                raise ConfigError(f"EFFECT {mnem} names unknown registers {sorted(unknown)}")

    def to_text(self) -> str:
        lines = [f"DEFAULT {self.default_policy}"]
        for mnem in sorted(self.entries):
            regs = ",".join(sorted(self.entries[mnem])) or "-"
            lines.append(f"EFFECT {mnem} {regs}")
        lines += [f"FAR {m} {op} {cls}" for m, op, cls in self.far_rules]
        return "\n".join(lines) + "\n"


# Opcode prefixes used when an effects file declares no FAR lines.
DEFAULT_FAR_RULES: tuple[tuple[str, str, str], ...] = (
    ("jmp", "ea", "far"),
    ("jmp", "ff", "far"),
    ("jmp", "e9", "near"),
    ("jmp", "eb", "near"),
    ("call", "9a", "far"),
    ("call", "e8", "near"),
    ("ret", "ca", "far"),
    ("ret", "cb", "far"),
    ("ret", "c3", "near"),
)


def parse_effects(text: str) -> EffectsTable:
    """Parse ``EFFECT``/``DEFAULT``/``FAR`` lines."""
    entries: dict[str, frozenset[str]] = {}
    policy = MODIFIES_ALL
    far: list[tuple[str, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "EFFECT" and len(parts) in (2, 3):
            regs = parts[2] if len(parts) == 3 else "-"
            entries[parts[1]] = frozenset() if regs == "-" else frozenset(regs.split(","))
        elif parts[0] == "DEFAULT" and len(parts) == 2:
            policy = parts[1]
            if policy not in (MODIFIES_ALL, MODIFIES_NONE):
                raise ParseError(f"unknown default policy {policy!r}", lineno)
        elif parts[0] == "FAR" and len(parts) == 4 and parts[3] in ("near", "far"):
            far.append((parts[1], parts[2].lower(), parts[3]))
        else:
            raise ParseError(f"unrecognised effects line {line!r}", lineno)
    return EffectsTable(entries, policy, tuple(far))


def classify_far_transfer(
    mnemonic: str, opcode: bytes, rules: Optional[Iterable[tuple[str, str, str]]] = None
) -> str:
    """Append ``_far`` to jump/call-like mnemonics whose opcode is a far form."""
    rules = DEFAULT_FAR_RULES if rules is None else tuple(rules)
    hexop = opcode.hex()
    for mnem, prefix, cls in rules:
        if mnem == mnemonic and hexop.startswith(prefix):
            return mnemonic + "_far" if cls == "far" else mnemonic
    return mnemonic


def _parse_value(text: str, width: int, lineno: int) -> int | bytes:
    if not text or text != text.lower():
        raise ParseError(f"hex value {text!r} must be lowercase", lineno)
    try:
        if width > 64:
            digits = (width + 3) // 4
            padded = text.rjust(digits + (digits % 2), "0")
            value: int | bytes = bytes.fromhex(padded)
        else:
            value = int(text, 16)
    except ValueError:
        raise ParseError(f"non-hex value {text!r}", lineno) from None
    if not fits(value, width):
        raise ParseError(f"value {text} does not fit in {width} bits", lineno)
    return value


def parse_trace(text: str, space: SignalSpace) -> list[TbEvent]:
    """Parse ``.atrc`` text into translation blocks, in file order."""
    header: Optional[list[tuple[str, int]]] = None
    tbs: list[TbEvent] = []
    insns: Optional[list[tuple[str, bytes]]] = None
    tb_line = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if header is None:
            if tag != "SIGNALS" or len(parts) % 2 != 1 or len(parts) < 3:
                raise ParseError("malformed SIGNALS header", lineno)
            header = []
            for name, width in zip(parts[1::2], parts[2::2]):
                if name not in space.register_names:
                    raise ParseError(f"unknown register {name!r}", lineno)
                try:
                    w = int(width)
                except ValueError:
                    raise ParseError(f"bad width {width!r}", lineno) from None
                if w != space.width(name):
                    raise ParseError(f"{name} declared {w} bits, signal space says {space.width(name)}", lineno)
                header.append((name, w))
            continue
        if tag == "TB" and len(parts) == 1:
            if insns is not None:
                raise ParseError("TB without a state line", tb_line)
            insns, tb_line = [], lineno
        elif tag == "I" and len(parts) == 3:
            if insns is None:
                raise ParseError("instruction outside a TB", lineno)
            try:
                insns.append((parts[1], bytes.fromhex(parts[2])))
            except ValueError:
                raise ParseError(f"non-hex opcode {parts[2]!r}", lineno) from None
        elif tag == "S":
            if insns is None:
                raise ParseError("state line outside a TB", lineno)
            if not insns:
                raise ParseError("TB with zero instructions", tb_line)
            widths = dict(header)
            state: dict[str, Value] = {}
            for item in parts[1:]:
                name, sep, val = item.partition("=")
                if not sep:
                    raise ParseError(f"bad state item {item!r}", lineno)
                if name not in widths:
                    raise ParseError(f"unknown register {name!r}", lineno)
                state[name] = _parse_value(val, widths[name], lineno)
            missing = [n for n in widths if n not in state]
            if missing:
                raise ParseError(f"state line missing {missing}", lineno)
            tbs.append(TbEvent(tuple(insns), {n: state[n] for n, _ in header}))
            insns = None
        else:
            raise ParseError(f"unrecognised line {line!r}", lineno)
    if insns is not None:
        raise ParseError("trailing TB without a state line", tb_line)
    return tbs


def format_trace(header: Iterable[tuple[str, int]], tbs: Iterable[TbEvent]) -> str:
    header = list(header)
    out = ["SIGNALS " + " ".join(f"{n} {w}" for n, w in header)]
    for tb in tbs:
        out.append("TB")
        out += [f"I {m} {op.hex()}" for m, op in tb.instructions]
        items = []
        for n, _ in header:
            v = tb.end_state[n]
            items.append(f"{n}={v.hex() if isinstance(v, bytes) else format(v, 'x')}")
        out.append("S " + " ".join(items))
    return "\n".join(out) + "\n"


def extend_trace(
    tbs: Iterable[TbEvent],
    effects: EffectsTable,
    space: SignalSpace,
    label: str = "baremetal",
) -> Trace:
    """Expand translation blocks into one event per instruction.

    Inside a block, a register the instruction may modify becomes invalid and
    every other register keeps the value of the previous emitted event. The
    last instruction of a block carries the logged end state.
    """
    regs = space.register_names
    far_rules = effects.far_rules or DEFAULT_FAR_RULES
    events: list[TraceEvent] = []
    carried: dict[str, Value] = {r: None for r in regs}
    for n, tb in enumerate(tbs):
        missing = [r for r in regs if r not in tb.end_state]
        if missing:
            raise ExtensionError(f"TB {n} end state lacks {missing}")
        last = len(tb.instructions) - 1
        for k, (mnem, opcode) in enumerate(tb.instructions):
            mnem = classify_far_transfer(mnem, opcode, far_rules)
            if k == last:
                carried = {r: tb.end_state[r] for r in regs}
            else:
                mods = effects.modified(mnem, regs)
                carried = {r: (None if r in mods else carried[r]) for r in regs}
            events.append(TraceEvent(mnem, carried, len(events)))
    if not events:
        raise ExtensionError("cannot extend an empty TB sequence")
    return Trace(tuple(events), label)
