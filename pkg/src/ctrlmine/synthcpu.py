"""Deterministic mock-CPU trace generator with seeded security rules.

An ISA file is a signal-space configuration plus these lines::

    MODEL   <model>                            # behaviour implementation
    INSN    <mnem> <opcode-hex> <regs|-> [transfer]
    RULE    <id> breakable|fixed <precondition> => <clause> [; <clause>...]
    PROFILE <name> [key=value ...]

Instruction semantics live in Python (one class per model); the file pins
down the register layout, the declared effects, the expected properties and
the per-profile quirks. Mnemonics ending in ``_far`` are written to the log
under their base name and recovered from the opcode on ingestion.
"""

from __future__ import annotations

import dataclasses
import logging
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional

from .clauses import Clause, parse_clause
from .errors import ConfigError, ParseError
from .invariant_engine import Property
from .partition import Precondition, parse_precondition
from .signal_space import SignalSpace, parse_space
from .trace_ingest import EffectsTable, TbEvent, format_trace
from .trace_model import Value

logger = logging.getLogger(__name__)

ISA_DIRECTIVES = ("MODEL", "INSN", "RULE", "PROFILE")

BUG_PERIOD = 120  # events between forced violations; the forcing path takes at most 3 steps


@dataclass(frozen=True)
class InsnDef:
    mnemonic: str
    opcode: bytes
    effects: frozenset[str]
    transfer: bool = False

    @property
    def log_name(self) -> str:
        return self.mnemonic[:-4] if self.mnemonic.endswith("_far") else self.mnemonic


@dataclass(frozen=True)
class GroundTruthRule:
    id: str
    precondition: Precondition
    clauses: tuple[Clause, ...]
    breakable: bool

    def as_property(self) -> Property:
        return Property(self.precondition, self.clauses)

    def __str__(self) -> str:
        return f"{self.id}: {self.precondition} => {' ; '.join(map(str, self.clauses))}"


@dataclass(frozen=True)
class MockIsa:
    model: str
    space: SignalSpace
    instructions: tuple[InsnDef, ...]
    rules: tuple[GroundTruthRule, ...] = ()
    profiles: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    bugs: frozenset[str] = frozenset()

    def __post_init__(self):
        regs = set(self.space.register_names)
        mnems = {i.mnemonic for i in self.instructions}
        for insn in self.instructions:
            if insn.effects - regs:
                raise ConfigError(f"INSN {insn.mnemonic} names unknown registers {sorted(insn.effects - regs)}")
        for rule in self.rules:
            insn = rule.precondition.instruction
            if insn not in (None, "*") and insn not in mnems:
                raise ConfigError(f"RULE {rule.id} names unknown instruction {insn}")
            names = [c.signal for c in rule.precondition.clauses]
            names += [v for c in rule.clauses for v in c.variables]
            for n in names:
                if n not in self.space:
                    raise ConfigError(f"RULE {rule.id} names unknown signal {n}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")

    def insn(self, mnemonic: str) -> InsnDef:
        for i in self.instructions:
            if i.mnemonic == mnemonic:
                return i
        raise KeyError(mnemonic)

    def rule(self, rule_id: str) -> GroundTruthRule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise ConfigError(f"unknown rule {rule_id!r}")

    def effects_table(self) -> EffectsTable:
        return EffectsTable({i.mnemonic: i.effects for i in self.instructions})

    def effects_text(self) -> str:
        return self.effects_table().to_text()


def parse_isa(text: str) -> MockIsa:
    space = parse_space(text, ignore_unknown=ISA_DIRECTIVES)
    model = None
    insns: list[InsnDef] = []
    rules: list[GroundTruthRule] = []
    profiles: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if op == "MODEL":
                model = rest
            elif op == "INSN":
                parts = rest.split()
                if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] != "transfer"):
                    raise ParseError(f"bad INSN line {line!r}", lineno)
                effects = frozenset() if parts[2] == "-" else frozenset(parts[2].split(","))
                insns.append(InsnDef(parts[0], bytes.fromhex(parts[1]), effects, len(parts) == 4))
            elif op == "RULE":
                rid, kind, body = rest.split(None, 2)
                if kind not in ("breakable", "fixed"):
                    raise ParseError(f"rule kind must be breakable or fixed, got {kind!r}", lineno)
                pre, arrow, post = body.partition("=>")
                if not arrow:
                    raise ParseError("RULE needs '=>'", lineno)
                clauses = tuple(parse_clause(c) for c in post.split(";") if c.strip())
                rules.append(GroundTruthRule(rid, parse_precondition(pre), clauses, kind == "breakable"))
            elif op == "PROFILE":
                parts = rest.split()
                params = {}
                for item in parts[1:]:
                    k, sep, v = item.partition("=")
                    if not sep:
                        raise ParseError(f"bad profile parameter {item!r}", lineno)
                    params[k] = v
                profiles[parts[0]] = params
        except ParseError as exc:
            if exc.line is None:
                raise ParseError(str(exc), lineno) from None
            raise
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if model is None:
        raise ParseError("ISA file has no MODEL line")
    return MockIsa(model, space, tuple(insns), tuple(rules), profiles)


def load_builtin(name: str = "default") -> MockIsa:
    """Load ``default`` (x86-like) or ``gating`` from the package data."""
    text = resources.files("ctrlmine").joinpath("data").joinpath(f"{name}.isa").read_text()
    return parse_isa(text)


def builtin_text(filename: str) -> str:
    return resources.files("ctrlmine").joinpath("data").joinpath(filename).read_text()


def inject_bug(isa: MockIsa, rule_id: str) -> MockIsa:
    rule = isa.rule(rule_id)
    if not rule.breakable:
        raise ConfigError(f"rule {rule_id!r} is fixed and cannot be broken")
    if rule_id not in MODELS[isa.model].BUGS:
        raise ConfigError(f"model {isa.model!r} has no way to break {rule_id!r}")
    return dataclasses.replace(isa, bugs=isa.bugs | {rule_id})


# -- behaviour models -------------------------------------------------------------


State = dict[str, int]


class X86Lite:
    """Privilege levels, segment selectors, SMM and a syscall path."""

    BUGS = ("smm-no-call", "sysret-canonical", "farjump-dpl")
    # declared fields the model never changes (EFL bit 1 is reserved-set)
    DEAD_FIELDS = ("CR0_2", "CR0_31", "EFL_1", "EFL_17")

    KCS = (0x0008, 0x0010)
    UCS = (0x601B, 0x6023)
    KSS, USS = 0x0018, 0x602B
    KDS, UDS = 0x0020, 0x6033
    SMM_CS = 0x0038

    WEIGHTS = {
        "mov": 10, "addl": 8, "andb": 6, "jmp": 4, "ret": 3, "in": 3, "popf": 3,
        "cli": 2, "sti": 2, "jmp_far": 4, "call": 4, "syscall": 3, "sysret": 3,
        "smi": 1, "rsm": 4, "mov_cr": 2, "mov_dr": 1,
    }

    def __init__(self, profile: Mapping[str, str]):
        self.user = profile.get("user", "1") == "1"
        dr7 = profile.get("dr7", "1024")
        self.dr7 = None if dr7 == "vary" else int(dr7, 0)
        self.sysret_ecx = int(profile.get("sysret_ecx", "0x00007fffc0001000"), 0)
        self.saved: Optional[State] = None

    @staticmethod
    def _efl(bits: Mapping[int, int]) -> int:
        v = 1 << 1  # reserved bit 1 always set, bit 17 never
        for b, on in bits.items():
            if on:
                v |= 1 << b
        return v

    @staticmethod
    def bit(value: int, n: int) -> int:
        return (value >> n) & 1

    def initial(self, rng: random.Random) -> State:
        user = self.user and rng.random() < 0.5
        return {
            "EAX": rng.getrandbits(32),
            "EBX": rng.getrandbits(32),
            "ECX": rng.getrandbits(32) | 0x00005555_00000000,
            "EFL": self._efl({9: 1, 6: rng.getrandbits(1), 13: rng.getrandbits(1)}),
            "CR0": 0x11 | (rng.getrandbits(1) << 1),
            "CR3": rng.getrandbits(20) << 12,
            "DR7": self.dr7 if self.dr7 is not None else 0x400,
            "SMM": 0,
            "CPL": 3 if user else 0,
            "CS": rng.choice(self.UCS if user else self.KCS),
            "SS": self.USS if user else self.KSS,
            "DS": self.UDS if user else self.KDS,
        }

    def allowed(self, st: State) -> list[str]:
        smm, cpl = st["SMM"], st["CPL"]
        out = ["mov", "addl", "andb", "jmp", "ret", "popf"]
        if self.bit(st["EFL"], 13) >= self.bit(st["CS"], 13):
            out.append("in")
        if smm:
            out += ["cli", "rsm"]
            return out
        out += ["jmp_far", "call", "smi"]
        if cpl == 0:
            out += ["cli", "sti", "mov_cr", "mov_dr"]
            if self.user:
                out.append("sysret")
        elif self.user:
            out.append("syscall")
        return out

    def choose(self, st: State, rng: random.Random) -> str:
        opts = self.allowed(st)
        return rng.choices(opts, [self.WEIGHTS[o] for o in opts])[0]

    def force(self, rule_id: str, st: State) -> Optional[str]:
        """Next mnemonic on the path to a violation of ``rule_id``, or None once done."""
        if rule_id == "smm-no-call":
            return "call" if st["SMM"] else "smi"
        if st["SMM"]:
            return "rsm"
        if rule_id == "sysret-canonical":
            if not self.user:
                raise ConfigError("sysret-canonical cannot be broken in a profile without user mode")
            return "sysret" if st["CPL"] == 0 else "syscall"
        return "jmp_far"

    def apply(self, mnem: str, st: State, rng: random.Random, bug: bool) -> State:
        s = dict(st)
        bit = self.bit
        if mnem == "mov":
            s["EAX"] = rng.getrandbits(32)
            if not s["SMM"]:
                s["EBX"] = rng.getrandbits(32)
        elif mnem in ("addl", "andb"):
            res = (s["EAX"] + s["EBX"]) & 0xFFFFFFFF if mnem == "addl" else s["EAX"] & rng.getrandbits(8)
            s["EAX"] = res
            efl = s["EFL"] & ~((1 << 4) | (1 << 6) | (1 << 11))
            efl |= (res == 0) << 6
            if mnem == "addl":
                efl |= (bit(res, 3) << 4) | (bit(res, 31) << 11)
            s["EFL"] = efl
        elif mnem == "in":
            s["EAX"] = rng.getrandbits(8)
        elif mnem == "popf":
            new = {4: rng.getrandbits(1), 6: rng.getrandbits(1), 11: rng.getrandbits(1)}
            kernel = s["CPL"] == 0
            new[9] = rng.getrandbits(1) if kernel and not s["SMM"] else bit(s["EFL"], 9)
            new[13] = rng.getrandbits(1) if kernel else bit(s["EFL"], 13)
            s["EFL"] = self._efl(new)
        elif mnem in ("cli", "sti"):
            s["EFL"] = (s["EFL"] & ~(1 << 9)) | ((mnem == "sti") << 9)
        elif mnem == "jmp_far":
            pair = self.UCS if s["CPL"] == 3 else self.KCS
            s["CS"] = pair[1] if s["CS"] == pair[0] else pair[0]
            s["DS"] = self.UDS if s["CPL"] == 3 else self.KDS
            if bug:
                s["DS"] = self.KDS if s["CPL"] == 3 else self.UDS
        elif mnem == "syscall":
            s.update(CPL=0, CS=self.KCS[0], SS=self.KSS, DS=self.KDS)
            s["ECX"] = 0x00005555_00000000 | rng.getrandbits(32)
        elif mnem == "sysret":
            s.update(CPL=3, CS=self.UCS[0], SS=self.USS, DS=self.UDS)
            s["ECX"] = self.sysret_ecx ^ (1 << 47) if bug else self.sysret_ecx
        elif mnem == "smi":
            self.saved = {k: s[k] for k in ("CPL", "CS", "SS", "DS", "EFL", "CR0", "EBX")}
            s.update(SMM=1, CPL=0, CS=self.SMM_CS, SS=self.KSS, DS=self.KDS, EBX=0x30000)
            s["EFL"] &= ~(1 << 9)
            s["CR0"] &= ~1
        elif mnem == "rsm":
            s.update(self.saved or {})
            s["SMM"] = 0
            self.saved = None
        elif mnem == "mov_cr":
            s["CR3"] = rng.getrandbits(20) << 12
            s["CR0"] = (s["CR0"] & ~2) | (rng.getrandbits(1) << 1)
        elif mnem == "mov_dr":
            s["DR7"] = self.dr7 if self.dr7 is not None else rng.choice((0x400, 0x401, 0x403, 0x40F))
        return s


class Gating:
    """Six control bits; only G1 and G2 change what instructions do."""

    BUGS: tuple[str, ...] = ()
    CONTROL = ("G1", "G2", "N1", "N2", "N3", "N4")
    GATING = ("G1", "G2")
    MAGIC = 0x1234

    def __init__(self, profile: Mapping[str, str]):
        pass

    def initial(self, rng: random.Random) -> State:
        st = {c: rng.getrandbits(1) for c in self.CONTROL}
        st.update(R1=rng.getrandbits(32), R2=rng.getrandbits(32), R3=rng.getrandbits(32))
        return st

    def choose(self, st: State, rng: random.Random) -> str:
        return rng.choices(("set", "op", "wr", "nop"), (3, 3, 3, 1))[0]

    def force(self, rule_id: str, st: State) -> Optional[str]:
        raise ConfigError(f"gating model cannot break {rule_id!r}")

    def apply(self, mnem: str, st: State, rng: random.Random, bug: bool) -> State:
        s = dict(st)
        if mnem == "set":
            s.update({c: rng.getrandbits(1) for c in self.CONTROL})
            s["R1"] = self.MAGIC if s["G1"] else rng.getrandbits(32)
            s["R2"] = rng.getrandbits(32)
            s["R3"] = rng.getrandbits(32)
        elif mnem == "op":
            s["R1"] = self.MAGIC if s["G1"] else rng.getrandbits(32)
            s["R3"] = rng.getrandbits(32)
        elif mnem == "wr":
            s["R1"] = rng.getrandbits(32)
            if not s["G2"]:
                s["R2"] = rng.getrandbits(32)
            s["R3"] = rng.getrandbits(32)
        return s


MODELS = {"x86lite": X86Lite, "gating": Gating}


# -- generation -------------------------------------------------------------------


@dataclass
class GeneratedRun:
    header: tuple[tuple[str, int], ...]
    tbs: list[TbEvent]
    # true architectural state after every instruction, with extended mnemonics
    steps: list[tuple[str, dict[str, Value]]]
    bug_events: list[int]

    def text(self) -> str:
        return format_trace(self.header, self.tbs)


def generate_run(isa: MockIsa, profile: str, seed: int, length: int) -> GeneratedRun:
    if profile not in isa.profiles:
        raise ConfigError(f"unknown profile {profile!r}; have {sorted(isa.profiles)}")
    if length < 2:
        raise ConfigError("length must be at least 2")
    rng = random.Random(f"{isa.model}/{profile}/{seed}")
    model = MODELS[isa.model](isa.profiles[profile])
    state = model.initial(rng)
    regs = isa.space.register_names
    insns = {i.mnemonic: i for i in isa.instructions}
    bugs = sorted(isa.bugs)
    steps: list[tuple[str, dict]] = []
    tbs: list[TbEvent] = []
    bug_events: list[int] = []
    since_bug = 0
    block: list[tuple[str, bytes]] = []
    target = rng.randint(1, 6)
    while len(steps) < length:
        fired = False
        if bugs and since_bug >= BUG_PERIOD:
            rule_id = bugs[len(bug_events) % len(bugs)]
            mnem = model.force(rule_id, state)
            fired = _completes(rule_id, mnem)
        else:
            mnem = model.choose(state, rng)
        new = model.apply(mnem, state, rng, fired)
        changed = {r for r in regs if new[r] != state[r]}
        spec = insns[mnem]
        if changed - spec.effects:
            raise AssertionError(f"{mnem} changed undeclared registers {sorted(changed - spec.effects)}")
        state = new
        steps.append((mnem, {r: state[r] for r in regs}))
        if fired:
            bug_events.append(len(steps) - 1)
            since_bug = 0
        else:
            since_bug += 1
        block.append((spec.log_name, spec.opcode))
        if spec.transfer or len(block) >= target or len(steps) == length:
            tbs.append(TbEvent(tuple(block), {r: state[r] for r in regs}))
            block = []
            target = rng.randint(1, 6)
    header = tuple((r, isa.space.width(r)) for r in regs)
    return GeneratedRun(header, tbs, steps, bug_events)


def _completes(rule_id: str, mnem: str) -> bool:
    return {"smm-no-call": "call", "sysret-canonical": "sysret", "farjump-dpl": "jmp_far"}[rule_id] == mnem


def generate(isa: MockIsa, profile: str, seed: int, length: int) -> str:
    """Canonical trace text; identical for identical arguments."""
    return generate_run(isa, profile, seed, length).text()
