"""Clause inference per program point, and replay checking of properties.

Mining runs over a :class:`~ctrlmine.frame.Frame`, so every unary clause is
decided with a handful of vectorised reductions and pairwise equalities are
pruned chunk by chunk: most candidate pairs die within the first few rows.
"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .clauses import Clause, Cmp, Const, Eq, InSet, Masked, OrigEq, sort_clauses
from .errors import ConfigError, ParseError, UnknownSignalError
from .frame import Frame, build_frames, frame_from_observations
from .partition import PSEUDO_INSN, Observation, Precondition, make_partitions
from .signal_space import CandidateSignal
from .trace_model import TraceSet

logger = logging.getLogger(__name__)

_U64_MAX = np.uint64(np.iinfo(np.uint64).max)


@dataclass(frozen=True)
class MinerConfig:
    min_samples: int = 1
    ineq_pairs: tuple[tuple[str, str], ...] = ()
    max_set: int = 3

    def __post_init__(self):
        if self.min_samples < 1:
            raise ConfigError("MIN_SAMPLES must be at least 1")
        if not 2 <= self.max_set <= 3:
            raise ConfigError("MAX_SET must be 2 or 3")

    def to_text(self) -> str:
        lines = [f"MIN_SAMPLES {self.min_samples}", f"MAX_SET {self.max_set}"]
        lines += [f"INEQ_PAIRS {a} {b}" for a, b in self.ineq_pairs]
        return "\n".join(lines) + "\n"


def default_config() -> MinerConfig:
    """Packaged defaults: ``MIN_SAMPLES 1`` and the IOPL-vs-CPL-bit comparison."""
    from importlib import resources

    return parse_miner_config(resources.files("ctrlmine").joinpath("data").joinpath("default.miner").read_text())


def parse_miner_config(text: str) -> MinerConfig:
    min_samples, max_set = 1, 3
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "MIN_SAMPLES" and len(parts) == 2:
                min_samples = int(parts[1])
            elif parts[0] == "MAX_SET" and len(parts) == 2:
                max_set = int(parts[1])
            elif parts[0] == "INEQ_PAIRS" and len(parts) == 3:
                pairs.append((parts[1], parts[2]))
            else:
                raise ParseError(f"unrecognised miner config line {line!r}", lineno)
        except ValueError:
            raise ParseError(f"bad number in {line!r}", lineno) from None
    try:
        return MinerConfig(min_samples, tuple(pairs), max_set)
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


@dataclass(frozen=True)
class Property:
    precondition: Precondition
    clauses: tuple = ()
    support: int = 0
    enforced_by: frozenset[str] = frozenset()

    def __str__(self) -> str:
        body = " ; ".join(str(c) for c in self.clauses) or "true"
        return f"{self.precondition} => {body}"


@dataclass
class PropertySet:
    """Properties of one origin label, keyed by program point.

    A populated point whose slice supports no clause is still recorded (with
    no clauses) so later stages can tell "populated" from "never observed".
    """

    label: str
    points: dict[Precondition, Property] = field(default_factory=dict)

    def add(self, prop: Property) -> None:
        self.points[prop.precondition] = prop

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        for pc in sorted(self.points, key=Precondition.sort_key):
            yield self.points[pc]

    def clause_count(self) -> int:
        return sum(len(p.clauses) for p in self.points.values())


# -- per-point mining -------------------------------------------------------------


def _pair_table(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    """Every column pair that may form an Eq: same width class, not s vs orig(s)."""
    m = len(frame.signals)
    n = 2 * m
    ii, jj = np.triu_indices(n, k=1)
    keep = (frame.wide[ii] == frame.wide[jj]) & (jj - ii != m)
    return ii[keep], jj[keep]


def _decode(frame: Frame, col: int, raw) -> object:
    return frame.decode(col, raw)


class _PointMiner:
    """Mines rows of one frame; caches column metadata shared by all points."""

    def __init__(self, frame: Frame, config: MinerConfig):
        self.frame = frame
        self.config = config
        self.names = frame.var_names
        self.pairs = _pair_table(frame)
        m = len(frame.signals)
        self.m = m
        cmp = []
        for a, b in config.ineq_pairs:
            ia, ib = frame.index.get(a), frame.index.get(b)
            if ia is None or ib is None:
                continue
            if frame.wide[ia] or frame.wide[ib]:
                continue
            cmp.append((a, b, ia, ib))
        self.cmp = cmp

    def mine(self, rows: Optional[np.ndarray] = None) -> list[Clause]:
        f = self.frame
        if rows is None:
            data, valid = f.data, f.valid
        else:
            data, valid = f.data[rows], f.valid[rows]
        n = data.shape[0]
        if n == 0:
            return []
        ms = self.config.min_samples
        counts = valid.sum(axis=0)
        active = counts >= ms
        out: list[Clause] = []
        out += self._unary(data, valid, active)
        out += self._equalities(data, valid, active)
        out += self._orig_equalities(data, valid, active)
        out += self._comparisons(data, valid)
        return sort_clauses(out)

    def _unary(self, data, valid, active) -> list[Clause]:
        cols = np.flatnonzero(active)
        if cols.size == 0:
            return []
        d = data[:, cols]
        v = valid[:, cols]
        lo = np.where(v, d, _U64_MAX).min(axis=0)
        hi = np.where(v, d, np.uint64(0)).max(axis=0)
        mid = v & (d != lo) & (d != hi)
        has_mid = mid.any(axis=0)
        mid_lo = np.where(mid, d, _U64_MAX).min(axis=0)
        mid_hi = np.where(mid, d, np.uint64(0)).max(axis=0)
        out: list[Clause] = []
        f = self.frame
        for k, col in enumerate(cols):
            name = self.names[col]
            if lo[k] == hi[k]:
                out.append(Const(name, _decode(f, col, lo[k])))
                continue
            if not has_mid[k]:
                vals = (lo[k], hi[k])
            elif mid_lo[k] == mid_hi[k] and self.config.max_set >= 3:
                vals = (lo[k], mid_lo[k], hi[k])
            else:
                continue
            out.append(InSet(name, tuple(_decode(f, col, x) for x in vals)))
        return out

    def _equalities(self, data, valid, active) -> list[Clause]:
        ii, jj = self.pairs
        keep = active[ii] & active[jj]
        ii, jj = ii[keep], jj[keep]
        n = data.shape[0]
        start, step = 0, 16
        while start < n and ii.size:
            stop = min(n, start + step)
            d, v = data[start:stop], valid[start:stop]
            ok = ((d[:, ii] == d[:, jj]) | ~(v[:, ii] & v[:, jj])).all(axis=0)
            ii, jj = ii[ok], jj[ok]
            start, step = stop, step * 4
        if not ii.size:
            return []
        support = (valid[:, ii] & valid[:, jj]).sum(axis=0)
        ms = self.config.min_samples
        return [Eq(self.names[a], self.names[b]) for a, b, s in zip(ii, jj, support) if s >= ms]

    def _orig_equalities(self, data, valid, active) -> list[Clause]:
        m = self.m
        if m == 0:
            return []
        cand = np.flatnonzero(active[:m] & active[m:])
        if cand.size == 0:
            return []
        post, pre = cand, cand + m
        both = valid[:, post] & valid[:, pre]
        ok = ((data[:, post] == data[:, pre]) | ~both).all(axis=0)
        support = both.sum(axis=0)
        ms = self.config.min_samples
        return [OrigEq(self.frame.signals[c]) for c, g, s in zip(cand, ok, support) if g and s >= ms]

    def _comparisons(self, data, valid) -> list[Clause]:
        out: list[Clause] = []
        for a, b, ia, ib in self.cmp:
            both = valid[:, ia] & valid[:, ib]
            if both.sum() < self.config.min_samples:
                continue
            x, y = data[both, ia], data[both, ib]
            if (x <= y).all():
                out.append(Cmp(a, "<=", b))
            if (x >= y).all():
                out.append(Cmp(a, ">=", b))
        return out


def mine_point(obs: Sequence[Observation], config: MinerConfig = MinerConfig()) -> list[Clause]:
    """Every grammar clause that holds on ``obs``, in canonical order."""
    if not obs:
        return []
    frame = frame_from_observations(obs)
    return _PointMiner(frame, config).mine()


# -- whole trace sets -------------------------------------------------------------


def _insn_masks(frame: Frame) -> list[tuple[str, np.ndarray]]:
    out = [(PSEUDO_INSN, np.ones(frame.n_obs, dtype=bool))]
    out += [(name, frame.insn == code) for code, name in enumerate(frame.insn_names)]
    return out


def _mine_candidate(frame: Frame, miner: _PointMiner, cand: CandidateSignal) -> list[Property]:
    if cand.name not in frame.index:
        raise UnknownSignalError(f"candidate {cand.name!r} is not a signal of the trace set")
    props = []
    insns = _insn_masks(frame)
    for part in make_partitions(cand):
        pmask = frame.precondition_mask(part)
        if not pmask.any():
            continue
        for insn, imask in insns:
            rows = np.flatnonzero(pmask & imask)
            if rows.size == 0:
                continue
            pc = part.with_instruction(insn)
            clauses = miner.mine(rows)
            props.append(Property(pc, tuple(clauses), int(rows.size), frozenset([frame.label])))
    return props


_WORKER_STATE: dict = {}


def _worker_init(frames, config):
    _WORKER_STATE["frames"] = frames
    _WORKER_STATE["config"] = config
    _WORKER_STATE["miners"] = {}


def _worker_task(label: str, cand: CandidateSignal) -> list[Property]:
    frame = _WORKER_STATE["frames"][label]
    miners = _WORKER_STATE["miners"]
    if label not in miners:
        miners[label] = _PointMiner(frame, _WORKER_STATE["config"])
    return _mine_candidate(frame, miners[label], cand)


def mine_frames(
    frames: dict[str, Frame],
    candidates: Sequence[CandidateSignal],
    config: MinerConfig = MinerConfig(),
    workers: int = 1,
) -> dict[str, PropertySet]:
    tasks = [(label, c) for label in frames for c in candidates]
    if workers > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init,
                                 initargs=(frames, config)) as pool:
            results = list(pool.map(_worker_task, *zip(*tasks)))
    else:
        _worker_init(frames, config)
        try:
            results = [_worker_task(label, c) for label, c in tasks]
        finally:
            _WORKER_STATE.clear()
    out = {label: PropertySet(label) for label in frames}
    for (label, _), props in zip(tasks, results):
        for p in props:
            out[label].add(p)
    return out


def mine(
    ts: TraceSet,
    candidates: Sequence[CandidateSignal],
    config: MinerConfig = MinerConfig(),
    workers: int = 1,
) -> dict[str, PropertySet]:
    """Mine every (label, instruction, candidate, partition) program point.

    ``ts`` must already be unpacked. The result is independent of
    ``workers``.
    """
    frames = build_frames(ts)
    result = mine_frames(frames, candidates, config, workers)
    logger.info(
        "mined %d program points, %d clauses",
        sum(len(ps) for ps in result.values()),
        sum(ps.clause_count() for ps in result.values()),
    )
    return result


# -- replay checking --------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    status: str  # "holds", "violated" or "unsupported"
    label: Optional[str] = None
    trace_index: Optional[int] = None
    event_index: Optional[int] = None
    clause: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status != "violated"

    def __str__(self) -> str:
        if self.status != "violated":
            return self.status
        return f"violated: {self.clause} at trace {self.trace_index} event {self.event_index} ({self.label})"


def _column(frame: Frame, var: str) -> int:
    col = frame.index.get(var)
    if col is None:
        raise UnknownSignalError(f"property names unknown signal {var!r}")
    return col


def _code(frame: Frame, value, wide: bool) -> Optional[int]:
    """Stored representation of a constant in a column, or None if it cannot occur there."""
    if isinstance(value, bytes) and wide:
        return frame.interner.lookup(value)
    if isinstance(value, int) and not wide and 0 <= value <= int(_U64_MAX):
        return value
    return None


def _first_bad(known: np.ndarray, ok: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per column: any known row, and the first row that is known but fails (-1 if none)."""
    bad = known & ~ok
    first = np.where(bad.any(axis=0), bad.argmax(axis=0), -1)
    return known.any(axis=0), first


def _scan(frame: Frame, clauses: Sequence[Clause], data: np.ndarray, valid: np.ndarray):
    """Vectorised replay of ``clauses`` over selected rows.

    Returns per-clause (supported, first failing row position or -1).
    Pairwise equalities and constants are checked as one 2-D comparison
    each; other clause kinds go through :func:`_clause_ok`.
    """
    n = len(clauses)
    supported = np.zeros(n, dtype=bool)
    first = np.full(n, -1, dtype=np.int64)
    pairs, consts, rest = [], [], []
    for i, c in enumerate(clauses):
        (pairs if isinstance(c, (Eq, OrigEq)) else consts if isinstance(c, Const) else rest).append(i)
    if pairs:
        a = np.array([_column(frame, clauses[i].variables[0]) for i in pairs])
        b = np.array([_column(frame, clauses[i].variables[1]) for i in pairs])
        same_kind = frame.wide[a] == frame.wide[b]
        known = valid[:, a] & valid[:, b]
        ok = (data[:, a] == data[:, b]) & same_kind
        supported[pairs], first[pairs] = _first_bad(known, ok)
    if consts:
        cols = np.array([_column(frame, clauses[i].var) for i in consts])
        codes = [_code(frame, clauses[i].value, bool(frame.wide[c])) for i, c in zip(consts, cols)]
        present = np.array([c is not None for c in codes])
        wanted = np.array([c or 0 for c in codes], dtype=np.uint64)
        ok = (data[:, cols] == wanted) & present
        supported[consts], first[consts] = _first_bad(valid[:, cols], ok)
    for i in rest:
        known, ok = _clause_ok(frame, clauses[i], data, valid)
        sup, bad = _first_bad(known[:, None], ok[:, None])
        supported[i], first[i] = sup[0], bad[0]
    return supported, first


def _clause_ok(frame: Frame, clause: Clause, data: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(known, ok) boolean vectors for one clause; ``data``/``valid`` are the frame's selected rows."""
    cols = [_column(frame, var) for var in clause.variables]
    d = data[:, cols]
    known = valid[:, cols].all(axis=1)
    n = len(d)
    wide = [bool(frame.wide[c]) for c in cols]
    if isinstance(clause, (Eq, OrigEq)):
        ok = d[:, 0] == d[:, 1] if wide[0] == wide[1] else np.zeros(n, dtype=bool)
    elif isinstance(clause, (Const, InSet)):
        values = [clause.value] if isinstance(clause, Const) else list(clause.values)
        codes = [c for c in (_code(frame, v, wide[0]) for v in values) if c is not None]
        ok = np.isin(d[:, 0], np.asarray(codes, dtype=np.uint64))
    elif isinstance(clause, Cmp):
        ok = d[:, 0] <= d[:, 1] if clause.relation == "<=" else d[:, 0] >= d[:, 1]
    elif isinstance(clause, Masked):
        if wide[0]:
            ok = np.zeros(n, dtype=bool)
        else:
            x = d[:, 0]
            ok = (x & np.uint64(clause.mask)) == np.uint64(clause.value)
            if clause.canonical:
                upper = x >> np.uint64(clause.canonical_bit)
                top = np.uint64((1 << (64 - clause.canonical_bit)) - 1)
                ok &= (upper == 0) | (upper == top)
    else:
        raise TypeError(f"unsupported clause {clause!r}")
    return known, ok


class Checker:
    """Replays properties against a trace set; frames are built once."""

    def __init__(self, ts: TraceSet, frames: Optional[dict[str, Frame]] = None):
        self.frames = frames if frames is not None else build_frames(ts)

    def check(self, prop) -> Verdict:
        clauses = list(prop.clauses)
        supported = False
        first: Optional[tuple] = None
        for label, frame in self.frames.items():
            rows = np.flatnonzero(frame.precondition_mask(prop.precondition))
            if rows.size == 0:
                continue
            sup, bad = _scan(frame, clauses, frame.data[rows], frame.valid[rows])
            supported = supported or bool(sup.any())
            for i in np.flatnonzero(bad >= 0):
                r = rows[bad[i]]
                loc = (int(frame.trace_idx[r]), int(frame.event_idx[r]), label, str(clauses[i]))
                if first is None or loc[:2] < first[:2]:
                    first = loc
        if first is not None:
            return Verdict("violated", first[2], first[0], first[1], first[3])
        return Verdict("holds" if supported else "unsupported")


def check(prop, ts: TraceSet) -> Verdict:
    """Replay one property (anything with ``precondition`` and ``clauses``)."""
    return Checker(ts).check(prop)


def check_all(props: Iterable, ts: TraceSet) -> list[Verdict]:
    checker = Checker(ts)
    return [checker.check(p) for p in props]
