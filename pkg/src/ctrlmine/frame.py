"""Columnar view of observations used by the miner and the replay checker.

Column ``k < m`` holds signal ``k`` after the instruction, column ``m + k``
holds ``orig(signal k)``. Values are ``uint64``; wide (``bytes``) values are
interned to integer codes shared by every frame built from the same
:class:`Interner`, and wide columns are never compared with narrow ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .partition import PSEUDO_INSN, Observation, Precondition, ORIG_VAL, POST_VAL, SAME
from .trace_model import Trace, TraceSet, Value, orig_name


class Interner:
    def __init__(self):
        self.codes: dict[bytes, int] = {}
        self.values: list[bytes] = []

    def code(self, value: bytes) -> int:
        c = self.codes.get(value)
        if c is None:
            c = self.codes[value] = len(self.values)
            self.values.append(value)
        return c

    def lookup(self, value: bytes) -> Optional[int]:
        return self.codes.get(value)


def _column(values: Sequence[Value], interner: Interner) -> tuple[np.ndarray, np.ndarray, bool]:
    n = len(values)
    valid = np.fromiter((v is not None for v in values), dtype=bool, count=n)
    wide = any(isinstance(v, bytes) for v in values)
    if wide:
        data = np.fromiter(
            (interner.code(v) if isinstance(v, bytes) else 0 for v in values), dtype=np.uint64, count=n
        )
        # a column mixing int and bytes is treated as wide; ints become invalid
        valid &= np.fromiter((isinstance(v, bytes) for v in values), dtype=bool, count=n)
    else:
        data = np.fromiter((0 if v is None else v for v in values), dtype=np.uint64, count=n)
    return data, valid, wide


@dataclass
class Frame:
    label: str
    signals: tuple[str, ...]
    data: np.ndarray
    valid: np.ndarray
    wide: np.ndarray
    insn: np.ndarray
    insn_names: tuple[str, ...]
    trace_idx: np.ndarray
    event_idx: np.ndarray
    interner: Interner
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        m = len(self.signals)
        self.index = {s: k for k, s in enumerate(self.signals)}
        self.index.update({orig_name(s): m + k for k, s in enumerate(self.signals)})

    @property
    def n_obs(self) -> int:
        return self.data.shape[0]

    @property
    def var_names(self) -> list[str]:
        return list(self.signals) + [orig_name(s) for s in self.signals]

    def insn_code(self, mnemonic: str) -> Optional[int]:
        try:
            return self.insn_names.index(mnemonic)
        except ValueError:
            return None

    def decode(self, col: int, raw: int):
        return self.interner.values[raw] if self.wide[col] else int(raw)

    def precondition_mask(self, pc: Precondition) -> np.ndarray:
        mask = np.ones(self.n_obs, dtype=bool)
        if pc.instruction not in (None, PSEUDO_INSN):
            code = self.insn_code(pc.instruction)
            if code is None:
                return np.zeros(self.n_obs, dtype=bool)
            mask &= self.insn == code
        for c in pc.clauses:
            if c.signal not in self.index:
                return np.zeros(self.n_obs, dtype=bool)
            post = self.index[c.signal]
            pre = self.index[orig_name(c.signal)]
            mask &= self.valid[:, post] & self.valid[:, pre]
            if c.kind == ORIG_VAL:
                mask &= self.data[:, pre] == np.uint64(c.value)
            elif c.kind == POST_VAL:
                mask &= self.data[:, post] == np.uint64(c.value)
            elif c.kind == SAME:
                mask &= self.data[:, pre] == self.data[:, post]
            else:
                mask &= self.data[:, pre] != self.data[:, post]
        return mask


def _assemble(label, signals, pre_rows, post_rows, insns, tidx, eidx, interner) -> Frame:
    n = len(insns)
    m = len(signals)
    data = np.zeros((n, 2 * m), dtype=np.uint64)
    valid = np.zeros((n, 2 * m), dtype=bool)
    wide = np.zeros(2 * m, dtype=bool)
    for k, s in enumerate(signals):
        for offset, rows in ((0, post_rows), (m, pre_rows)):
            d, v, w = _column([r.get(s) for r in rows], interner)
            data[:, offset + k] = d
            valid[:, offset + k] = v
            wide[offset + k] = w
    # a signal is wide if either side ever held bytes
    w = wide[:m] | wide[m:]
    wide[:m] = w
    wide[m:] = w
    names = tuple(sorted(set(insns)))
    lookup = {name: i for i, name in enumerate(names)}
    codes = np.fromiter((lookup[i] for i in insns), dtype=np.int32, count=n)
    return Frame(label, tuple(signals), data, valid, wide, codes, names,
                 np.asarray(tidx, dtype=np.int64), np.asarray(eidx, dtype=np.int64), interner)


def frame_from_traces(
    label: str,
    traces: Iterable[tuple[int, Trace]],
    signals: Sequence[str],
    interner: Interner,
) -> Frame:
    """Build a frame over consecutive-event observations of ``traces``."""
    m = len(signals)
    cols_wide = np.zeros(m, dtype=bool)
    insns: list[str] = []
    tidx: list[int] = []
    eidx: list[int] = []
    pre_parts, post_parts = [], []
    for ti, trace in traces:
        events = trace.events
        if len(events) < 2:
            continue
        n = len(events)
        d = np.zeros((n, m), dtype=np.uint64)
        v = np.zeros((n, m), dtype=bool)
        for k, s in enumerate(signals):
            cd, cv, cw = _column([ev.valuation.get(s) for ev in events], interner)
            d[:, k], v[:, k] = cd, cv
            cols_wide[k] |= cw
        pre_parts.append((d[:-1], v[:-1]))
        post_parts.append((d[1:], v[1:]))
        insns.extend(ev.instruction for ev in events[1:])
        tidx.extend([ti] * (n - 1))
        eidx.extend(range(1, n))
    n = len(insns)
    if n:
        data = np.hstack([np.vstack([p[0] for p in post_parts]), np.vstack([p[0] for p in pre_parts])])
        valid = np.hstack([np.vstack([p[1] for p in post_parts]), np.vstack([p[1] for p in pre_parts])])
    else:
        data = np.zeros((0, 2 * m), dtype=np.uint64)
        valid = np.zeros((0, 2 * m), dtype=bool)
    wide = np.concatenate([cols_wide, cols_wide])
    names = tuple(sorted(set(insns)))
    lookup = {name: i for i, name in enumerate(names)}
    codes = np.fromiter((lookup[i] for i in insns), dtype=np.int32, count=n)
    return Frame(label, tuple(signals), data, valid, wide, codes, names,
                 np.asarray(tidx, dtype=np.int64), np.asarray(eidx, dtype=np.int64), interner)


def build_frames(ts: TraceSet, signals: Optional[Sequence[str]] = None) -> dict[str, Frame]:
    """One frame per origin label, all sharing one interner."""
    if signals is None:
        signals = ts.signal_space.signal_names
    interner = Interner()
    out = {}
    for label in ts.labels:
        traces = [(i, t) for i, t in enumerate(ts.traces) if t.origin_label == label]
        out[label] = frame_from_traces(label, traces, list(signals), interner)
    return out


def frame_from_observations(obs: Sequence[Observation], interner: Optional[Interner] = None,
                            label: str = "") -> Frame:
    names: set[str] = set()
    for o in obs:
        names.update(o.pre_values)
        names.update(o.post_values)
    return _assemble(
        label,
        sorted(names),
        [o.pre_values for o in obs],
        [o.post_values for o in obs],
        [o.instruction for o in obs],
        [o.trace_index for o in obs],
        [o.event_index for o in obs],
        interner or Interner(),
    )
