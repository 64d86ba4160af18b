"""End-to-end helpers tying the stages together."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .frame import build_frames
from .invariant_engine import Checker, MinerConfig, Property, PropertySet, default_config, mine_frames
from .postprocess import Specification, run_postprocess
from .signal_space import CandidateSignal, SignalSpace, discover_candidates, unpack_set
from .synthcpu import MockIsa, generate
from .trace_ingest import EffectsTable, extend_trace, parse_trace
from .trace_model import Trace, TraceSet, loads_archive, merge_trace_sets

logger = logging.getLogger(__name__)


def ingest_text(text: str, space: SignalSpace, effects: EffectsTable, label: str) -> Trace:
    """Parse and extend one ``.atrc`` log."""
    effects.validate(space)
    return extend_trace(parse_trace(text, space), effects, space, label)


def load_archives(paths: Iterable[Path]) -> TraceSet:
    return merge_trace_sets([loads_archive(Path(p).read_text()) for p in paths])


def synth_trace_set(
    isa: MockIsa,
    profiles: Sequence[str],
    seed: int,
    length: int,
) -> TraceSet:
    """Generate, parse and extend one trace per profile (not yet unpacked)."""
    effects = isa.effects_table()
    traces = [ingest_text(generate(isa, p, seed, length), isa.space, effects, p) for p in profiles]
    return TraceSet(tuple(traces), isa.space)


@dataclass
class PipelineResult:
    trace_set: TraceSet
    candidates: list[CandidateSignal]
    per_label: dict[str, PropertySet]
    spec: Specification
    checker: Checker

    @property
    def raw_clause_count(self) -> int:
        return sum(ps.clause_count() for ps in self.per_label.values())


def widths_of(space: SignalSpace) -> dict[str, int]:
    return {n: space.width(n) for n in space.signal_names}


def replay_validator(checker: Checker):
    def validate(pc, clauses) -> bool:
        return checker.check(Property(pc, tuple(clauses))).status != "violated"
    return validate


def run_pipeline(
    ts: TraceSet,
    candidates: Optional[Sequence[CandidateSignal]] = None,
    config: Optional[MinerConfig] = None,
    workers: int = 1,
    unpacked: bool = False,
) -> PipelineResult:
    """Unpack, discover (unless given), mine and post-process ``ts``."""
    if config is None:
        config = default_config()
    if not unpacked:
        ts = unpack_set(ts)
    if candidates is None:
        candidates = discover_candidates(ts)
    candidates = list(candidates)
    frames = build_frames(ts)
    per_label = mine_frames(frames, candidates, config, workers)
    checker = Checker(ts, frames)
    spec = run_postprocess(per_label, candidates, widths_of(ts.signal_space),
                           validate=replay_validator(checker))
    return PipelineResult(ts, candidates, per_label, spec, checker)
