"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line through ``record_criterion`` before
asserting, so the summary shows every outcome even when one fails.
"""

from __future__ import annotations

import os
import random
import time

from conftest import X86_LENGTH, X86_PROFILES, X86_SEED, record_criterion
from oracles import brute_force_clauses, equality_components

from ctrlmine.clauses import Const, Eq, InSet, Masked, OrigEq
from ctrlmine.invariant_engine import Checker, MinerConfig, Property, PropertySet, mine_frames, mine_point
from ctrlmine.frame import build_frames
from ctrlmine.partition import PSEUDO_INSN, make_partitions, observations, parse_precondition, slice_observations
from ctrlmine.pipeline import run_pipeline, synth_trace_set
from ctrlmine.postprocess import closure, compose, intersect, units
from ctrlmine.report import MACHINE, parse_machine, render
from ctrlmine.signal_space import CandidateSignal, parse_space, unpack_set
from ctrlmine.synthcpu import Gating, X86Lite, inject_bug
from ctrlmine.trace_model import Trace, TraceEvent, TraceSet

CALL_PC = parse_precondition("call")
SYSRET_PC = parse_precondition("sysret & not(CPL==orig(CPL))")
FAR_PC = parse_precondition("jmp_far & not(CS==orig(CS))")


# -- 1 ----------------------------------------------------------------------------


def random_observations(seed: int):
    rng = random.Random(seed)
    names = [f"S{i}" for i in range(rng.randint(1, 6))]
    domains = {n: rng.sample(range(16), rng.randint(1, 4)) for n in names}
    wide = rng.choice(names + [None])
    events = []
    for i in range(rng.randint(1, 60)):
        vals = {}
        for n in names:
            v = None if rng.random() < 0.1 else rng.choice(domains[n])
            vals[n] = bytes([v]) * 9 if n == wide and v is not None else v
        events.append(TraceEvent(rng.choice(["p", "q"]), vals, i))
    return list(observations(Trace(tuple(events), "r")))


def test_c01_oracle_equivalence():
    config = MinerConfig(1, (("S0", "S1"), ("orig(S2)", "S0")), 3)
    start = time.perf_counter()
    mismatches = 0
    for seed in range(100):
        obs = random_observations(seed)
        mismatches += set(mine_point(obs, config)) != brute_force_clauses(obs, 1, 3, config.ineq_pairs)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    record_criterion(1, ok, f"{mismatches}/100 oracle mismatches, {elapsed:.2f} s")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_c02_soundness(x86_result):
    final = x86_result.spec.final
    verdicts = [x86_result.checker.check(p) for p in final]
    bad = [(str(p.precondition), str(v)) for p, v in zip(final, verdicts) if v.status != "holds"]
    ok = bool(final) and not bad
    record_criterion(2, ok, f"{len(final)} final properties, {len(bad)} not holding {bad[:3]}")
    assert ok


# -- 3 ----------------------------------------------------------------------------


# bare metal never drops to user mode, so the buggy runs use the OS profiles
OS_PROFILES = tuple(p for p in X86_PROFILES if p != "baremetal")


def _buggy_checker(isa, rule):
    return Checker(unpack_set(synth_trace_set(inject_bug(isa, rule), OS_PROFILES, X86_SEED, X86_LENGTH)))


def test_c03_case_studies(x86_isa, x86_result):
    smm_points = [
        pc for ps in x86_result.per_label.values() for pc in ps.points
        if pc.instruction == "call" and pc.signal == "SMM" and "orig(SMM)==1" in str(pc)
    ]
    prohibition = [p for p in x86_result.spec.final if p.precondition == CALL_PC and Const("orig(SMM)", 0) in units(p)]

    def has_canonical_ecx(p):
        return any(isinstance(c, Masked) and c.canonical and c.var == "ECX" for c in p.residuals)

    # every sysret in the model raises CPL, so the clause may surface as a global at the bare heading
    canonical = [
        p for p in x86_result.spec.final if p.precondition in (SYSRET_PC, parse_precondition("sysret"))
        and has_canonical_ecx(p)
    ]
    at_point = [p for p in x86_result.spec.closed if p.precondition == SYSRET_PC and has_canonical_ecx(p)]
    a_ok = not smm_points and bool(prohibition)
    b_ok = bool(canonical) and bool(at_point)

    exclusive = {}
    caught = {}
    for rule in X86Lite.BUGS:
        checker = _buggy_checker(x86_isa, rule)
        exclusive[rule] = [r.id for r in x86_isa.rules if not checker.check(r.as_property()).ok]
        mined = {"smm-no-call": prohibition, "sysret-canonical": canonical}.get(rule)
        if mined is not None:
            caught[rule] = any(not checker.check(p).ok for p in mined)
    c_ok = all(v == [r] for r, v in exclusive.items()) and all(caught.values())

    ok = a_ok and b_ok and c_ok
    record_criterion(
        3, ok,
        f"(a) call points under SMM=1: {len(smm_points)}, prohibition: {bool(prohibition)}; "
        f"(b) canonical ECX at elevated sysret: {b_ok} (final under {[str(p.precondition) for p in canonical]}); "
        f"(c) violated rules per bug {exclusive}, mined property catches {caught}",
    )
    assert ok


# -- 4 ----------------------------------------------------------------------------


def test_c04_far_transfer_class(x86_result):
    (prop,) = [p for p in x86_result.spec.closed if p.precondition == FAR_PC]
    wanted = {"CPL", "CS_DPL", "DS_DPL", "SS_DPL"}
    found = [
        cls for cls in prop.classes
        if {m for m in cls if isinstance(m, str) and not m.startswith("orig(")} == wanted
    ]
    ok = len(found) == 1
    record_criterion(4, ok, f"class at {FAR_PC}: {found[0] if found else prop.classes}")
    assert ok


# -- 5 ----------------------------------------------------------------------------


def test_c05_partition_law():
    rng = random.Random(5)
    total = 0
    failures = 0
    while total < 10_000:
        events = []
        for i in range(101):
            vals = {s: rng.choice([0, 1, 1, None]) for s in ("S", "T", "U")}
            vals["X"] = rng.choice([None, 0, 7, 9])
            events.append(TraceEvent(rng.choice(["a", "b", "c"]), vals, i))
        obs = list(observations(Trace(tuple(events), "r")))
        total += len(obs)
        for sig in ("S", "T", "U"):
            parts = make_partitions(CandidateSignal(sig, 1))
            for insn in ("a", "b", "c", PSEUDO_INSN):
                ids = [o.event_index for pc in parts for o in slice_observations(obs, insn, pc)]
                want = [
                    o.event_index for o in obs
                    if (insn == PSEUDO_INSN or o.instruction == insn)
                    and o.pre_values[sig] is not None and o.post_values[sig] is not None
                ]
                failures += len(ids) != len(set(ids)) or sorted(ids) != want
    ok = failures == 0
    record_criterion(5, ok, f"{total} observations, {failures} slice families breaking disjointness or cover")
    assert ok


# -- 6 ----------------------------------------------------------------------------


def test_c06_transitive_closure():
    worked = Property(FAR_PC, (Const("orig(CPL)", 3), Eq("CPL", "DS_DPL"), OrigEq("CPL")))
    (out,) = compose(closure([worked]))
    example_ok = out.classes == ((3, "CPL", "DS_DPL", "orig(CPL)"),) and not out.residuals

    rng = random.Random(6)
    names = [f"v{i}" for i in range(9)]
    mismatches = 0
    for _ in range(50):
        clauses = {Eq(*rng.sample(names, 2)) for _ in range(rng.randint(0, 12))}
        if rng.random() < 0.5:
            clauses.add(Const(rng.choice(names), rng.randint(0, 5)))
        (res,) = compose(closure([Property(FAR_PC, tuple(clauses))]))
        mismatches += {frozenset(c) for c in res.classes} != equality_components(clauses)
    ok = example_ok and mismatches == 0
    record_criterion(6, ok, f"worked example -> {out.classes}; {mismatches}/50 component mismatches")
    assert ok


# -- 7 ----------------------------------------------------------------------------


def test_c07_intersection_law():
    rng = random.Random(7)
    pool = [Const("A", 1), Const("B", 2), Eq("A", "B"), OrigEq("C"), InSet("D", (0, 1)), Const("E", b"\x01")]
    points = ["mov", "jmp & S==orig(S)", "* & orig(S)==1 & S==0", "pop"]
    violations = 0
    for _ in range(200):
        per = {}
        for label in ("l0", "l1", "l2", "l3")[: rng.randint(1, 4)]:
            ps = PropertySet(label)
            for pc in rng.sample(points, rng.randint(0, len(points))):
                clauses = tuple(rng.sample(pool, rng.randint(0, len(pool))))
                ps.add(Property(parse_precondition(pc), clauses, 1, frozenset([label])))
            per[label] = ps
        merged = intersect(per).merged
        for pc, prop in merged.points.items():
            populated = [ps.points[pc] for ps in per.values() if pc in ps.points]
            expected = set.intersection(*(set(p.clauses) for p in populated))
            violations += set(prop.clauses) != expected
    ok = violations == 0
    record_criterion(7, ok, f"200 fuzz cases, {violations} merged points keeping a clause some label lacks")
    assert ok


# -- 8 ----------------------------------------------------------------------------


def test_c08_global_split(gating_result):
    spec = gating_result.spec
    split = spec.split
    mismatches = 0
    for p in spec.closed:
        s = p.precondition.signal
        g = split.global_units.get(p.precondition.instruction, frozenset())
        spec_units = {u for q in split.specific.get(s, []) if q.precondition == p.precondition for u in units(q)}
        mismatches += bool(spec_units & g) or (spec_units | (units(p) & g)) != units(p)
    n_cand = len(gating_result.candidates)
    ok = n_cand == 6 and split.distinguishing == list(Gating.GATING) and mismatches == 0
    record_criterion(
        8, ok,
        f"{n_cand} candidates, distinguishing {split.distinguishing}, {mismatches} reconstruction mismatches",
    )
    assert ok


# -- 9 ----------------------------------------------------------------------------


def test_c09_reduction(x86_result):
    final = len(x86_result.spec.final)
    raw = x86_result.raw_clause_count
    ratio = final / raw
    ok = ratio <= 0.05
    record_criterion(9, ok, f"{raw} raw clauses -> {final} final properties ({100 * ratio:.3f}%)")
    assert ok


# -- 10 ---------------------------------------------------------------------------


def test_c10_determinism(x86_unpacked, x86_result):
    first = render(x86_result.spec.final, MACHINE)
    second = render(run_pipeline(x86_unpacked, unpacked=True).spec.final, MACHINE)
    parsed = parse_machine(first)
    ok = first == second and parsed == x86_result.spec.final and render(parsed, MACHINE) == first
    record_criterion(10, ok, f"identical runs: {first == second}; round trip: {render(parsed, MACHINE) == first}")
    assert ok


# -- 11 ---------------------------------------------------------------------------


def perf_trace_set(n_events: int = 100_000) -> TraceSet:
    regs = [f"R{i:02d}" for i in range(58)]
    lines = [f"REG {r} 32" for r in regs] + ["REG C0 1", "REG C1 1", "REG C2 1", "CAT ctl C0,C1,C2", "CTRLCAT ctl"]
    space = parse_space("\n".join(lines))
    rng = random.Random(5)
    state = {r: rng.getrandbits(32) for r in regs}
    state.update(C0=0, C1=0, C2=1)
    events = []
    for i in range(n_events):
        for r in rng.sample(regs, 4):
            state[r] = rng.getrandbits(32)
        for c in ("C0", "C1", "C2"):
            if rng.random() < 0.1:
                state[c] ^= 1
        events.append(TraceEvent(rng.choice("abcdefgh"), dict(state), i))
    return TraceSet((Trace(tuple(events), "x"),), space)


def test_c11_throughput():
    ts = perf_trace_set()
    cands = [CandidateSignal(c, 1) for c in ("C0", "C1", "C2")]
    n_signals = len(ts.signal_space.signal_names)
    n_parts = sum(len(make_partitions(c)) for c in cands)

    start = time.perf_counter()
    result = run_pipeline(ts, cands, MinerConfig())
    single = time.perf_counter() - start

    frames = build_frames(result.trace_set)
    timings = {}
    for workers in (1, 4):
        start = time.perf_counter()
        mine_frames(frames, cands, MinerConfig(), workers)
        timings[workers] = time.perf_counter() - start
    speedup = timings[1] / timings[4]

    speed_ok = single < 60
    scale_ok = speedup >= 3
    ok = speed_ok and scale_ok
    record_criterion(
        11, ok,
        f"{ts.event_count} events, {n_signals} signals, {n_parts} partitions: pipeline {single:.1f} s (<60: {speed_ok}); "
        f"mining speedup on 4 workers {speedup:.2f}x (>=3: {scale_ok}) with {os.cpu_count()} CPU(s) available",
    )
    assert ok
