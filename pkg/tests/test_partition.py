from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlmine.errors import ParseError
from ctrlmine.partition import (
    DIFF,
    ORIG_VAL,
    POST_VAL,
    PSEUDO_INSN,
    SAME,
    Precondition,
    PreClause,
    make_partitions,
    observations,
    parse_pre_clause,
    parse_precondition,
    slice,
    slice_observations,
)
from ctrlmine.signal_space import CandidateSignal, parse_space
from ctrlmine.trace_model import Trace, TraceEvent, TraceSet

SPACE = parse_space("REG S 1\nREG T 1\nREG X 8\n")


def trace_of(rows, label="a"):
    return Trace(tuple(TraceEvent(i, v, k) for k, (i, v) in enumerate(rows)), label)


class TestMakePartitions:
    def test_one_bit_four_rows(self):
        parts = make_partitions(CandidateSignal("IOPL", 1))
        assert [str(p) for p in parts] == [
            "orig(IOPL)==0 & IOPL==0",
            "orig(IOPL)==0 & IOPL==1",
            "orig(IOPL)==1 & IOPL==0",
            "orig(IOPL)==1 & IOPL==1",
        ]

    def test_register_two_rows(self):
        parts = make_partitions(CandidateSignal("CS", 16, True))
        assert [str(p) for p in parts] == ["CS==orig(CS)", "not(CS==orig(CS))"]

    def test_two_bit_field_two_rows(self):
        assert len(make_partitions(CandidateSignal("IOPL", 2))) == 2


class TestPrecondition:
    def test_single_signal(self):
        with pytest.raises(ValueError):
            Precondition(None, (PreClause(SAME, "A"), PreClause(SAME, "B")))

    def test_contradictions(self):
        with pytest.raises(ValueError):
            Precondition(None, (PreClause(SAME, "A"), PreClause(DIFF, "A")))
        with pytest.raises(ValueError):
            Precondition(None, (PreClause(POST_VAL, "A", 0), PreClause(POST_VAL, "A", 1)))

    @pytest.mark.parametrize(
        "text",
        ["true", "jmp_far & not(CS==orig(CS))", "* & orig(SMM)==1 & SMM==1", "popf", "CS==orig(CS)"],
    )
    def test_text_round_trip(self, text):
        assert str(parse_precondition(text)) == text

    def test_alternative_spelling(self):
        assert parse_precondition("jmp_far & CS!=orig(CS)") == parse_precondition("jmp_far & not(CS==orig(CS))")
        assert parse_pre_clause("orig(A) == 1") == PreClause(ORIG_VAL, "A", 1)

    def test_bad_clause(self):
        with pytest.raises(ParseError):
            parse_pre_clause("A > 2")

    def test_admits_requires_known_values(self):
        pc = Precondition("x", (PreClause(SAME, "S"),))
        assert pc.admits("x", {"S": 1}, {"S": 1})
        assert not pc.admits("x", {"S": None}, {"S": None})
        assert not pc.admits("y", {"S": 1}, {"S": 1})
        assert Precondition(PSEUDO_INSN).admits("anything", {}, {})


class TestObservations:
    def test_event_zero_yields_nothing(self):
        assert list(observations(trace_of([("a", {"S": 0})]))) == []

    def test_pairs(self):
        obs = list(observations(trace_of([("a", {"S": 0}), ("b", {"S": 1}), ("c", {"S": 1})]), 4))
        assert [(o.instruction, o.pre_values["S"], o.post_values["S"], o.event_index) for o in obs] == [
            ("b", 0, 1, 1),
            ("c", 1, 1, 2),
        ]
        assert all(o.trace_index == 4 for o in obs)


rows_strategy = st.lists(
    st.tuples(st.sampled_from(["a", "b", "c"]), st.fixed_dictionaries({
        "S": st.one_of(st.none(), st.integers(0, 1)),
        "T": st.one_of(st.none(), st.integers(0, 1)),
        "X": st.one_of(st.none(), st.integers(0, 3)),
    })),
    min_size=1,
    max_size=50,
)


class TestSlice:
    @settings(max_examples=60)
    @given(rows_strategy, st.sampled_from(["a", "b", PSEUDO_INSN]), st.sampled_from(["S", "T"]))
    def test_four_slices_partition_known_observations(self, rows, insn, sig):
        obs = list(observations(trace_of(rows)))
        slices = [slice_observations(obs, insn, pc) for pc in make_partitions(CandidateSignal(sig, 1))]
        ids = [[o.event_index for o in s] for s in slices]
        flat = [i for s in ids for i in s]
        assert len(flat) == len(set(flat))
        expected = [
            o.event_index for o in obs
            if (insn == PSEUDO_INSN or o.instruction == insn)
            and o.pre_values[sig] is not None and o.post_values[sig] is not None
        ]
        assert sorted(flat) == expected

    @settings(max_examples=60)
    @given(rows_strategy, st.sampled_from(["a", PSEUDO_INSN]))
    def test_matches_brute_force_filter(self, rows, insn):
        tr = trace_of(rows)
        ts = TraceSet((tr,), SPACE)
        for pc in make_partitions(CandidateSignal("X", 8, True)):
            got = [o.event_index for o in slice(ts, insn, pc)["a"]]
            want = []
            for i in range(1, len(rows)):
                mnem, post = rows[i]
                pre = rows[i - 1][1]
                if insn != PSEUDO_INSN and mnem != insn:
                    continue
                if pre["X"] is None or post["X"] is None:
                    continue
                same = pre["X"] == post["X"]
                if same == (pc.clauses[0].kind == SAME):
                    want.append(i)
            assert got == want

    @settings(max_examples=40)
    @given(rows_strategy, rows_strategy)
    def test_commutes_with_concatenation(self, first, second):
        pc = make_partitions(CandidateSignal("S", 1))[3]
        whole = TraceSet((trace_of(first), trace_of(second)), SPACE)
        parts = [slice(TraceSet((trace_of(r),), SPACE), "a", pc)["a"] for r in (first, second)]
        got = slice(whole, "a", pc)["a"]
        assert [(o.pre_values, o.post_values) for o in got] == [
            (o.pre_values, o.post_values) for p in parts for o in p
        ]

    def test_invalid_signal_gives_empty_slice(self):
        ts = TraceSet((trace_of([("a", {"S": None, "T": 0, "X": 0})] * 5),), SPACE)
        for pc in make_partitions(CandidateSignal("S", 1)):
            assert slice(ts, PSEUDO_INSN, pc) == {"a": []}

    def test_far_jump_loads_new_cs(self, x86_unpacked):
        pc = parse_precondition("not(CS==orig(CS))")
        got = [(o.trace_index, o.event_index) for o in slice(x86_unpacked, "jmp_far", pc)["osA"]]
        want = []
        for ti, tr in enumerate(x86_unpacked.traces):
            if tr.origin_label != "osA":
                continue
            for i in range(1, len(tr.events)):
                a, b = tr.events[i - 1].valuation["CS"], tr.events[i].valuation["CS"]
                if tr.events[i].instruction == "jmp_far" and None not in (a, b) and a != b:
                    want.append((ti, i))
        assert got == want and want
