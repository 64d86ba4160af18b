from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlmine.errors import ParseError, UnknownSignalError
from ctrlmine.signal_space import parse_space
from ctrlmine.trace_model import (
    SignalId,
    SignalKind,
    Trace,
    TraceEvent,
    TraceSet,
    compute_derived,
    dumps_archive,
    fits,
    loads_archive,
    merge_trace_sets,
    orig_name,
    root_signal,
    strip_orig,
    value_of,
)

SPACE = parse_space(
    """
    REG EFL 32
    REG CR0 32
    REG CS 16
    REG TR 80
    FIELD EFL_13 EFL 13:13
    FIELD CR0_0 CR0 0:0
    FIELD IOPL EFL 12:13
    DPL CS 13:14
    """
)

EFL = SignalId("EFL")
EFL_13 = SignalId("EFL_13", SignalKind.BIT, EFL, (13, 13))
CR0_0 = SignalId("CR0_0", SignalKind.BIT, SignalId("CR0"), (0, 0))
CS_13 = SignalId("CS_13", SignalKind.BIT, SignalId("CS"), (13, 13))


def ev(insn="nop", index=0, **vals):
    base = {"EFL": 0, "CR0": 0, "CS": 0, "TR": b"\x00" * 10}
    base.update(vals)
    return TraceEvent(insn, base, index)


class TestSignalId:
    def test_register_has_no_parent(self):
        with pytest.raises(ValueError):
            SignalId("X", SignalKind.REGISTER, EFL)

    def test_bit_must_be_one_wide(self):
        with pytest.raises(ValueError):
            SignalId("B", SignalKind.BIT, EFL, (1, 2))

    def test_field_at_least_two_wide(self):
        with pytest.raises(ValueError):
            SignalId("F", SignalKind.FIELD, EFL, (3, 3))

    def test_orig_cannot_wrap_orig(self):
        with pytest.raises(ValueError):
            SignalId("x", SignalKind.ORIG, EFL.orig())

    def test_orig_name_helpers(self):
        assert EFL.orig().name == "orig(EFL)"
        assert strip_orig("orig(EFL)") == "EFL"
        assert strip_orig("EFL") == "EFL"
        assert root_signal("orig(D_CR0_0)") == "CR0_0"
        assert root_signal("D_SMM") == "SMM"

    def test_fits(self):
        assert fits(3, 2) and not fits(4, 2)
        assert fits(None, 1)
        assert fits(b"\x01" * 10, 80) and not fits(b"\x01" * 11, 80)


class TestValueOf:
    def test_bit_extraction(self):
        assert value_of(ev(EFL=0x2202), EFL_13) == 1

    def test_invalid_propagates(self):
        assert value_of(ev(CS=None), CS_13) is None

    def test_cr0_pe(self):
        assert value_of(ev(CR0=0x1), CR0_0) == 1

    def test_orig_needs_previous_event(self):
        assert value_of(ev(EFL=5), EFL.orig()) is None
        assert value_of(ev(EFL=5), EFL.orig(), prev=ev(EFL=9)) == 9

    def test_unknown_signal(self):
        with pytest.raises(UnknownSignalError):
            value_of(TraceEvent("nop", {}), SignalId("GHOST"))


class TestComputeDerived:
    def test_unchanged_bit_delta_is_one(self):
        a, b = ev(CR0=1), ev(CR0=1, index=1)
        assert compute_derived(b, a, SPACE).valuation["D_CR0_0"] == 1

    def test_first_event_deltas_invalid(self):
        out = compute_derived(ev(CR0=1), None, SPACE)
        assert all(out.valuation[s.name] is None for s in SPACE.delta_signals())

    def test_dpl_field(self):
        # 0x6000 = bits 13 and 14 set
        assert compute_derived(ev(CS=0x6000), None, SPACE).valuation["CS_DPL"] == 3

    def test_two_bit_field(self):
        assert compute_derived(ev(EFL=0x3000), None, SPACE).valuation["IOPL"] == 3

    def test_wide_register_kept_as_bytes(self):
        tr = bytes(range(10))
        assert compute_derived(ev(TR=tr), None, SPACE).valuation["TR"] == tr

    def test_idempotent(self):
        a = compute_derived(ev(EFL=0x2000), None, SPACE)
        b = compute_derived(ev(EFL=0, index=1), ev(EFL=0x2000), SPACE)
        assert compute_derived(b, a, SPACE) == b

    @given(st.integers(0, 1), st.integers(0, 1))
    def test_bit_delta_range(self, before, after):
        d = compute_derived(ev(CR0=after, index=1), ev(CR0=before), SPACE).valuation["D_CR0_0"]
        assert d == 1 if before == after else d in (0, 2)

    @given(st.dictionaries(st.sampled_from(["EFL", "CR0", "CS"]), st.integers(0, 0xFFFF)))
    def test_order_independent(self, vals):
        base = {"EFL": 0, "CR0": 0, "CS": 0, "TR": b"\x00"}
        base.update(vals)
        forward = TraceEvent("nop", base)
        backward = TraceEvent("nop", dict(reversed(list(base.items()))))
        assert compute_derived(forward, None, SPACE).valuation == compute_derived(backward, None, SPACE).valuation


class TestTraceTypes:
    def test_indices_consecutive(self):
        with pytest.raises(ValueError):
            Trace((ev(index=0), ev(index=2)), "x")

    def test_empty_mnemonic_rejected(self):
        with pytest.raises(ValueError):
            TraceEvent("", {})

    def test_event_count_and_labels(self):
        ts = TraceSet((Trace((ev(),), "a"), Trace((ev(), ev(index=1)), "b")), SPACE)
        assert ts.event_count == 3
        assert ts.labels == ("a", "b")
        assert len(ts.by_label("b")) == 1


values = st.one_of(st.none(), st.integers(0, 0xFFFF))


@st.composite
def traces(draw):
    n = draw(st.integers(1, 8))
    events = []
    for i in range(n):
        vals = {r: draw(values) for r in ("EFL", "CR0", "CS")}
        vals["TR"] = draw(st.one_of(st.none(), st.binary(min_size=10, max_size=10)))
        events.append(TraceEvent(draw(st.sampled_from(["mov", "jmp_far", "in"])), vals, i))
    return Trace(tuple(events), draw(st.sampled_from(["osA", "baremetal"])))


class TestArchive:
    @settings(max_examples=50)
    @given(st.lists(traces(), min_size=1, max_size=3))
    def test_round_trip(self, ts):
        original = TraceSet(tuple(ts), SPACE)
        back = loads_archive(dumps_archive(original))
        assert back.traces == original.traces
        assert back.signal_space.to_config() == SPACE.to_config()

    def test_rejects_foreign_format(self):
        with pytest.raises(ParseError):
            loads_archive('{"format": "other"}')
        with pytest.raises(ParseError):
            loads_archive("{not json")

    def test_merge_requires_same_space(self):
        a = TraceSet((Trace((ev(),), "a"),), SPACE)
        b = TraceSet((Trace((ev(),), "b"),), parse_space("REG EFL 32"))
        assert merge_trace_sets([a, a]).event_count == 2
        with pytest.raises(ValueError):
            merge_trace_sets([a, b])


def test_orig_name():
    assert orig_name("CPL") == "orig(CPL)"
