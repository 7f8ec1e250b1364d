import pytest

from tapellm.machine.tape import (
    BLANK, MICRO, MACRO, MalformedEncodingError, MalformedTapeError, MachineError, Phase, STATE_CATALOGUE, Tape,
    TapeAction, TraceEvent, decode_ids, dump_trace, load_trace, phase_of, read_token_id, validate_trace,
    write_token_id,
)


def cells(*ids):
    t = Tape(2)
    for i in ids:
        t = write_token_id(t, i)
    return list(t.cells)


class TestTokenIdCodec:
    def test_five(self):
        assert cells(5) == ["#", "1", "0", "1"]

    def test_zero(self):
        assert cells(0) == ["#", "0"]

    def test_concatenation(self):
        assert cells(2, 3) == ["#", "1", "0", "#", "1", "1"]

    def test_read_back(self):
        t = Tape(2, ("#", "1", "0", "1"))
        assert read_token_id(t, 0) == (5, 4)

    def test_read_zero_then_stop(self):
        assert read_token_id(Tape(2, ("#", "0", "#", "1")), 0) == (0, 2)

    def test_missing_delimiter(self):
        with pytest.raises(MalformedEncodingError):
            read_token_id(Tape(2, ("1", "0", "1")), 0)

    def test_empty_digit_run(self):
        with pytest.raises(MalformedEncodingError):
            read_token_id(Tape(2, ("#", "#", "1")), 0)

    def test_decode_many(self):
        t = Tape(2)
        for i in (0, 7, 300, 1):
            t = write_token_id(t, i)
        assert decode_ids(t) == [0, 7, 300, 1]


class TestTape:
    def test_reads_blank_past_end(self):
        assert Tape(5).at(10) == BLANK

    def test_write_is_persistent(self):
        t = Tape(5)
        t2 = t.write(3)
        assert t.cells == () and t2.cells == (3,)

    def test_alphabet_enforced(self):
        with pytest.raises(MalformedTapeError):
            Tape(2).write("x")
        with pytest.raises(MalformedTapeError):
            Tape(1).write(300)

    def test_head_cannot_leave_cell_zero(self):
        with pytest.raises(MachineError):
            Tape(5).move(-1)

    def test_trailing_blanks_not_stored(self):
        assert Tape(5).write(1).move(1).write(BLANK).move(-1).write(BLANK).cells == ()


class TestStates:
    def test_phases_disjoint(self):
        seen = set()
        for names in STATE_CATALOGUE.values():
            assert not (seen & names)
            seen |= names

    def test_phase_lookup(self):
        assert phase_of("q_select,scan") is Phase.SELECT
        assert phase_of("q_count") is Phase.FWD

    def test_unknown_state(self):
        with pytest.raises(MachineError):
            phase_of("q_nowhere")


def _event(step, moves=(0,) * 7, written=(0,) * 7, before="q_emit", after="q_emit", fidelity=MICRO):
    acts = tuple(TapeAction(i + 1, BLANK, BLANK, moves[i], written[i]) for i in range(7))
    return TraceEvent(step, before, after, acts, fidelity)


class TestValidateTrace:
    def test_clean(self):
        assert validate_trace([_event(0)]) == []

    def test_head_jump(self):
        v = validate_trace([_event(0, moves=(0, 2, 0, 0, 0, 0, 0))])
        assert [x.kind for x in v] == ["head-jump"]

    def test_read_only_write(self):
        v = validate_trace([_event(0, written=(0, 0, 1, 0, 0, 0, 0))])
        assert [x.kind for x in v] == ["read-only"]

    def test_read_only_holds_in_macro_too(self):
        v = validate_trace([_event(0, written=(0, 0, 0, 5, 0, 0, 0), fidelity=MACRO)])
        assert [x.kind for x in v] == ["read-only"]

    def test_macro_may_write_many(self):
        assert validate_trace([_event(0, written=(0, 0, 0, 0, 9, 0, 0), moves=(0, 0, 0, 0, 40, 0, 0),
                                      fidelity=MACRO)]) == []

    def test_leaving_halt(self):
        v = validate_trace([_event(0, before="q_halt", after="q_emit")])
        assert [x.kind for x in v] == ["halt-exit"]


def test_trace_jsonl_round_trip(tmp_path):
    evs = [_event(0), _event(1, moves=(1, 0, 0, 0, 0, 0, 0))]
    p = tmp_path / "t.jsonl"
    assert dump_trace(evs, p) == 2
    assert load_trace(p) == evs
