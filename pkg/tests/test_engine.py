from dataclasses import replace

import pytest

from tapellm import numerics as nx
from tapellm.machine.engine import (
    ContextViolation, Halted, StepError, StepLimit, TokenLimit, check_state_partition, init_configuration, run, step,
)
from tapellm.machine.tape import (
    ControlState, HaltedError, Phase, RunOptions, decode_ids, validate_trace,
)
from tapellm.model import generate_spec, zero_spec
from tapellm.oracle import oracle_probs
from tapellm.tokeniser import synthetic_vocab

from conftest import run_ids

PROMPT = "How many times does the letter 'r' appear in 'Strawberry'?"


def eos_model(vocab_size=3, l_max=8):
    """Zero network whose unembedding always favours <eos> (id 1)."""
    base = zero_spec(vocab_size=vocab_size, l_max=l_max)
    w_out = tuple(tuple(nx.ONE if j == 1 else 0 for j in range(vocab_size)) for _ in range(base.d_model))
    embed = tuple(tuple([nx.ONE] + [0] * (base.d_model - 1)) for _ in range(vocab_size))
    return replace(base, w_out=w_out, embed=embed)


def never_eos_model(vocab_size=4, l_max=8):
    base = zero_spec(vocab_size=vocab_size, l_max=l_max)
    w_out = tuple(tuple(nx.ONE if j == 3 else 0 for j in range(vocab_size)) for _ in range(base.d_model))
    embed = tuple(tuple([nx.ONE] + [0] * (base.d_model - 1)) for _ in range(vocab_size))
    return replace(base, w_out=w_out, embed=embed)


class TestInit:
    def test_empty_prompt(self, tok_b):
        spec = zero_spec(vocab_size=len(tok_b.vocab))
        cfg = init_configuration("", tok_b, spec)
        assert cfg.state.name == "q0"
        assert all(cfg.tape(i).cells == () for i in (1, 2, 5, 6, 7))

    def test_strawberry_prompt(self, tok_b):
        spec = zero_spec(vocab_size=len(tok_b.vocab))
        cfg = init_configuration(PROMPT, tok_b, spec)
        assert bytes(cfg.tape(1).cells).decode() == PROMPT
        assert all(cfg.tape(i).cells == () for i in (2, 5, 6, 7))
        assert cfg.tape(3).cells and cfg.tape(4).cells

    def test_abc(self, tok_b):
        cfg = init_configuration("abc", tok_b, zero_spec(vocab_size=len(tok_b.vocab)))
        assert len(cfg.tape(1)) == 3 and cfg.tape(1).head == 0

    def test_unencodable(self, tok_b):
        with pytest.raises(ValueError, match="offset 2"):
            init_configuration("ab\udc80", tok_b, zero_spec(vocab_size=len(tok_b.vocab)))

    def test_vocab_larger_than_model(self, tok_b):
        with pytest.raises(Exception, match="vocab_size"):
            init_configuration("a", tok_b, zero_spec(vocab_size=8))


def test_machine_tokenisation_matches_reference(tok_b):
    spec = zero_spec(vocab_size=len(tok_b.vocab))
    res = run(init_configuration(PROMPT, tok_b, spec), max_tokens=0)
    assert isinstance(res, TokenLimit)
    assert decode_ids(res.config.tape(2)) == [tok_b.vocab.bos] + tok_b.tokenise(PROMPT)
    assert validate_trace(res.trace) == []


class TestStep:
    def _at_emit(self, tid):
        spec = eos_model()
        cfg = init_configuration([0], synthetic_vocab(3), spec)
        return replace(cfg, state=ControlState.of("q_emit", tid, ()))

    def test_eos_halts_without_writes(self):
        nxt, ev = step(self._at_emit(1))
        assert nxt.state.name == "q_halt"
        assert all(a.written == 0 for a in ev.tapes)

    def test_other_id_goes_to_detok(self):
        nxt, _ = step(self._at_emit(2))
        assert nxt.state.phase is Phase.DETOK

    def test_halt_is_absorbing(self):
        halted, _ = step(self._at_emit(1))
        with pytest.raises(HaltedError):
            step(halted)

    def test_step_does_not_mutate(self):
        cfg = self._at_emit(2)
        snap = cfg.snapshot_json()
        step(cfg)
        assert cfg.snapshot_json() == snap


class TestRun:
    def test_immediate_eos(self):
        spec = eos_model()
        assert oracle_probs([0], spec)[1] == max(oracle_probs([0], spec))
        res = run(init_configuration([0], synthetic_vocab(3), spec))
        assert isinstance(res, Halted)
        assert res.config.token_ids() == [0, 1] and res.output_text == ""
        assert [ev.annotation for ev in res.trace].count("fwd") >= 1
        assert res.config.generated == 0

    def test_step_limit(self):
        res = run(init_configuration([0], synthetic_vocab(3), eos_model()), max_steps=1)
        assert isinstance(res, StepLimit) and len(res.trace) == 1

    def test_trace_length_is_step_count(self):
        res = run(init_configuration([0], synthetic_vocab(3), eos_model()))
        assert len(res.trace) == res.config.step_count
        assert [ev.step for ev in res.trace] == list(range(len(res.trace)))

    def test_token_limit(self):
        res = run_ids([0], never_eos_model(l_max=32), max_tokens=3)
        assert isinstance(res, TokenLimit) and res.config.generated == 3

    def test_context_violation_at_l_max(self):
        res = run_ids([0], never_eos_model(l_max=8), max_tokens=10)
        assert isinstance(res, ContextViolation)
        assert (res.position, res.l_max) == (8, 8)
        assert len(res.config.token_ids()) == 9

    def test_step_error_carries_partial_trace(self):
        spec = never_eos_model()
        cfg = init_configuration([0], synthetic_vocab(4), spec)
        cfg = replace(cfg, state=ControlState.of("q_select,draw"))  # no random tape
        with pytest.raises(StepError) as info:
            run(cfg)
        assert info.value.config.state.name == "q_select,draw"
        assert info.value.trace == []

    def test_greedy_matches_frozen_oracle(self, golden):
        from conftest import spec_of

        for g in golden["greedy"]:
            spec = spec_of(g["case"])
            res = run_ids(g["prompt"], spec, max_tokens=6)
            cont = res.config.token_ids()[len(g["prompt"]):]
            assert cont == g["continuation"], g["case"]
            assert validate_trace(res.trace) == []

    def test_deterministic(self):
        spec = generate_spec(9, vocab_size=10)
        a = run_ids([0, 4], spec)
        b = run_ids([0, 4], spec)
        assert a.config.snapshot_json() == b.config.snapshot_json()
        assert [e.to_json() for e in a.trace] == [e.to_json() for e in b.trace]


def test_state_partition():
    cat = check_state_partition()
    assert set(cat) == set(Phase)
