"""Transition function and run loop.

``step`` maps a configuration to its successor and a trace event; it never
mutates its argument. Tokenisation, selection, emission and detokenisation are
micro steps. The neural forward states are macro steps that each stand for one
composite operation (embedding, one attention layer, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from .tape import (
    BLANK, MACRO, MICRO, N_TAPES, Q0, STATE_CATALOGUE, Configuration, ContextWindowError, ControlState,
    HaltedError, MachineError, Phase, RunOptions, Tape, TraceEvent, decode_ids, diff_event, encode_id,
)


def blank_tapes() -> tuple[Tape, ...]:
    return tuple(Tape(i) for i in range(1, N_TAPES + 1))


def _prompt_bytes(prompt: str | bytes) -> bytes:
    if isinstance(prompt, bytes):
        return prompt
    try:
        return prompt.encode("utf-8")
    except UnicodeEncodeError as e:
        raise ValueError(f"prompt is not encodable as UTF-8 at character offset {e.start}") from None


def init_configuration(prompt, tokeniser, spec, options: RunOptions = RunOptions(), rand=None) -> Configuration:
    """Initial configuration in q0.

    ``prompt`` is text (tokenised on the machine, ``<bos>`` first) or a list of
    token ids written to Tape 2 verbatim. ``tokeniser`` is a Tokeniser, or a bare
    Vocabulary when the prompt is given as ids.
    """
    from ..tokeniser import Tokeniser, Vocabulary, detokenise_bytes

    if isinstance(tokeniser, Tokeniser):
        vocab, tok = tokeniser.vocab, tokeniser
    elif isinstance(tokeniser, Vocabulary):
        vocab, tok = tokeniser, None
    else:
        raise TypeError("expected a Tokeniser or a Vocabulary")
    if spec is not None and max(vocab.entries) >= spec.vocab_size:
        raise MachineError(f"vocabulary id {max(vocab.entries)} outside the model's vocab_size {spec.vocab_size}")
    if options.decode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {options.decode!r}")
    if options.decode == "sample" and rand is None:
        raise ValueError("sampling needs a random tape")

    if isinstance(prompt, (str, bytes)):
        if tok is None:
            raise MachineError("text prompts need a tokeniser with merge rules")
        data = _prompt_bytes(prompt)
        reg = ((), (vocab.bos,), b"", None, False)
    else:
        ids = [int(i) for i in prompt]
        for pos, tid in enumerate(ids):
            if tid not in vocab.entries:
                raise MachineError(f"prompt token id {tid} at position {pos} is not in the vocabulary")
        data = detokenise_bytes(ids, vocab)
        reg = ((), tuple(ids), b"", None, True)

    tapes = list(blank_tapes())
    tapes[0] = Tape(1, tuple(data))
    tapes[2] = Tape(3, tok.tape_cells() if tok else vocab.tape_cells())
    if spec is not None:
        tapes[3] = Tape(4, spec.tape_cells())
    cfg = Configuration(Q0, tuple(tapes), vocab, spec, options, rand, tokeniser=tok)
    # the register is stashed for q0 -> q_tok,write
    return replace(cfg, state=ControlState(Phase.INIT, "q0", reg))


# --- tokenisation (micro) -------------------------------------------------------

def _tok_write(config: Configuration) -> Configuration:
    pending, queued, chunk, prev, done = config.state.reg
    if not pending and queued:
        pending, queued = encode_id(queued[0]), queued[1:]
    if pending:
        t2 = config.tape(2).write(pending[0]).move(1)
        state = ControlState.of("q_tok,write", pending[1:], queued, chunk, prev, done)
        return replace(config.with_tape(t2), state=state)
    if done:
        return replace(config, state=ControlState.of("q_tok,final"))
    return replace(config, state=ControlState.of("q_tok,read", chunk, prev))


def _tok_read(config: Configuration) -> Configuration:
    """Consume one byte of Tape 1; a finished chunk goes through BPE and is queued."""
    from ..tokeniser import starts_chunk

    chunk, prev = config.state.reg
    t1 = config.tape(1)
    c = t1.read()
    if c == BLANK:
        ids = tuple(config.tokeniser.chunk_ids(chunk)) if chunk else ()
        return replace(config, state=ControlState.of("q_tok,write", (), ids, b"", prev, True))
    if starts_chunk(prev, c) and chunk:
        ids = tuple(config.tokeniser.chunk_ids(chunk))
        state = ControlState.of("q_tok,write", (), ids, bytes([c]), c, False)
        return replace(config.with_tape(t1.move(1)), state=state)
    return replace(config.with_tape(t1.move(1)), state=ControlState.of("q_tok,read", chunk + bytes([c]), c))


def _q0(config: Configuration) -> Configuration:
    reg = config.state.reg or ((), (config.vocab.bos,), b"", None, False)
    return replace(config, state=ControlState.of("q_tok,write", *reg))


def _tok_final(config: Configuration) -> Configuration:
    return replace(config, state=ControlState.of("q_fwd,1"))


# --- round dispatcher -------------------------------------------------------------

def _round_route(config: Configuration) -> str:
    """Which branch q_fwd,1 takes: forced, counting, stack or neural."""
    if config.forced:
        return "forced"
    if not config.ext_done:
        if config.options.counting is not None:
            return "counting"
        if config.options.stack is not None:
            return "stack"
    return "neural"


def _fwd1(config: Configuration) -> Configuration:
    from ..forward import fwd_start

    route = _round_route(config)
    if route == "forced":
        return replace(config, state=ControlState.of("q_emit,count"))
    if route == "counting":
        return replace(config, state=ControlState.of("q_locate"))
    if route == "stack":
        return replace(config, state=ControlState.of("q_stack,read"))
    return fwd_start(config)


def pending_context_violation(config: Configuration) -> int | None:
    """Position that would overflow L_max if the next step starts a forward pass."""
    if config.state.name != "q_fwd,1" or config.spec is None or _round_route(config) != "neural":
        return None
    newest = len(decode_ids(config.tape(2))) - 1
    return newest if newest >= config.spec.l_max else None


def _handlers() -> dict:
    from .. import decode, extensions, forward

    table = {"q0": _q0, "q_tok,write": _tok_write, "q_tok,read": _tok_read, "q_tok,final": _tok_final,
             "q_fwd,1": _fwd1}
    for part in (forward.HANDLERS, decode.HANDLERS, extensions.HANDLERS):
        overlap = table.keys() & part.keys()
        if overlap:
            raise MachineError(f"states handled twice: {sorted(overlap)}")
        table.update(part)
    return table


_TABLE: dict | None = None


def handlers() -> dict:
    global _TABLE
    if _TABLE is None:
        _TABLE = _handlers()
    return _TABLE


def check_state_partition() -> dict[Phase, frozenset[str]]:
    """Every handled state lies in exactly one phase and every non-halt state has a handler."""
    table = handlers()
    seen: dict[str, Phase] = {}
    for phase, names in STATE_CATALOGUE.items():
        for n in names:
            if n in seen:
                raise MachineError(f"state {n} is in phases {seen[n].value} and {phase.value}")
            seen[n] = phase
    missing = [n for n in seen if n not in table and seen[n] is not Phase.HALT]
    extra = [n for n in table if n not in seen]
    if missing or extra:
        raise MachineError(f"catalogue mismatch: unhandled {missing}, uncatalogued {extra}")
    return dict(STATE_CATALOGUE)


def _macro_step(before: Configuration, after: Configuration) -> bool:
    from ..extensions import MACRO_STATES
    from ..forward import HANDLERS as FWD

    name = before.state.name
    if name in FWD or name in MACRO_STATES:
        return True
    return name == "q_fwd,1" and after.state.name == "q_fwd,embed"


def _info(before: Configuration, after: Configuration) -> dict | None:
    name = before.state.name
    if name == "q_select,max":
        from ..decode import selection_info

        return selection_info(before)
    if name == "q_emit,completion":
        kind, reason, frame = before.state.reg
        forced = list(after.forced)
        if after.state.name == "q_select,max":
            forced.insert(0, after.state.reg[0])
        return {"verdict": kind, "reason": reason, "frame": frame, "forced": forced}
    if name == "q_emit,count" and before.state.reg:
        return {"count": before.state.reg[0]}
    if name == "q_fwd,out" and after.state.phase is Phase.SELECT:
        return {"saturated": after.saturated}
    return None


def step(config: Configuration) -> tuple[Configuration, TraceEvent]:
    if config.state.phase is Phase.HALT:
        raise HaltedError("the machine has halted; q_halt has no successor")
    handler = handlers().get(config.state.name)
    if handler is None:
        raise MachineError(f"no transition from state {config.state.name}")
    nxt = handler(config)
    nxt = replace(nxt, step_count=config.step_count + 1)
    fidelity = MACRO if _macro_step(config, nxt) else MICRO
    ev = diff_event(config.step_count, config, nxt, fidelity, annotation=config.state.phase.value,
                    info=_info(config, nxt))
    return nxt, ev


# --- run loop ----------------------------------------------------------------------

@dataclass
class RunResult:
    config: Configuration
    trace: list[TraceEvent] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return type(self).__name__

    @property
    def output_text(self) -> str:
        return self.config.output_text

    @property
    def output_bytes(self) -> bytes:
        return self.config.output_bytes


class Halted(RunResult):
    pass


class StepLimit(RunResult):
    pass


class TokenLimit(RunResult):
    pass


@dataclass
class ContextViolation(RunResult):
    position: int = 0
    l_max: int = 0


class StepError(MachineError):
    """A transition failed; carries the configuration it failed on and the trace so far."""

    def __init__(self, cause: Exception, config: Configuration, trace: Sequence[TraceEvent]):
        super().__init__(f"step {config.step_count} in {config.state.name}: {cause}")
        self.cause = cause
        self.config = config
        self.trace = list(trace)


def run(config: Configuration, max_steps: int = 10**7, max_tokens: int | None = None,
        record: bool = True) -> RunResult:
    """Step until halt, a step or token budget, or a context-window overflow."""
    trace: list[TraceEvent] = []
    while True:
        if config.state.phase is Phase.HALT:
            return Halted(config, trace)
        if config.step_count >= max_steps:
            return StepLimit(config, trace)
        if config.state.name == "q_fwd,1":
            if max_tokens is not None and config.generated >= max_tokens:
                return TokenLimit(config, trace)
            pos = pending_context_violation(config)
            if pos is not None:
                return ContextViolation(config, trace, pos, config.spec.l_max)
        try:
            config, ev = step(config)
        except ContextWindowError as e:
            return ContextViolation(config, trace, e.position, e.l_max)
        except MachineError as e:
            raise StepError(e, config, trace) from e
        if record:
            trace.append(ev)
