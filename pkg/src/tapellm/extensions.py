"""Character-counting subroutine and dependency-stack recogniser.

Both run as forward-phase states in micro fidelity on the scratch region of
Tape 5. The standalone functions below drive the same handlers on a minimal
configuration, so the function API and the machine share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .grammar import COMPLETE, INVALID, NEEDS_VERB, NOUN, VERB, Verdict, word_class
from .machine.tape import (
    BLANK, MACRO, MICRO, STACK_BOTTOM, Configuration, ControlState, CountingRequest, MachineError, Phase,
    RunOptions, StackRequest, Tape, TraceEvent, decode_ids, diff_event, encode_id,
)
from .tokeniser import Vocabulary, detokenise_bytes


class SpanNotFound(LookupError):
    pass


@dataclass(frozen=True)
class Span:
    start: int
    end: int  # exclusive

    def __len__(self) -> int:
        return self.end - self.start


# --- pure helpers -------------------------------------------------------------

def locate_span(ids: Sequence[int], word: str, vocab: Vocabulary) -> Span:
    """Smallest token range covering the leftmost occurrence of ``word``."""
    if not word:
        raise ValueError("word must be non-empty")
    target = word.encode("utf-8")
    offsets = []
    text = bytearray()
    for tid in ids:
        start = len(text)
        text += vocab.token_bytes(tid)
        offsets.append((start, len(text)))
    pos = bytes(text).find(target)
    if pos < 0:
        raise SpanNotFound(word)
    lo, hi = pos, pos + len(target)
    covering = [k for k, (a, b) in enumerate(offsets) if a < hi and b > lo]
    return Span(covering[0], covering[-1] + 1)


def _letter_byte(letter: str) -> int:
    data = letter.encode("utf-8")
    if len(data) != 1:
        raise ValueError(f"target letter must be a single-byte character, got {letter!r}")
    return data[0]


def _matches(cell, letter: int, case_sensitive: bool) -> bool:
    if not isinstance(cell, int):
        return False
    if case_sensitive:
        return cell == letter
    return bytes([cell]).lower() == bytes([letter]).lower()


def emit_count(count: int, vocab: Vocabulary) -> list[int]:
    """Decimal digit token ids for ``count``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    out = []
    for d in str(count):
        tid = vocab.ids.get(d.encode())
        if tid is None:
            raise MachineError(f"vocabulary has no digit token {d!r}")
        out.append(tid)
    return out


def completion_ids(text: str, vocab: Vocabulary) -> list[int]:
    data = text.encode("utf-8")
    if data in vocab.ids:
        return [vocab.ids[data]]
    return [vocab.ids.get(bytes([b]), vocab.unk) for b in data]


def _token_word(tid: int, vocab: Vocabulary) -> str:
    return vocab.token_bytes(tid).decode("utf-8", errors="replace").strip().lower()


def _ext_base(config: Configuration) -> int:
    if config.spec is None:
        return 0
    from .forward import layout_for

    return layout_for(config.spec).ext_base


# --- counting handlers ------------------------------------------------------------

def _go(config: Configuration, name: str, *reg, tapes: Sequence[Tape] = (), **changes) -> Configuration:
    for t in tapes:
        config = config.with_tape(t)
    return replace(config, state=ControlState.of(name, *reg), **changes)


def h_locate(config: Configuration) -> Configuration:
    req = config.options.counting
    ids = decode_ids(config.tape(2))
    try:
        span = locate_span(ids, req.word, config.vocab)
    except SpanNotFound:
        return _go(config, "q_fwd,1", ext_done=True)
    t5 = config.tape(5).seek(_ext_base(config))
    return _go(config, "q_detok,internal", tuple(ids[span.start:span.end]), b"", 0, tapes=[t5])


def h_detok_internal(config: Configuration) -> Configuration:
    remaining, pending, written = config.state.reg
    while not pending and remaining:
        pending = config.vocab.token_bytes(remaining[0])
        remaining = remaining[1:]
    if not pending:
        return _go(config, "q_count,rewind", written)
    t5 = config.tape(5).write(pending[0]).move(1)
    return _go(config, "q_detok,internal", remaining, pending[1:], written + 1, tapes=[t5])


def h_count_rewind(config: Configuration) -> Configuration:
    (n,) = config.state.reg
    if n > 0:
        return _go(config, "q_count,rewind", n - 1, tapes=[config.tape(5).move(-1)])
    return _go(config, "q_count", 0)


def h_count(config: Configuration) -> Configuration:
    (count,) = config.state.reg
    req = config.options.counting
    t5 = config.tape(5)
    cell = t5.read()
    if cell == BLANK:
        return _go(config, "q_count,store", count, encode_id(count))
    if _matches(cell, _letter_byte(req.letter), req.case_sensitive):
        count += 1
    return _go(config, "q_count", count, tapes=[t5.move(1)])


def h_count_store(config: Configuration) -> Configuration:
    count, pending = config.state.reg
    if not pending:
        return _go(config, "q_emit,count", count)
    t5 = config.tape(5).write(pending[0]).move(1)
    return _go(config, "q_count,store", count, pending[1:], tapes=[t5])


def _take_forced(config: Configuration) -> Configuration:
    if not config.forced:
        return _go(config, "q_fwd,1")
    return _go(config, "q_select,max", config.forced[0], "forced", forced=config.forced[1:])


def h_emit_count(config: Configuration) -> Configuration:
    if config.state.reg:
        (count,) = config.state.reg
        config = replace(config, forced=tuple(emit_count(count, config.vocab)) + config.forced, ext_done=True)
    return _take_forced(config)


# --- stack handlers -----------------------------------------------------------------

FRAME_PREFIX = "F"


def frame_cell(noun_id: int, pos: int) -> str:
    return f"{FRAME_PREFIX}:{noun_id}:{pos}"


def parse_frame(cell) -> tuple[int, int]:
    if not isinstance(cell, str) or not cell.startswith(FRAME_PREFIX + ":"):
        raise MachineError(f"not a stack frame: {cell!r}")
    _, noun, pos = cell.split(":")
    return int(noun), int(pos)


def _classes(config: Configuration) -> Mapping[str, str]:
    return config.options.stack.classes


def h_stack_read(config: Configuration) -> Configuration:
    ids = tuple(decode_ids(config.tape(2)))
    t5 = config.tape(5).seek(_ext_base(config))
    return _go(config, "q_stack,init", ids, tapes=[t5])


def h_stack_init(config: Configuration) -> Configuration:
    (ids,) = config.state.reg
    return _go(config, "q_stack,next", ids, 0, tapes=[config.tape(5).write(STACK_BOTTOM)])


def h_stack_next(config: Configuration) -> Configuration:
    ids, i = config.state.reg
    if i >= len(ids):
        return _go(config, "q_check")
    cls = word_class(_token_word(ids[i], config.vocab), _classes(config))
    if cls == NOUN:
        return _go(config, "q_push", ids, i)
    if cls == VERB:
        return _go(config, "q_pop", ids, i)
    return _go(config, "q_stack,next", ids, i + 1)


def h_push(config: Configuration) -> Configuration:
    ids, i = config.state.reg
    return _go(config, "q_push,write", ids, i, tapes=[config.tape(5).move(1)])


def h_push_write(config: Configuration) -> Configuration:
    ids, i = config.state.reg
    t5 = config.tape(5).write(frame_cell(ids[i], i))
    return _go(config, "q_stack,next", ids, i + 1, tapes=[t5])


def h_pop(config: Configuration) -> Configuration:
    ids, i = config.state.reg
    t5 = config.tape(5)
    if t5.read() == STACK_BOTTOM:
        return _go(config, "q_emit,completion", INVALID, "underflow", None)
    t5 = t5.write(BLANK).move(-1)
    return _go(config, "q_stack,next", ids, i + 1, tapes=[t5])


def h_check(config: Configuration) -> Configuration:
    t5 = config.tape(5)
    top = t5.read()
    if top == STACK_BOTTOM:
        return _go(config, "q_emit,completion", COMPLETE, None, None)
    return _go(config, "q_check,below", top, tapes=[t5.move(-1)])


def h_check_below(config: Configuration) -> Configuration:
    (frame,) = config.state.reg
    if config.tape(5).read() == STACK_BOTTOM:
        return _go(config, "q_emit,completion", NEEDS_VERB, None, frame)
    return _go(config, "q_emit,completion", INVALID, "leftover", None)


def h_emit_completion(config: Configuration) -> Configuration:
    kind, _reason, frame = config.state.reg
    config = replace(config, ext_done=True)
    if kind == NEEDS_VERB:
        noun_id, _ = parse_frame(frame)
        text = config.options.stack.completions.get(_token_word(noun_id, config.vocab))
        if text:
            config = replace(config, forced=tuple(completion_ids(text, config.vocab)) + config.forced)
    else:
        # nothing to complete: end the answer
        config = replace(config, forced=(config.vocab.eos,) + config.forced)
    return _take_forced(config)


def completion_verdict(config: Configuration) -> Verdict:
    kind, reason, frame = config.state.reg
    noun = _token_word(parse_frame(frame)[0], config.vocab) if frame else None
    return Verdict(kind, noun=noun, reason=reason)


HANDLERS = {
    "q_locate": h_locate,
    "q_detok,internal": h_detok_internal,
    "q_count,rewind": h_count_rewind,
    "q_count": h_count,
    "q_count,store": h_count_store,
    "q_emit,count": h_emit_count,
    "q_stack,read": h_stack_read,
    "q_stack,init": h_stack_init,
    "q_stack,next": h_stack_next,
    "q_push": h_push,
    "q_push,write": h_push_write,
    "q_pop": h_pop,
    "q_check": h_check,
    "q_check,below": h_check_below,
    "q_emit,completion": h_emit_completion,
}

# states that read Tape 2 wholesale; everything else here is micro
MACRO_STATES = frozenset({"q_locate", "q_stack,read"})


# --- standalone drivers ---------------------------------------------------------------

def _bare_config(vocab: Vocabulary, options: RunOptions, ids: Sequence[int] = (), tape5: Tape | None = None) -> Configuration:
    from .machine.engine import blank_tapes

    tapes = list(blank_tapes())
    t2 = tapes[1]
    for tid in ids:
        t2 = t2.write_region(len(t2.cells), list(encode_id(tid)))
    tapes[1] = t2.seek(len(t2.cells))
    if tape5 is not None:
        tapes[4] = tape5
    return Configuration(state=ControlState.of("q_fwd,1"), tapes=tuple(tapes), vocab=vocab, spec=None, options=options)


def _run_until(config: Configuration, stop: set[str], trace: list | None) -> Configuration:
    while config.state.name not in stop:
        name = config.state.name
        nxt = HANDLERS[name](config)
        nxt = replace(nxt, step_count=config.step_count + 1)
        if trace is not None:
            trace.append(diff_event(config.step_count, config, nxt, MACRO if name in MACRO_STATES else MICRO,
                                    annotation="fwd"))
        config = nxt
    return config


def internal_detok(span_ids: Sequence[int], vocab: Vocabulary, tape5: Tape,
                   trace: list | None = None) -> tuple[Tape, Span]:
    """Write the span's characters one cell per step from the Tape 5 head."""
    cfg = _bare_config(vocab, RunOptions(), tape5=tape5)
    start = tape5.head
    cfg = replace(cfg, state=ControlState.of("q_detok,internal", tuple(span_ids), b"", 0))
    cfg = _run_until(cfg, {"q_count,rewind"}, trace)
    (n,) = cfg.state.reg
    return cfg.tape(5), Span(start, start + n)


def count_letter(tape5: Tape, chars: Span, letter: str, case_sensitive: bool = False,
                 trace: list | None = None) -> tuple[int, Tape]:
    """Left-to-right scan of ``chars``; the counter is then written in binary after them."""
    if tape5.head != chars.end:
        tape5 = tape5.seek(chars.end)
    opts = RunOptions(counting=CountingRequest("", letter, case_sensitive))
    cfg = _bare_config(Vocabulary({0: b"<bos>", 1: b"<eos>", 2: b"<unk>"},
                                  {"<bos>": 0, "<eos>": 1, "<unk>": 2}, byte_fallback=False), opts, tape5=tape5)
    cfg = replace(cfg, state=ControlState.of("q_count,rewind", len(chars)))
    cfg = _run_until(cfg, {"q_emit,count"}, trace)
    return cfg.state.reg[0], cfg.tape(5)


def count_subroutine(ids: Sequence[int], word: str, letter: str, vocab: Vocabulary, case_sensitive: bool = False,
                     trace: list | None = None) -> tuple[int, Configuration]:
    """q_locate -> q_detok,internal -> q_count -> q_count,store; returns the count."""
    opts = RunOptions(counting=CountingRequest(word, letter, case_sensitive))
    cfg = replace(_bare_config(vocab, opts, ids), state=ControlState.of("q_locate"))
    cfg = _run_until(cfg, {"q_emit,count", "q_fwd,1"}, trace)
    if cfg.state.name == "q_fwd,1":
        raise SpanNotFound(word)
    return cfg.state.reg[0], cfg


def recognise_centre_embedding(ids: Sequence[int], vocab: Vocabulary, grammar: Mapping[str, str],
                               trace: list | None = None) -> Verdict:
    """Push a frame per noun, pop per verb, then check what is left on the stack."""
    opts = RunOptions(stack=StackRequest(dict(grammar)))
    cfg = replace(_bare_config(vocab, opts, ids), state=ControlState.of("q_stack,read"))
    cfg = _run_until(cfg, {"q_emit,completion"}, trace)
    return completion_verdict(cfg)


# --- dependency stack as a value ------------------------------------------------------

UNDERFLOW = "underflow"


@dataclass(frozen=True)
class DependencyStack:
    """LIFO of frames on a Tape 5 region; the head rests on the top cell."""

    tape: Tape
    base: int

    @classmethod
    def new(cls, tape: Tape | None = None, base: int = 0) -> "DependencyStack":
        tape = (tape or Tape(5)).seek(base).write(STACK_BOTTOM)
        return cls(tape, base)

    @property
    def depth(self) -> int:
        return self.tape.head - self.base

    def push(self, noun_id: int, pos: int) -> "DependencyStack":
        return replace(self, tape=self.tape.move(1).write(frame_cell(noun_id, pos)))

    def pop(self) -> tuple["DependencyStack", tuple[int, int] | str]:
        top = self.tape.read()
        if top == STACK_BOTTOM:
            return self, UNDERFLOW
        return replace(self, tape=self.tape.write(BLANK).move(-1)), parse_frame(top)

    def frames(self) -> list[tuple[int, int]]:
        return [parse_frame(self.tape.at(i)) for i in range(self.base + 1, self.tape.head + 1)]

    def check(self) -> Verdict:
        """Resolved exactly when one frame (the outermost subject) is still open."""
        frames = self.frames()
        if not frames:
            return Verdict(COMPLETE)
        if len(frames) == 1:
            return Verdict(NEEDS_VERB, noun=str(frames[0][0]))
        return Verdict(INVALID, reason="leftover")


def stack_push(stack: DependencyStack, frame: tuple[int, int]) -> DependencyStack:
    return stack.push(*frame)


def stack_pop(stack: DependencyStack):
    return stack.pop()


def stack_check(stack: DependencyStack) -> Verdict:
    return stack.check()


# --- bounded-window baseline ----------------------------------------------------------

def baseline_classes(classes_seq: Sequence[str], window: int) -> Verdict:
    """Stackless contrast machine over the last ``window`` word classes.

    Inside the window each verb pairs with the nearest unmatched noun before it.
    Nothing outside the window is visible; the rule assumes one open subject
    lies there whenever the sentence is longer than the window. The verdict
    comes from the resulting count of open subjects.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    seen = list(classes_seq)
    truncated = len(seen) > window
    win = seen[-window:]
    open_nouns = 0
    loose_verbs = 0
    for c in win:
        if c == NOUN:
            open_nouns += 1
        elif c == VERB:
            if open_nouns:
                open_nouns -= 1
            else:
                loose_verbs += 1
    balance = (1 if truncated else 0) + open_nouns - loose_verbs
    if balance == 0:
        return Verdict(COMPLETE)
    if balance == 1:
        return Verdict(NEEDS_VERB)
    if balance < 0:
        return Verdict(INVALID, reason="underflow")
    return Verdict(INVALID, reason="leftover")


def bounded_window_baseline(ids: Sequence[int], window: int, grammar: Mapping[str, str],
                            vocab: Vocabulary) -> Verdict:
    return baseline_classes([word_class(_token_word(t, vocab), grammar) for t in ids], window)


def baseline_words(words: Sequence[str], window: int, grammar: Mapping[str, str]) -> Verdict:
    return baseline_classes([word_class(w, grammar) for w in words], window)


def detok_span(ids: Sequence[int], vocab: Vocabulary) -> bytes:
    return detokenise_bytes(ids, vocab)
