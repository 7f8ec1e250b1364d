"""Tapes, control states, configurations and trace events."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

BLANK = "_"
DELIM = "#"
STACK_BOTTOM = "$"

N_TAPES = 7
READ_ONLY_TAPES = (3, 4)


class MachineError(Exception):
    """Base class for errors raised by the machine."""


class MalformedTapeError(MachineError):
    def __init__(self, tape: int, cell: int, symbol: Any, why: str = "symbol outside the tape alphabet"):
        super().__init__(f"tape {tape}, cell {cell}: {why} ({symbol!r})")
        self.tape = tape
        self.cell = cell
        self.symbol = symbol


class MalformedEncodingError(MachineError):
    def __init__(self, cell: int, why: str):
        super().__init__(f"malformed token-id encoding at cell {cell}: {why}")
        self.cell = cell


class HaltedError(MachineError):
    """Raised when stepping a configuration that is already in q_halt."""


class ContextWindowError(MachineError):
    def __init__(self, position: int, l_max: int):
        super().__init__(f"context window violation: position {position} >= L_max {l_max}")
        self.position = position
        self.l_max = l_max


class Alphabet(str, enum.Enum):
    CHAR_BYTES = "char-bytes"
    BINARY = "binary-with-delimiter"
    VOCAB = "vocab-entries"
    PARAMS = "parameter-cells"
    WORK = "work-cells"
    PROBS = "probability-cells"


TAPE_ALPHABETS = {
    1: Alphabet.CHAR_BYTES,
    2: Alphabet.BINARY,
    3: Alphabet.VOCAB,
    4: Alphabet.PARAMS,
    5: Alphabet.WORK,
    6: Alphabet.PROBS,
    7: Alphabet.CHAR_BYTES,
}


def symbol_ok(alphabet: Alphabet, sym: Any) -> bool:
    if sym == BLANK:
        return True
    if alphabet is Alphabet.CHAR_BYTES:
        return type(sym) is int and 0 <= sym <= 255
    if alphabet is Alphabet.BINARY:
        return sym in (DELIM, "0", "1")
    if alphabet is Alphabet.PROBS:
        return sym == DELIM or (type(sym) is int and sym >= 0)
    if alphabet is Alphabet.WORK:
        return type(sym) in (int, str)
    return True


@dataclass(frozen=True)
class Tape:
    """One tape: immutable cell tuple, head index and blank symbol.

    Cells past the written content read as blank; trailing blanks are never
    stored, so reading or blank-writing beyond the end keeps tapes equal.
    """

    index: int
    cells: tuple = ()
    head: int = 0
    blank: str = BLANK

    @property
    def alphabet(self) -> Alphabet:
        return TAPE_ALPHABETS[self.index]

    def __len__(self) -> int:
        return len(self.cells)

    def at(self, i: int) -> Any:
        if i < 0:
            raise MachineError(f"tape {self.index}: negative cell index {i}")
        return self.cells[i] if i < len(self.cells) else self.blank

    def read(self) -> Any:
        return self.at(self.head)

    def _check(self, i: int, sym: Any) -> None:
        if not symbol_ok(self.alphabet, sym):
            raise MalformedTapeError(self.index, i, sym)

    def write(self, sym: Any) -> "Tape":
        return self.write_at(self.head, sym)

    def write_at(self, i: int, sym: Any) -> "Tape":
        self._check(i, sym)
        cells = list(self.cells)
        if i >= len(cells):
            cells.extend([self.blank] * (i + 1 - len(cells)))
        cells[i] = sym
        return replace(self, cells=_strip(cells, self.blank))

    def write_region(self, start: int, values: Sequence[Any]) -> "Tape":
        for k, v in enumerate(values):
            self._check(start + k, v)
        cells = list(self.cells)
        end = start + len(values)
        if end > len(cells):
            cells.extend([self.blank] * (end - len(cells)))
        cells[start:end] = values
        return replace(self, cells=_strip(cells, self.blank))

    def region(self, start: int, length: int) -> list:
        return [self.at(i) for i in range(start, start + length)]

    def move(self, delta: int) -> "Tape":
        pos = self.head + delta
        if pos < 0:
            raise MachineError(f"tape {self.index}: head moved left of cell 0")
        return replace(self, head=pos)

    def seek(self, pos: int) -> "Tape":
        return self.move(pos - self.head)

    def to_json(self) -> dict:
        return {"index": self.index, "alphabet": self.alphabet.value, "head": self.head,
                "blank": self.blank, "cells": [_jsonable(c) for c in self.cells]}


def _strip(cells: list, blank: str) -> tuple:
    while cells and cells[-1] == blank:
        cells.pop()
    return tuple(cells)


def _jsonable(sym: Any) -> Any:
    if isinstance(sym, (int, str)) or sym is None:
        return sym
    if isinstance(sym, (tuple, list)):
        return [_jsonable(s) for s in sym]
    return str(sym)


# --- token ids on Tape 2 -----------------------------------------------------

def encode_id(token_id: int) -> tuple[str, ...]:
    """``#`` followed by the minimal binary expansion, MSB first."""
    if token_id < 0:
        raise ValueError(f"token id must be non-negative, got {token_id}")
    return (DELIM, *format(token_id, "b"))


def write_token_id(tape: Tape, token_id: int) -> Tape:
    """Append the encoding of ``token_id`` at the head, leaving the head past it."""
    if tape.alphabet is not Alphabet.BINARY:
        raise MachineError(f"tape {tape.index} does not use the binary-with-delimiter alphabet")
    for sym in encode_id(token_id):
        tape = tape.write(sym).move(1)
    return tape


def read_token_id(tape: Tape, at: int) -> tuple[int, int]:
    """Decode the id whose ``#`` sits at ``at``; returns (id, index past it)."""
    if tape.at(at) != DELIM:
        raise MalformedEncodingError(at, f"expected {DELIM!r}, found {tape.at(at)!r}")
    i = at + 1
    digits = []
    while tape.at(i) in ("0", "1"):
        digits.append(tape.at(i))
        i += 1
    if not digits:
        raise MalformedEncodingError(at, "empty digit run")
    return int("".join(digits), 2), i


def decode_ids(tape: Tape) -> list[int]:
    ids = []
    i = 0
    while i < len(tape.cells):
        tid, i = read_token_id(tape, i)
        ids.append(tid)
    return ids


# --- control states ----------------------------------------------------------

class Phase(str, enum.Enum):
    INIT = "init"
    TOK = "tok"
    FWD = "fwd"
    SELECT = "select"
    EMIT = "emit"
    DETOK = "detok"
    HALT = "halt"


STATE_CATALOGUE: dict[Phase, frozenset[str]] = {
    Phase.INIT: frozenset({"q0"}),
    Phase.TOK: frozenset({"q_tok,write", "q_tok,read", "q_tok,final"}),
    Phase.FWD: frozenset({
        "q_fwd,1", "q_fwd,embed", "q_attn,weight", "q_attn,concat", "q_fwd,ffn", "q_fwd,out",
        # character-counting subroutine
        "q_locate", "q_detok,internal", "q_count,rewind", "q_count", "q_count,store", "q_emit,count",
        # dependency stack
        "q_stack,read", "q_stack,init", "q_stack,next", "q_push", "q_push,write", "q_pop",
        "q_check", "q_check,below", "q_emit,completion",
    }),
    Phase.SELECT: frozenset({"q_select,scan", "q_select,max", "q_select,draw", "q_select,cdf", "q_select,prune"}),
    Phase.EMIT: frozenset({"q_emit"}),
    Phase.DETOK: frozenset({"q_detok"}),
    Phase.HALT: frozenset({"q_halt"}),
}


def phase_of(name: str) -> Phase:
    owners = [p for p, names in STATE_CATALOGUE.items() if name in names]
    if len(owners) != 1:
        raise MachineError(f"state {name!r} belongs to {len(owners)} phases")
    return owners[0]


@dataclass(frozen=True)
class ControlState:
    """Finite-control state: phase, state name and phase-local registers."""

    phase: Phase
    name: str
    reg: tuple = ()

    def __post_init__(self) -> None:
        if self.name not in STATE_CATALOGUE[self.phase]:
            raise MachineError(f"state {self.name!r} is not in phase {self.phase.value}")

    @classmethod
    def of(cls, name: str, *reg: Any) -> "ControlState":
        return cls(phase_of(name), name, tuple(reg))

    @property
    def sub_id(self) -> tuple:
        return (self.name, *self.reg)

    def __str__(self) -> str:
        return self.name


Q0 = ControlState(Phase.INIT, "q0")
Q_HALT = ControlState(Phase.HALT, "q_halt")


# --- run options and configurations -----------------------------------------

@dataclass(frozen=True)
class CountingRequest:
    word: str
    letter: str
    case_sensitive: bool = False


@dataclass(frozen=True)
class StackRequest:
    """Word classes by lowercased token text plus noun -> completion text."""

    classes: Mapping[str, str]
    completions: Mapping[str, str] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((tuple(sorted(self.classes.items())), tuple(sorted(self.completions.items()))))


@dataclass(frozen=True)
class RunOptions:
    decode: str = "greedy"  # greedy | sample
    kv_cache: bool = True
    sample_width: int = 32
    counting: CountingRequest | None = None
    stack: StackRequest | None = None


@dataclass(frozen=True)
class Configuration:
    """Instantaneous description: control state plus all seven tapes.

    ``vocab`` and ``spec`` are the decoded views of the read-only tapes 3 and 4.
    ``forced`` holds token ids a subroutine has committed to emit; ``generated``
    counts emitted non-``<eos>`` tokens.
    """

    state: ControlState
    tapes: tuple[Tape, ...]
    vocab: Any
    spec: Any
    options: RunOptions = RunOptions()
    rand: Any = None
    step_count: int = 0
    generated: int = 0
    forced: tuple[int, ...] = ()
    ext_done: bool = False
    saturated: bool = False
    tokeniser: Any = None

    def tape(self, index: int) -> Tape:
        return self.tapes[index - 1]

    def with_tape(self, tape: Tape) -> "Configuration":
        tapes = list(self.tapes)
        tapes[tape.index - 1] = tape
        return replace(self, tapes=tuple(tapes))

    @property
    def output_bytes(self) -> bytes:
        return bytes(self.tape(7).cells)

    @property
    def output_text(self) -> str:
        return self.output_bytes.decode("utf-8", errors="replace")

    def token_ids(self) -> list[int]:
        return decode_ids(self.tape(2))

    def prob_rows(self) -> list[list[int]]:
        return split_rows(self.tape(6))

    def snapshot(self) -> dict:
        return {
            "state": self.state.name,
            "reg": _jsonable(self.state.reg),
            "step_count": self.step_count,
            "generated": self.generated,
            "saturated": self.saturated,
            "tapes": [t.to_json() for t in self.tapes],
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)


def split_rows(tape: Tape) -> list[list[int]]:
    """Split a Tape 6 image ``# p.. # p..`` into rows."""
    rows: list[list[int]] = []
    for c in tape.cells:
        if c == DELIM:
            rows.append([])
        elif rows:
            rows[-1].append(c)
    return rows


# --- trace events -------------------------------------------------------------

MICRO = "micro"
MACRO = "macro"


@dataclass(frozen=True)
class TapeAction:
    """What one step did to one tape; ``written`` counts cells changed."""

    index: int
    read: Any
    write: Any
    move: int
    written: int = 0

    def to_json(self) -> dict:
        move = {-1: "L", 0: "S", 1: "R"}.get(self.move, self.move)
        return {"index": self.index, "read": _jsonable(self.read), "write": _jsonable(self.write),
                "move": move, "written": self.written}


@dataclass(frozen=True)
class TraceEvent:
    step: int
    state_before: str
    state_after: str
    tapes: tuple[TapeAction, ...]
    fidelity: str = MICRO
    annotation: str | None = None
    info: Mapping[str, Any] | None = None

    def action(self, index: int) -> TapeAction:
        return self.tapes[index - 1]

    def to_json(self) -> dict:
        out = {"step": self.step, "state_before": self.state_before, "state_after": self.state_after,
               "tapes": [a.to_json() for a in self.tapes], "fidelity": self.fidelity}
        if self.annotation is not None:
            out["annotation"] = self.annotation
        if self.info:
            out["info"] = _jsonable_map(self.info)
        return out

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "TraceEvent":
        moves = {"L": -1, "S": 0, "R": 1}
        acts = tuple(
            TapeAction(a["index"], a["read"], a["write"], moves.get(a["move"], a["move"]), a.get("written", 0))
            for a in d["tapes"]
        )
        return cls(d["step"], d["state_before"], d["state_after"], acts, d.get("fidelity", MICRO),
                   d.get("annotation"), d.get("info"))


def _jsonable_map(m: Mapping[str, Any]) -> dict:
    return {k: _jsonable(v) for k, v in m.items()}


def diff_event(step: int, before: Configuration, after: Configuration, fidelity: str,
               annotation: str | None = None, info: Mapping[str, Any] | None = None) -> TraceEvent:
    """Build the event for ``before -> after`` by comparing tapes."""
    actions = []
    for tb, ta in zip(before.tapes, after.tapes):
        read = tb.read()
        if tb.cells == ta.cells:
            written, write = 0, read
        else:
            changed = [i for i in range(max(len(tb.cells), len(ta.cells))) if tb.at(i) != ta.at(i)]
            written = len(changed)
            write = ta.at(changed[0]) if written == 1 else f"<{written} cells>"
        actions.append(TapeAction(tb.index, read, write, ta.head - tb.head, written))
    return TraceEvent(step, before.state.name, after.state.name, tuple(actions), fidelity, annotation, info)


def dump_trace(trace: Iterable[TraceEvent], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ev in trace:
            fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")
            n += 1
    return n


def load_trace(path) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return [TraceEvent.from_json(json.loads(line)) for line in fh if line.strip()]


# --- legality -----------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    step: int
    kind: str
    detail: str


def validate_trace(trace: Iterable[TraceEvent]) -> list[Violation]:
    """Every legality violation in ``trace``; an empty list means a legal run."""
    report = []
    for ev in trace:
        if ev.state_before == Q_HALT.name:
            report.append(Violation(ev.step, "halt-exit", f"transition out of q_halt to {ev.state_after}"))
        for act in ev.tapes:
            if act.index in READ_ONLY_TAPES and act.written:
                report.append(Violation(ev.step, "read-only", f"write to tape {act.index}"))
            if ev.fidelity == MICRO:
                if act.written > 1:
                    report.append(Violation(ev.step, "multi-write", f"tape {act.index}: {act.written} cells written"))
                if not isinstance(act.move, int) or abs(act.move) > 1:
                    report.append(Violation(ev.step, "head-jump", f"tape {act.index}: head moved {act.move}"))
    return report
