"""Selection, emission and detokenisation phases, plus sampling and beam search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import numerics as nx
from .machine.tape import (
    DELIM, MICRO, Configuration, ControlState, MachineError, Phase, TraceEvent, diff_event, encode_id,
)

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class RandomTapeExhausted(MachineError):
    pass


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RandomTape:
    """Deterministic bit stream read MSB first; ``cursor`` counts consumed bits.

    Seeded tapes are the splitmix64 output sequence (block ``k`` is output ``k``),
    so any bit can be computed without replaying the stream. File tapes are raw
    bytes and run out.
    """

    seed: int | None = None
    data: bytes | None = None
    cursor: int = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "RandomTape":
        return cls(data=Path(path).read_bytes())

    def bit(self, i: int) -> int:
        if self.data is not None:
            if i >= 8 * len(self.data):
                raise RandomTapeExhausted(f"random tape exhausted at bit {i}")
            return (self.data[i >> 3] >> (7 - (i & 7))) & 1
        block = _mix64((self.seed + ((i >> 6) + 1) * GOLDEN) & MASK64)
        return (block >> (63 - (i & 63))) & 1

    def take(self, width: int) -> tuple[int, "RandomTape"]:
        u = 0
        for i in range(self.cursor, self.cursor + width):
            u = (u << 1) | self.bit(i)
        return u, replace(self, cursor=self.cursor + width)


# --- pure selection -----------------------------------------------------------

def select_greedy(row: Sequence[int]) -> int:
    """Argmax with the lowest id winning ties."""
    return nx.argmax(row)


def sample_index(row: Sequence[int], u: int, width: int = 32) -> int:
    """Smallest k with cumsum(row[:k+1]) * 2**width > u * ONE; the last entry closes the CDF."""
    if not row:
        raise ValueError("sampling from an empty row")
    cum = 0
    target = u * nx.ONE
    for k, p in enumerate(row):
        cum += p
        if (cum << width) > target:
            return k
    return len(row) - 1


def select_sample(row: Sequence[int], r: RandomTape, width: int = 32) -> tuple[int, RandomTape]:
    u, r = r.take(width)
    return sample_index(row, u, width), r


# --- machine handlers ---------------------------------------------------------------

def _with(config: Configuration, state: ControlState, *tapes) -> Configuration:
    for t in tapes:
        config = config.with_tape(t)
    return replace(config, state=state)


def select_scan(config: Configuration) -> Configuration:
    i, best_id, best_p = config.state.reg
    t6 = config.tape(6)
    p = t6.read()
    if isinstance(p, int):
        if p > best_p:
            best_id, best_p = i, p
        return _with(config, ControlState.of("q_select,scan", i + 1, best_id, best_p), t6.move(1))
    if best_id < 0:
        raise MachineError("selection scan found an empty row on Tape 6")
    return _with(config, ControlState.of("q_select,max", best_id, "greedy"))


def select_draw(config: Configuration) -> Configuration:
    if config.rand is None:
        raise MachineError("sampling requested without a random tape")
    u, rand = config.rand.take(config.options.sample_width)
    return replace(config, state=ControlState.of("q_select,cdf", 0, 0, u), rand=rand)


def select_cdf(config: Configuration) -> Configuration:
    i, cum, u = config.state.reg
    t6 = config.tape(6)
    p = t6.read()
    if not isinstance(p, int):
        raise MachineError(f"Tape 6 cell {t6.head}: expected a probability, found {p!r}")
    cum += p
    width = config.options.sample_width
    if (cum << width) > u * nx.ONE or i == config.spec.vocab_size - 1:
        return _with(config, ControlState.of("q_select,max", i, "sample"))
    return _with(config, ControlState.of("q_select,cdf", i + 1, cum, u), t6.move(1))


def select_prune(config: Configuration) -> Configuration:
    (tid,) = config.state.reg
    return _with(config, ControlState.of("q_select,max", tid, "beam"))


def select_max(config: Configuration) -> Configuration:
    tid, _mode = config.state.reg
    return _with(config, ControlState.of("q_emit", tid, encode_id(tid)))


def emit_step(config: Configuration) -> Configuration:
    """Write the id one cell at a time, then branch: ``<eos>`` halts, anything else detokenises."""
    tid, pending = config.state.reg
    if pending:
        t2 = config.tape(2).write(pending[0]).move(1)
        return _with(config, ControlState.of("q_emit", tid, pending[1:]), t2)
    if tid == config.vocab.eos:
        return _with(config, ControlState(Phase.HALT, "q_halt"))
    return replace(config, state=ControlState.of("q_detok", tid, None), generated=config.generated + 1)


def detok_step(config: Configuration) -> Configuration:
    tid, chars = config.state.reg
    if chars is None:
        if tid not in config.vocab.entries:
            raise MachineError(f"detokenisation of unknown token id {tid}")
        chars = config.vocab.token_bytes(tid)
    if not chars:
        return _with(config, ControlState.of("q_fwd,1"))
    t7 = config.tape(7).write(chars[0]).move(1)
    nxt = ControlState.of("q_detok", tid, chars[1:]) if len(chars) > 1 else ControlState.of("q_fwd,1")
    return _with(config, nxt, t7)


HANDLERS = {
    "q_select,scan": select_scan,
    "q_select,draw": select_draw,
    "q_select,cdf": select_cdf,
    "q_select,prune": select_prune,
    "q_select,max": select_max,
    "q_emit": emit_step,
    "q_detok": detok_step,
}


def selection_info(config: Configuration) -> dict:
    """Trace info for a q_select,max step: mode, chosen id, Tape 6 row number."""
    tid, mode = config.state.reg
    rows = sum(1 for c in config.tape(6).cells if c == DELIM)
    return {"mode": mode, "chosen": tid, "row": rows - 1 if mode in ("greedy", "sample", "beam") else None}


def _drive(config: Configuration, phase: Phase, trace: list | None) -> Configuration:
    while config.state.phase is phase:
        nxt = HANDLERS[config.state.name](config)
        nxt = replace(nxt, step_count=config.step_count + 1)
        if trace is not None:
            trace.append(diff_event(config.step_count, config, nxt, MICRO))
        config = nxt
    return config


def emit(config: Configuration, token_id: int, trace: list | None = None) -> Configuration:
    """Run the emission phase for ``token_id`` from q_emit to q_halt / q_detok."""
    if config.state.phase is not Phase.EMIT:
        raise MachineError(f"emit needs state q_emit, machine is in {config.state.name}")
    config = replace(config, state=ControlState.of("q_emit", token_id, encode_id(token_id)))
    return _drive(config, Phase.EMIT, trace)


def detok_append(config: Configuration, token_id: int, trace: list | None = None) -> Configuration:
    """Append the token's text to Tape 7 and return to q_fwd,1."""
    if config.state.phase is not Phase.DETOK:
        raise MachineError(f"detok_append needs state q_detok, machine is in {config.state.name}")
    config = replace(config, state=ControlState.of("q_detok", token_id, None))
    return _drive(config, Phase.DETOK, trace)


# --- beam search --------------------------------------------------------------------

@dataclass(frozen=True)
class BeamEntry:
    """One beam: its own machine configuration (so its own Tape 2 and Tape 6)."""

    config: Configuration
    score: int = 0
    alive: bool = True
    finished: bool = False

    @property
    def token_tape(self):
        return self.config.tape(2)

    @property
    def prob_tape(self):
        return self.config.tape(6)


@dataclass
class BeamResult:
    best: BeamEntry
    beams: list[BeamEntry]
    trace: list[TraceEvent] = field(default_factory=list)
    steps: int = 0
    scoreboard: list[list[tuple[int, int, int]]] = field(default_factory=list)


def _advance(config: Configuration, trace: list | None, max_steps: int) -> tuple[Configuration, bool]:
    """Step until the machine sits at a selection decision; False if it cannot get there."""
    from .machine import engine

    while config.state.name not in ("q_select,scan", "q_select,draw") and config.state.phase is not Phase.HALT:
        if engine.pending_context_violation(config) is not None or config.step_count >= max_steps:
            return config, False
        config, ev = engine.step(config)
        if trace is not None:
            trace.append(ev)
    return config, config.state.phase is not Phase.HALT


def _newest_row(config: Configuration) -> list[int]:
    rows = config.prob_rows()
    if not rows:
        raise MachineError("beam has no ProbRow on Tape 6")
    return rows[-1]


def beam_step(beams: Sequence[BeamEntry], width: int, trace: list | None = None,
              max_steps: int = 10**9, scoreboard: list | None = None) -> list[BeamEntry]:
    """Expand every alive beam by every token, keep the best ``width``.

    Order: score desc, then parent slot asc, then token id asc. Frozen beams
    compete with their unchanged score and keep a slot when they win one.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    cands = []
    for slot, b in enumerate(beams):
        if not b.alive:
            cands.append((-b.score, slot, -1))
            continue
        for tid, p in enumerate(_newest_row(b.config)):
            if p > 0:
                cands.append((-(b.score + nx.log2_approx(p)), slot, tid))
    cands.sort()
    kept = cands[:width]
    if scoreboard is not None:
        scoreboard.append([(-s, slot, tid) for s, slot, tid in cands])
    out = []
    for neg_score, slot, tid in kept:
        parent = beams[slot]
        if tid < 0:
            out.append(parent)
            continue
        cfg = parent.config
        # the prune decision replaces the scan; emission and detok run as usual
        cfg = replace(cfg, state=ControlState.of("q_select,prune", tid))
        from .machine import engine

        for _ in range(2):
            cfg, ev = engine.step(cfg)
            if trace is not None:
                trace.append(ev)
        cfg = _drive(cfg, Phase.EMIT, trace)
        if cfg.state.phase is Phase.HALT:
            out.append(BeamEntry(cfg, -neg_score, alive=False, finished=True))
            continue
        cfg = _drive(cfg, Phase.DETOK, trace)
        cfg, ok = _advance(cfg, trace, max_steps)
        out.append(BeamEntry(cfg, -neg_score, alive=ok, finished=False))
    return out


def beam_search(config: Configuration, width: int, max_tokens: int, max_steps: int = 10**9) -> BeamResult:
    """Beam search from a fresh configuration; answer is the best ``<eos>`` beam."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    trace: list[TraceEvent] = []
    board: list = []
    cfg, ok = _advance(config, trace, max_steps)
    beams = [BeamEntry(cfg, 0, alive=ok)]
    steps = 0
    for _ in range(max_tokens):
        if not any(b.alive for b in beams):
            break
        beams = beam_step(beams, width, trace, max_steps, board)
        steps += 1
    done = [(i, b) for i, b in enumerate(beams) if b.finished]
    pool = done or list(enumerate(beams))
    _, best = min(pool, key=lambda ib: (-ib[1].score, ib[0]))
    return BeamResult(best, beams, trace, steps, board)
