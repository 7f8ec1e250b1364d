"""Failure localisation and the attention failure detectors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import numerics as nx
from .machine.tape import Configuration, TraceEvent
from .tokeniser import Tokeniser, detokenise_bytes

TOKENISATION = "Tokenisation"
FORWARD = "Forward"
SELECTION = "Selection"
DETOKENISATION = "Detokenisation"
PHASES = (TOKENISATION, FORWARD, SELECTION, DETOKENISATION, None)

SUBROUTINE_STATES = {
    "counting": ("q_locate", "q_count"),
    "stack": ("q_stack,read", "q_check"),
}


@dataclass(frozen=True)
class Thresholds:
    dilution: float = 0.5
    saturation_quanta: int = 4

    @classmethod
    def load(cls, path: str | Path) -> "Thresholds":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - {"dilution", "saturation_quanta"}
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**data)


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class Metric:
    name: str
    value: Any
    threshold: Any = None
    refs: tuple = ()  # ("step", n) | ("tape", i, cell) | ("token", position)


@dataclass(frozen=True)
class FailureReport:
    scenario: str
    expected: str | None
    actual: str
    attributed_phase: str | None
    evidence: tuple[Metric, ...] = ()

    def __post_init__(self) -> None:
        if self.attributed_phase not in PHASES:
            raise ValueError(f"unknown phase {self.attributed_phase!r}")
        if (self.attributed_phase is None) != (self.expected is None or self.expected == self.actual):
            raise ValueError("attributed_phase must be None exactly when the output is as expected")

    def metric(self, name: str) -> Metric | None:
        return next((m for m in self.evidence if m.name == name), None)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "expected": self.expected,
            "actual": self.actual,
            "attributed_phase": self.attributed_phase,
            "evidence": [{**asdict(m), "refs": [list(r) for r in m.refs]} for m in self.evidence],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "FailureReport":
        ev = tuple(Metric(m["name"], m["value"], m.get("threshold"), tuple(tuple(r) for r in m.get("refs", ())))
                   for m in d.get("evidence", ()))
        return cls(d["scenario"], d["expected"], d["actual"], d["attributed_phase"], ev)

    def render(self) -> str:
        lines = [f"scenario  {self.scenario}",
                 f"expected  {self.expected!r}",
                 f"actual    {self.actual!r}",
                 f"phase     {self.attributed_phase or 'none (output as expected)'}"]
        for m in self.evidence:
            thr = "" if m.threshold is None else f" (threshold {m.threshold})"
            refs = "" if not m.refs else "  @ " + ", ".join(":".join(map(str, r)) for r in m.refs[:6])
            lines.append(f"  {m.name} = {m.value}{thr}{refs}")
        return "\n".join(lines)


# --- detectors ---------------------------------------------------------------------

def boundary_exposure(word: str, vocab, rules) -> float:
    """Fraction of the word's internal character boundaries that are also token boundaries."""
    if len(word) < 2:
        raise ValueError("boundary_exposure needs a word of at least two characters")
    tok = Tokeniser(vocab, tuple(rules))
    data = word.encode("utf-8")
    # byte offset of every internal character boundary
    char_cuts, off = set(), 0
    for ch in word[:-1]:
        off += len(ch.encode("utf-8"))
        char_cuts.add(off)
    token_cuts, off = set(), 0
    ids = tok.tokenise(data)
    for tid in ids[:-1]:
        off += len(vocab.token_bytes(tid))
        token_cuts.add(off)
    return len(char_cuts & token_cuts) / (len(word) - 1)


def attention_dilution(alpha: Sequence[int]) -> float:
    """1 - max(alpha), with alpha in raw fixed point."""
    if not alpha:
        raise ValueError("empty attention row")
    return (nx.ONE - max(alpha)) / nx.ONE


def head_saturation(alpha: Sequence[int], thresholds: Thresholds = DEFAULT_THRESHOLDS) -> bool:
    if not alpha:
        raise ValueError("empty attention row")
    return max(alpha) >= nx.ONE - thresholds.saturation_quanta


def alpha_rows(config: Configuration) -> dict[tuple[int, int], list[int]]:
    """Newest attention row of every (layer, head) from the Tape 5 alpha regions."""
    from .forward import AttentionWorkspace, layout_for

    spec = config.spec
    ws = AttentionWorkspace(config.tape(5), spec)
    t = ws.cached - 1
    if t < 0:
        return {}
    return {(layer, h): ws.alpha(layer, h, t) for layer in range(spec.layers) for h in range(spec.heads)}


def attention_metrics(config: Configuration, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> list[Metric]:
    from .forward import layout_for

    if config.spec is None:
        return []
    lay = layout_for(config.spec)
    out = []
    for (layer, h), row in alpha_rows(config).items():
        ref = (("tape", 5, lay.alpha_base(layer, h)),)
        out.append(Metric(f"attention_dilution[{layer},{h}]", attention_dilution(row), thresholds.dilution, ref))
        out.append(Metric(f"head_saturation[{layer},{h}]", head_saturation(row, thresholds),
                          f"max >= 1 - {thresholds.saturation_quanta} quanta", ref))
    return out


# --- localisation ------------------------------------------------------------------

@dataclass(frozen=True)
class Expectation:
    """What a scenario should produce and which words / subroutines it depends on."""

    scenario: str
    expected: str | None
    prompt: str | None = None
    critical_words: tuple[str, ...] = ()
    char_level: bool = False
    requires: tuple[str, ...] = ()


def _steps(trace: Iterable[TraceEvent], names: Sequence[str]) -> list[int]:
    names = set(names)
    return [ev.step for ev in trace if ev.state_before in names]


def localise_failure(trace: Sequence[TraceEvent], expectation: Expectation, config: Configuration,
                     tokeniser: Tokeniser | None = None, thresholds: Thresholds = DEFAULT_THRESHOLDS,
                     prompt_len: int | None = None) -> FailureReport:
    """Attribute a wrong output to the earliest pipeline phase that explains it."""
    actual = config.output_text
    expected = expectation.expected
    tok = tokeniser or config.tokeniser
    evidence: list[Metric] = []
    phase = None

    # tokenisation evidence
    if expectation.prompt is not None and tok is not None:
        ids = tok.tokenise(expectation.prompt)
        rt = detokenise_bytes(ids, tok.vocab) == expectation.prompt.encode("utf-8")
        evidence.append(Metric("prompt_round_trip", rt, True))
        if not rt:
            phase = phase or TOKENISATION
    for w in expectation.critical_words:
        if tok is None or len(w) < 2:
            continue
        exp = boundary_exposure(w, tok.vocab, tok.rules)
        evidence.append(Metric(f"boundary_exposure[{w}]", exp, 1.0))
        if expectation.char_level and exp < 1.0:
            phase = phase or TOKENISATION

    # forward evidence: required subroutines
    for req in expectation.requires:
        states = SUBROUTINE_STATES[req]
        hits = _steps(trace, states)
        evidence.append(Metric(f"subroutine_steps[{req}]", len(hits), ">= 1", tuple(("step", s) for s in hits[:8])))
        if not hits:
            phase = phase or FORWARD

    # selection evidence
    rows = config.prob_rows()
    off_argmax = []
    for ev in trace:
        if ev.state_before != "q_select,max" or not ev.info:
            continue
        mode, chosen, row = ev.info.get("mode"), ev.info.get("chosen"), ev.info.get("row")
        if mode in ("sample", "beam") and row is not None and 0 <= row < len(rows) and rows[row]:
            if chosen != nx.argmax(rows[row]):
                off_argmax.append((ev.step, row, chosen))
    evidence.append(Metric("non_argmax_selections", len(off_argmax), 0,
                           tuple(("step", s) for s, _, _ in off_argmax[:8])))
    if off_argmax:
        phase = phase or SELECTION

    # detokenisation evidence
    ids = config.token_ids()
    n_prompt = prompt_len if prompt_len is not None else len(ids) - config.generated - _eos_tail(ids, config)
    suffix = detokenise_bytes(ids[n_prompt:], config.vocab)
    detok_ok = suffix == config.output_bytes
    evidence.append(Metric("tape7_matches_tape2_suffix", detok_ok, True, (("tape", 7, 0),)))
    if not detok_ok:
        phase = phase or DETOKENISATION

    evidence.append(Metric("saturation", config.saturated, False))
    evidence.extend(attention_metrics(config, thresholds))

    if expected is None or expected == actual:
        phase = None
    elif phase is None:
        phase = FORWARD
        evidence.append(Metric("unexplained_mismatch", True, None))
    return FailureReport(expectation.scenario, expected, actual, phase, tuple(evidence))


def _eos_tail(ids: Sequence[int], config: Configuration) -> int:
    return 1 if ids and ids[-1] == config.vocab.eos and config.state.name == "q_halt" else 0


def context_violation_report(result) -> dict | None:
    from .machine.engine import ContextViolation

    if not isinstance(result, ContextViolation):
        return None
    return {"kind": "context_violation", "position": result.position, "l_max": result.l_max,
            "step": result.config.step_count}
