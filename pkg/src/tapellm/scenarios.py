"""Scenario files, the hand-built pattern models and one-call pipeline runners.

A scenario is a JSON object::

    {
      "name": "strawberry-A",
      "prompt": "How many times ...",          # or "prompt_ids": [0, 5, 7]
      "vocab": {"regime": "A"},                  # or {"file": path} / {"synthetic": 16}
      "model": {"pattern": {"answer": "2"}},     # or {"seed": 3, "d_model": 8, ...} / {"file": path}
      "decode": "greedy",                        # or {"sample": {"seed": 1}} / {"sample": {"file": p}} / {"beam": 2}
      "extensions": {"counting": true, "stack": false},
      "budgets": {"max_steps": 200000, "max_tokens": 8},
      "expected": "3",
      "critical_words": ["Strawberry"],
      "char_level": true
    }

Relative file paths resolve against the scenario file's directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import numerics as nx
from .decode import RandomTape, beam_search
from .diagnostics import Expectation, FailureReport, localise_failure
from .grammar import DEFAULT_LEXICON, Lexicon
from .machine.engine import RunResult, init_configuration, run
from .machine.tape import Configuration, CountingRequest, RunOptions, StackRequest, TraceEvent
from .model import LayerWeights, ModelSpec, generate_spec, load_spec, zeros
from .oracle import oracle_centre_embedding
from .tokeniser import Tokeniser, load_vocab, regime_tokeniser, synthetic_vocab

STRAWBERRY_PROMPT = "How many times does the letter 'r' appear in 'Strawberry'?"
EMBEDDING_PREFIX = "Complete the sentence: "

_COUNT_RE = re.compile(r"letter '(.)' appear in '([^']+)'")


class ScenarioError(ValueError):
    pass


# --- pattern model -------------------------------------------------------------------

def pattern_model(vocab_size: int, prompt_len: int, answer_id: int, eos_id: int, l_max: int = 64) -> ModelSpec:
    """A one-shot answerer: predicts ``answer_id`` inside the prompt and ``<eos>`` after it.

    Every token embeds to e1 and every position from ``prompt_len`` on adds e2.
    The unembedding maps e1 to a logit of 4 on the answer and e2 to 8 on
    ``<eos>``. Attention and FFN weights are zero, so each position's logits
    depend on its own residual stream only. This is the pattern-matching
    behaviour of the demos: an answer that ignores character structure.
    """
    l_max = max(l_max, prompt_len + 2)
    d = 4
    embed = tuple(tuple(nx.ONE if j == 0 else 0 for j in range(d)) for _ in range(vocab_size))
    pos = tuple(tuple(nx.ONE if (j == 1 and t >= prompt_len) else 0 for j in range(d)) for t in range(l_max))
    w_out = [[0] * vocab_size for _ in range(d)]
    w_out[0][answer_id] = 4 * nx.ONE
    w_out[1][eos_id] = 8 * nx.ONE
    block = LayerWeights(wq=(zeros(d, d),), wk=(zeros(d, d),), wv=(zeros(d, d),),
                         wo=zeros(d, d), w1=zeros(d, d), w2=zeros(d, d))
    return ModelSpec(1, 1, d, d, l_max, vocab_size, embed, pos, tuple(map(tuple, w_out)), (block,))


def answer_token(tok: Tokeniser, text: str) -> int:
    ids = tok.tokenise(text)
    if len(ids) != 1:
        raise ScenarioError(f"pattern answer {text!r} is not a single token in this vocabulary")
    return ids[0]


def parse_counting(prompt: str) -> CountingRequest:
    m = _COUNT_RE.search(prompt)
    if not m:
        raise ScenarioError("could not find \"letter 'x' appear in 'word'\" in the prompt")
    return CountingRequest(word=m.group(2), letter=m.group(1))


def embedding_prompt(depth: int, lex: Lexicon = DEFAULT_LEXICON) -> tuple[str, str | None]:
    """Demo prompt for ``depth`` and the verb the outer subject still needs."""
    words, verb = oracle_centre_embedding(depth, lex)
    return EMBEDDING_PREFIX + " ".join(words), verb


def stack_request(lex: Lexicon = DEFAULT_LEXICON) -> StackRequest:
    return StackRequest(lex.classes, {n: " " + v for n, v in zip(lex.nouns, lex.verbs)})


# --- scenario schema ----------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    prompt: str | None = None
    prompt_ids: tuple[int, ...] | None = None
    vocab: dict = field(default_factory=lambda: {"regime": "B"})
    model: dict = field(default_factory=lambda: {"seed": 0})
    decode: Any = "greedy"
    counting: Any = False
    stack: Any = False
    max_steps: int = 2_000_000
    max_tokens: int = 16
    expected: str | None = None
    critical_words: tuple[str, ...] = ()
    char_level: bool = False
    base_dir: Path = Path(".")

    def __post_init__(self) -> None:
        if (self.prompt is None) == (self.prompt_ids is None):
            raise ScenarioError("give exactly one of prompt / prompt_ids")
        if self.max_steps < 1 or self.max_tokens < 1:
            raise ScenarioError("budgets must be positive")
        decode_mode(self.decode)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "Scenario":
        known = {"name", "prompt", "prompt_ids", "vocab", "model", "decode", "extensions", "budgets", "expected",
                 "critical_words", "char_level"}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        if "name" not in d:
            raise ScenarioError("scenario needs a name")
        ext = d.get("extensions", {})
        budgets = d.get("budgets", {})
        return cls(
            name=str(d["name"]),
            prompt=d.get("prompt"),
            prompt_ids=tuple(d["prompt_ids"]) if "prompt_ids" in d else None,
            vocab=d.get("vocab", {"regime": "B"}),
            model=d.get("model", {"seed": 0}),
            decode=d.get("decode", "greedy"),
            counting=ext.get("counting", False),
            stack=ext.get("stack", False),
            max_steps=int(budgets.get("max_steps", 2_000_000)),
            max_tokens=int(budgets.get("max_tokens", 16)),
            expected=d.get("expected"),
            critical_words=tuple(d.get("critical_words", ())),
            char_level=bool(d.get("char_level", False)),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ScenarioError(f"{p}: scenario must be a JSON object")
        return cls.from_dict(data, p.parent)

    def to_dict(self) -> dict:
        out = {"name": self.name, "vocab": self.vocab, "model": self.model, "decode": self.decode,
               "extensions": {"counting": self.counting, "stack": self.stack},
               "budgets": {"max_steps": self.max_steps, "max_tokens": self.max_tokens}}
        if self.prompt is not None:
            out["prompt"] = self.prompt
        else:
            out["prompt_ids"] = list(self.prompt_ids)
        if self.expected is not None:
            out["expected"] = self.expected
        if self.critical_words:
            out["critical_words"] = list(self.critical_words)
        if self.char_level:
            out["char_level"] = True
        return out


def decode_mode(decode: Any) -> tuple[str, Any]:
    """Normalise the decode field to (mode, argument)."""
    if decode == "greedy":
        return "greedy", None
    if isinstance(decode, dict) and len(decode) == 1:
        (mode, arg), = decode.items()
        if mode == "beam" and isinstance(arg, int) and arg >= 1:
            return "beam", arg
        if mode == "sample" and isinstance(arg, dict) and len(arg) == 1 and ("seed" in arg or "file" in arg):
            return "sample", arg
    raise ScenarioError(f"decode must be 'greedy', {{'sample': {{'seed'|'file': ...}}}} or {{'beam': B}}; got {decode!r}")


# --- building the pipeline ------------------------------------------------------------------

def _path(s: Scenario, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else s.base_dir / q


def build_tokeniser(s: Scenario):
    v = s.vocab
    if "regime" in v:
        return regime_tokeniser(v["regime"])
    if "file" in v:
        vocab, rules = load_vocab(_path(s, v["file"]))
        return Tokeniser(vocab, rules)
    if "synthetic" in v:
        return synthetic_vocab(int(v["synthetic"]))
    raise ScenarioError(f"vocab needs regime, file or synthetic; got {v!r}")


def _vocab_of(tok):
    return tok.vocab if isinstance(tok, Tokeniser) else tok


def _prompt_len(s: Scenario, tok) -> int:
    if s.prompt_ids is not None:
        return len(s.prompt_ids)
    return len(tok.tokenise(s.prompt)) + 1


def build_model(s: Scenario, tok) -> ModelSpec:
    m = s.model
    vocab = _vocab_of(tok)
    size = max(vocab.entries) + 1
    if "pattern" in m:
        ans = m["pattern"].get("answer")
        if ans is None:
            raise ScenarioError("pattern model needs an answer")
        return pattern_model(size, _prompt_len(s, tok), answer_token(tok, ans), vocab.eos,
                             int(m["pattern"].get("l_max", 64)))
    if "file" in m:
        return load_spec(_path(s, m["file"]))
    if "seed" in m:
        dims = {k: int(m[k]) for k in ("layers", "heads", "d_model", "d_ff", "l_max") if k in m}
        return generate_spec(int(m["seed"]), vocab_size=size, **dims)
    raise ScenarioError(f"model needs pattern, file or seed; got {m!r}")


def build_options(s: Scenario) -> RunOptions:
    mode, _ = decode_mode(s.decode)
    counting = None
    if s.counting:
        if isinstance(s.counting, dict):
            counting = CountingRequest(s.counting["word"], s.counting["letter"],
                                       bool(s.counting.get("case_sensitive", False)))
        else:
            if s.prompt is None:
                raise ScenarioError("counting needs a text prompt or an explicit word and letter")
            counting = parse_counting(s.prompt)
    stack = stack_request() if s.stack else None
    return RunOptions(decode="sample" if mode == "sample" else "greedy", counting=counting, stack=stack)


def build_random(s: Scenario) -> RandomTape | None:
    mode, arg = decode_mode(s.decode)
    if mode != "sample":
        return None
    if "file" in arg:
        return RandomTape.from_file(_path(s, arg["file"]))
    return RandomTape(seed=int(arg["seed"]))


def initial_configuration(s: Scenario, tok=None, spec: ModelSpec | None = None) -> Configuration:
    tok = tok if tok is not None else build_tokeniser(s)
    spec = spec if spec is not None else build_model(s, tok)
    prompt = s.prompt if s.prompt is not None else list(s.prompt_ids)
    return init_configuration(prompt, tok, spec, build_options(s), build_random(s))


@dataclass
class Outcome:
    scenario: Scenario
    result: RunResult | None
    config: Configuration
    trace: list[TraceEvent]
    report: FailureReport
    beam: Any = None

    @property
    def output(self) -> str:
        return self.config.output_text

    @property
    def passed(self) -> bool:
        return self.scenario.expected is None or self.output == self.scenario.expected

    @property
    def verdicts(self) -> list[dict]:
        return [dict(ev.info) for ev in self.trace if ev.state_before == "q_emit,completion" and ev.info]


def expectation_for(s: Scenario) -> Expectation:
    requires = tuple(r for r, on in (("counting", s.char_level), ("stack", s.stack or _is_embedding(s))) if on)
    return Expectation(s.name, s.expected, s.prompt, s.critical_words, s.char_level, requires)


def _is_embedding(s: Scenario) -> bool:
    return bool(s.prompt) and s.prompt.startswith(EMBEDDING_PREFIX)


def run_scenario(s: Scenario, record: bool = True) -> Outcome:
    tok = build_tokeniser(s)
    cfg = initial_configuration(s, tok)
    mode, width = decode_mode(s.decode)
    if mode == "beam":
        br = beam_search(cfg, width, s.max_tokens, s.max_steps)
        final, trace, result = br.best.config, br.trace, None
    else:
        result = run(cfg, s.max_steps, s.max_tokens, record=record)
        final, trace, br = result.config, result.trace, None
    prompt_len = len(s.prompt_ids) if s.prompt_ids is not None else None
    report = localise_failure(trace, expectation_for(s), final,
                              tok if isinstance(tok, Tokeniser) else None, prompt_len=prompt_len)
    return Outcome(s, result, final, trace, report, br)


# --- canned demos ------------------------------------------------------------------------------

def strawberry_scenario(regime: str = "A", with_counting: bool = True) -> Scenario:
    return Scenario(
        name=f"strawberry-{regime}{'' if with_counting else '-no-counting'}",
        prompt=STRAWBERRY_PROMPT,
        vocab={"regime": regime},
        model={"pattern": {"answer": "2"}},
        counting=with_counting,
        max_tokens=8,
        expected="3",
        critical_words=("Strawberry",),
        char_level=True,
    )


def embedding_scenario(depth: int = 2, with_stack: bool = True, regime: str = "B") -> Scenario:
    prompt, verb = embedding_prompt(depth)
    return Scenario(
        name=f"embedding-d{depth}{'' if with_stack else '-no-stack'}",
        prompt=prompt,
        vocab={"regime": regime},
        model={"pattern": {"answer": " chased"}},
        stack=with_stack,
        max_tokens=8,
        expected="" if verb is None else " " + verb,
    )
