"""Command-line entry point.

Flags override scenario-file fields, which override defaults. In the ``run``
command stdout carries only the Tape 7 text, so runs compose in pipelines.
``TAPELLM_OUT_DIR`` sets where reports go when no ``--report`` path is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .diagnostics import Expectation, localise_failure
from .extensions import baseline_words, recognise_centre_embedding
from .grammar import DEFAULT_LEXICON, generate_suite
from .machine.tape import dump_trace, load_trace, validate_trace
from .model import SpecError, generate_spec, save_spec
from .oracle import oracle_centre_embedding, oracle_verdict
from .scenarios import (
    Scenario, ScenarioError, embedding_scenario, run_scenario, stack_request, strawberry_scenario,
)
from .tokeniser import regime_tokeniser, save_vocab


def _out_dir() -> Path:
    return Path(os.environ.get("TAPELLM_OUT_DIR", "."))


def _emit_artifacts(outcome, args) -> None:
    if getattr(args, "trace", None):
        dump_trace(outcome.trace, args.trace)
    if getattr(args, "report", None):
        Path(args.report).write_text(outcome.report.dumps() + "\n", encoding="utf-8")


def _apply_flags(s: Scenario, args) -> Scenario:
    changes = {}
    if args.regime:
        changes["vocab"] = {"regime": args.regime}
    if args.with_counting:
        changes["counting"] = True
    if args.with_stack:
        changes["stack"] = True
    if args.beam:
        changes["decode"] = {"beam": args.beam}
    if args.seed is not None:
        if isinstance(s.decode, dict) and "sample" in s.decode:
            changes["decode"] = {"sample": {"seed": args.seed}}
        if "seed" in s.model:
            changes["model"] = {**s.model, "seed": args.seed}
    if args.max_tokens:
        changes["max_tokens"] = args.max_tokens
    if args.max_steps:
        changes["max_steps"] = args.max_steps
    return replace(s, **changes) if changes else s


def cmd_run(args) -> int:
    try:
        s = _apply_flags(Scenario.load(args.scenario), args)
        outcome = run_scenario(s)
    except (OSError, ScenarioError, SpecError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(outcome.output + "\n")
    _emit_artifacts(outcome, args)
    if outcome.result is not None and outcome.result.kind != "Halted":
        print(f"run ended: {outcome.result.kind}", file=sys.stderr)
    if outcome.passed:
        return 0
    report = args.report or str(_out_dir() / f"{s.name}.report.json")
    if not args.report:
        Path(report).write_text(outcome.report.dumps() + "\n", encoding="utf-8")
    print(f"expectation not met; failure report: {report}", file=sys.stderr)
    return 1


def cmd_demo_strawberry(args) -> int:
    outcome = run_scenario(strawberry_scenario(args.regime, args.with_counting))
    print(f"answer: {outcome.output}")
    _emit_artifacts(outcome, args)
    if outcome.report.attributed_phase is None:
        print("report: none (answer correct)")
    else:
        print(outcome.report.render())
    return 0


# --- centre embedding -------------------------------------------------------------

def _suite_item(args_tuple):
    words, window, with_stack = args_tuple
    classes = DEFAULT_LEXICON.classes
    truth = oracle_verdict(words, classes)
    if with_stack:
        tok = _regime_b()
        got = recognise_centre_embedding(tok.tokenise(" ".join(words)), tok.vocab, classes)
    else:
        got = baseline_words(words, window, classes)
    return truth.kind == got.kind


_TOK = None


def _regime_b():
    global _TOK
    if _TOK is None:
        _TOK = regime_tokeniser("B")
    return _TOK


def suite_accuracy(max_depth: int, per_depth: int, window: int, with_stack: bool, jobs: int = 1,
                   seed: int = 0) -> dict[int, float]:
    items = generate_suite(range(max_depth + 1), per_depth, DEFAULT_LEXICON, seed)
    work = [(it.words, window, with_stack) for it in items]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            hits = list(pool.map(_suite_item, work, chunksize=16))
    else:
        hits = [_suite_item(w) for w in work]
    right, total = Counter(), Counter()
    for it, ok in zip(items, hits):
        total[it.depth] += 1
        right[it.depth] += ok
    return {d: right[d] / total[d] for d in sorted(total)}


def cmd_demo_embedding(args) -> int:
    if args.depth < 0:
        print("error: depth must be >= 0", file=sys.stderr)
        return 2
    if args.suite:
        acc = suite_accuracy(max(args.depth, args.max_depth), args.per_depth, args.window, args.with_stack,
                             args.jobs, args.seed or 0)
        label = "stack recogniser" if args.with_stack else f"bounded window W={args.window}"
        print(f"{label}: accuracy by depth")
        for d, a in acc.items():
            print(f"  depth {d:2d}  {a:.3f}")
        print(f"  overall  {sum(acc.values()) / len(acc):.3f}")
        return 0
    words, verb = oracle_centre_embedding(args.depth, DEFAULT_LEXICON)
    print("sentence: " + " ".join(words))
    if args.with_stack:
        outcome = run_scenario(embedding_scenario(args.depth, True))
        _emit_artifacts(outcome, args)
        info = outcome.verdicts[-1] if outcome.verdicts else {"verdict": "none"}
        print(f"verdict: {info['verdict']}")
        if info["verdict"] == "needs-verb":
            print(f"completion: Verb for '{words[1]}' ->{outcome.output}")
        else:
            print("completion: none needed")
    else:
        v = baseline_words(words, args.window, DEFAULT_LEXICON.classes)
        print(f"verdict (window {args.window}): {v.kind}{'' if v.reason is None else ' (' + v.reason + ')'}")
        print("completion: Verb" if v.kind == "needs-verb" else "completion: none")
    return 0


# --- generators and diagnosis ----------------------------------------------------------

def cmd_gen_spec(args) -> int:
    try:
        spec = generate_spec(args.seed or 0, args.layers, args.heads, args.d_model, args.d_ff, args.l_max,
                             args.vocab_size)
    except SpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    save_spec(args.output, spec)
    return 0


def cmd_gen_vocab(args) -> int:
    tok = regime_tokeniser(args.regime or "B")
    save_vocab(args.output, tok.vocab, tok.rules)
    return 0


def cmd_diagnose(args) -> int:
    try:
        trace = load_trace(args.trace_file)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    phases = Counter(ev.annotation or "?" for ev in trace)
    violations = validate_trace(trace)
    print(f"steps: {len(trace)}")
    print("by phase: " + ", ".join(f"{k}={v}" for k, v in sorted(phases.items())))
    print(f"legality violations: {len(violations)}")
    for v in violations[:20]:
        print(f"  step {v.step}: {v.kind}: {v.detail}")
    if args.scenario:
        s = Scenario.load(args.scenario)
        outcome = run_scenario(s)
        exp = Expectation(s.name, s.expected, s.prompt, s.critical_words, s.char_level,
                          tuple(r for r, on in (("counting", s.char_level), ("stack", s.stack)) if on))
        report = localise_failure(trace, exp, outcome.config)
        print(report.render())
        if args.report:
            Path(args.report).write_text(report.dumps() + "\n", encoding="utf-8")
    return 1 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapellm", description="Seven-tape Turing machine LLM inference simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, regime_default=None):
        sp.add_argument("--trace", metavar="PATH", help="write the step trace as JSONL")
        sp.add_argument("--report", metavar="PATH", help="write the FailureReport as JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--regime", choices=["A", "B", "byte"], default=regime_default)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    common(r)
    r.add_argument("--with-counting", action="store_true")
    r.add_argument("--with-stack", action="store_true")
    r.add_argument("--beam", type=int, metavar="B")
    r.add_argument("--max-tokens", type=int)
    r.add_argument("--max-steps", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("demo-strawberry", help="letter-counting demo")
    common(s, "A")
    s.add_argument("--with-counting", action="store_true")
    s.set_defaults(func=cmd_demo_strawberry)

    e = sub.add_parser("demo-embedding", help="centre-embedding demo")
    common(e)
    e.add_argument("--depth", type=int, default=2)
    e.add_argument("--with-stack", action="store_true")
    e.add_argument("--window", type=int, default=4)
    e.add_argument("--suite", action="store_true", help="accuracy over generated sentences of depth 0..max")
    e.add_argument("--max-depth", type=int, default=10)
    e.add_argument("--per-depth", type=int, default=50)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_demo_embedding)

    g = sub.add_parser("gen-spec", help="write a seeded random model spec")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--heads", type=int, default=1)
    g.add_argument("--d-model", type=int, default=8)
    g.add_argument("--d-ff", type=int, default=16)
    g.add_argument("--l-max", type=int, default=16)
    g.add_argument("--vocab-size", type=int, default=16)
    g.set_defaults(func=cmd_gen_spec)

    v = sub.add_parser("gen-vocab", help="write a scenario vocabulary")
    v.add_argument("-o", "--output", required=True)
    v.add_argument("--regime", choices=["A", "B", "byte"], default="B")
    v.set_defaults(func=cmd_gen_vocab)

    d = sub.add_parser("diagnose", help="re-analyse a saved trace")
    d.add_argument("trace_file")
    d.add_argument("--scenario", help="scenario file for output attribution")
    d.add_argument("--report", metavar="PATH")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
