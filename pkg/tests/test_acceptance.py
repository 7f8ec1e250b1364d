"""End-to-end acceptance checks, each with its runtime budget."""

import math
import random
import string
import time
from dataclasses import replace

import pytest
from scipy import stats

from tapellm import numerics as nx
from tapellm.decode import HANDLERS as SELECT, RandomTape, beam_search
from tapellm.diagnostics import head_saturation
from tapellm.extensions import baseline_words, count_subroutine, recognise_centre_embedding
from tapellm.forward import current_logits
from tapellm.grammar import DEFAULT_LEXICON, generate_suite
from tapellm.machine.engine import (
    ContextViolation, Halted, StepLimit, TokenLimit, check_state_partition, init_configuration, run, step,
)
from tapellm.machine.tape import RunOptions, validate_trace
from tapellm.model import generate_spec
from tapellm.oracle import oracle_beam, oracle_count, oracle_forward, oracle_verdict
from tapellm.scenarios import embedding_scenario, initial_configuration, run_scenario, strawberry_scenario
from tapellm.tokeniser import detokenise, regime_tokeniser, synthetic_vocab

from conftest import GOLDEN, dominant_key_alpha, spec_of

Q = nx.ONE
PRINTABLE = string.printable[:95]  # digits, letters, punctuation, space


def random_spec(rng, seed):
    layers = rng.randint(1, 2)
    heads = rng.randint(1, 2)
    d_model = heads * rng.randint(1, 16 // heads)
    return generate_spec(seed, layers, heads, d_model, rng.randint(1, 32), 16, rng.randint(3, 64))


class Timer:
    def __init__(self, budget):
        self.budget = budget

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.budget, f"took {self.elapsed:.1f}s, budget {self.budget}s"


def tape_logits(ids, spec):
    """Logits of every prompt position as computed on the tapes (captured after each q_fwd,out)."""
    cfg = init_configuration(ids, synthetic_vocab(spec.vocab_size), spec)
    out = []
    while not cfg.state.name.startswith("q_select"):
        name = cfg.state.name
        cfg, _ = step(cfg)
        if name == "q_fwd,out":
            out.append(current_logits(cfg))
    return out


@pytest.mark.acceptance("oracle equivalence: tape logits == oracle logits on 100 random specs (< 60 s)")
def test_oracle_equivalence():
    rng = random.Random(2024)
    with Timer(60):
        for seed in range(100):
            spec = random_spec(rng, seed)
            ids = [rng.randrange(spec.vocab_size) for _ in range(rng.randint(1, 16))]
            assert tape_logits(ids, spec) == oracle_forward(ids, spec), seed


@pytest.mark.acceptance("tokenisation round trip on 10^4 random printable strings (< 10 s)")
def test_tokenisation_round_trip():
    tok = regime_tokeniser("B")
    rng = random.Random(7)
    with Timer(10):
        for _ in range(10_000):
            s = "".join(rng.choice(PRINTABLE) for _ in range(rng.randint(0, 256)))
            assert detokenise(tok.tokenise(s), tok.vocab) == s


@pytest.mark.acceptance("letter-counting scenario: '3' with the subroutine, attributed failure without (< 5 s)")
def test_strawberry():
    with Timer(5):
        for regime in ("A", "B"):
            on = run_scenario(strawberry_scenario(regime, True))
            assert on.output == "3" == str(oracle_count("Strawberry", "r"))
            assert on.report.attributed_phase is None
        exposure = {"A": 0.0, "B": 2 / 9}
        for regime in ("A", "B"):
            off = run_scenario(strawberry_scenario(regime, False))
            assert off.output != "3"
            assert off.report.attributed_phase in ("Tokenisation", "Forward")
            assert off.report.metric("boundary_exposure[Strawberry]").value == exposure[regime]
            assert off.report.metric("subroutine_steps[counting]").value == 0


@pytest.mark.acceptance("counting exactness: 1000 random (string, letter) pairs across three regimes (< 30 s)")
def test_counting_exactness():
    rng = random.Random(99)
    toks = [regime_tokeniser(r) for r in ("A", "B", "byte")]
    alphabet = PRINTABLE.replace("'", "")
    mismatches = []
    with Timer(30):
        for k in range(1000):
            tok = toks[k % 3]
            word = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 64)))
            letter = rng.choice(alphabet.replace(" ", "") + "rR")
            cs = rng.random() < 0.3
            prompt = f"How many times does the letter '{letter}' appear in '{word}'?"
            ids = [tok.vocab.bos] + tok.tokenise(prompt)
            got, _ = count_subroutine(ids, word, letter, tok.vocab, case_sensitive=cs)
            if got != oracle_count(word, letter, cs):
                mismatches.append((word, letter, cs, got))
    assert mismatches == []


@pytest.mark.acceptance("centre embedding: recogniser == CFG oracle on 550 sentences; window-4 baseline "
                        "exact at depth <= 1, imperfect at depth >= 3 (< 30 s)")
def test_centre_embedding():
    tok = regime_tokeniser("B")
    classes = DEFAULT_LEXICON.classes
    items = generate_suite(range(11), 50, DEFAULT_LEXICON, seed=1)
    assert len(items) >= 550
    with Timer(30):
        base_hits = {}
        for it in items:
            truth = oracle_verdict(it.words, classes)
            got = recognise_centre_embedding(tok.tokenise(" ".join(it.words)), tok.vocab, classes)
            assert got.kind == truth.kind, it
            if got.kind == "needs-verb":
                assert got.noun == truth.noun
            ok = baseline_words(it.words, 4, classes).kind == truth.kind
            base_hits.setdefault(it.depth, []).append(ok)
    acc = {d: sum(v) / len(v) for d, v in base_hits.items()}
    assert acc[0] == acc[1] == 1.0
    assert all(acc[d] < 1.0 for d in range(3, 11)), acc


@pytest.mark.acceptance("decode equivalences: beam 1 == greedy (50 specs), beam 2 == oracle beam, "
                        "sampling within 3 sigma over 10^5 draws (< 2 min)")
def test_decode_equivalences():
    with Timer(120):
        for seed in range(50):
            spec = generate_spec(500 + seed, vocab_size=8 + seed % 9)
            vocab = synthetic_vocab(spec.vocab_size)
            cfg = init_configuration([0, 3], vocab, spec)
            greedy = run(cfg, max_tokens=6)
            br = beam_search(cfg, 1, 6)
            assert br.best.config.token_ids() == greedy.config.token_ids(), seed
            g_rows, b_rows = greedy.config.prob_rows(), br.best.config.prob_rows()
            assert b_rows[:len(g_rows)] == g_rows, seed

        for seed in range(20):
            spec = generate_spec(800 + seed, 1, 1, 4, 4, 8, 3)
            cfg = init_configuration([0, 2], synthetic_vocab(3), spec)
            br = beam_search(cfg, 2, 4)
            ob = oracle_beam([0, 2], spec, 1, 2, 4)
            assert (br.best.config.token_ids(), br.best.score) == (list(ob.tokens), ob.score), seed
        for g in GOLDEN["beam2"]:
            spec = spec_of(g["case"])
            br = beam_search(init_configuration(g["prompt"], synthetic_vocab(spec.vocab_size), spec), 2, g["budget"])
            assert br.best.config.token_ids() == g["tokens"]

        # sampling: the selection phase alone, driven 10^5 times against one Tape 6 row
        spec = generate_spec(31, vocab_size=12)
        cfg = init_configuration([0, 5, 2], synthetic_vocab(12), spec, RunOptions(decode="sample"),
                                 RandomTape(seed=4))
        while cfg.state.name != "q_select,draw":
            cfg, _ = step(cfg)
        row = cfg.prob_rows()[-1]
        start = cfg
        counts = [0] * len(row)
        n = 100_000
        rand = start.rand
        for _ in range(n):
            c = replace(start, rand=rand)
            while c.state.name != "q_select,max":
                c = SELECT[c.state.name](c)
            counts[c.state.reg[0]] += 1
            rand = c.rand
        for p_raw, k in zip(row, counts):
            p = p_raw / Q
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(k - n * p) <= 3 * sigma + 1e-9, (p, k)
        support = [(k, n * p / Q) for p, k in zip(row, counts) if p > 0]
        chi2 = sum((k - e) ** 2 / e for k, e in support)
        dof = len(support) - 1
        assert chi2 < stats.chi2.ppf(stats.norm.cdf(3), dof)


@pytest.mark.acceptance("KV-cache equivalence: cached == recomputed on 50 random specs")
def test_kv_cache_equivalence():
    rng = random.Random(5)
    for seed in range(50):
        spec = random_spec(rng, 1000 + seed)
        vocab = synthetic_vocab(spec.vocab_size)
        ids = [0] + [rng.randrange(spec.vocab_size) for _ in range(rng.randint(0, 6))]
        on = run(init_configuration(ids, vocab, spec, RunOptions(kv_cache=True)), max_tokens=5)
        off = run(init_configuration(ids, vocab, spec, RunOptions(kv_cache=False)), max_tokens=5)
        assert on.config.tape(6).cells == off.config.tape(6).cells, seed
        assert on.config.token_ids() == off.config.token_ids()


@pytest.mark.acceptance("machine legality: clean traces, disjoint phases, read-only tapes 3/4, every run terminates")
def test_machine_legality():
    check_state_partition()
    outcomes = [run_scenario(strawberry_scenario(r, c)) for r in ("A", "B", "byte") for c in (True, False)]
    outcomes += [run_scenario(embedding_scenario(d, s)) for d in (0, 1, 2, 5) for s in (True, False)]
    for o in outcomes:
        assert validate_trace(o.trace) == [], o.scenario.name
        assert isinstance(o.result, Halted)
        init = initial_configuration(o.scenario)
        assert o.config.tape(3) == init.tape(3) and o.config.tape(4) == init.tape(4)

    rng = random.Random(17)
    kinds = set()
    for seed in range(40):
        spec = generate_spec(seed, vocab_size=rng.randint(3, 12), l_max=rng.randint(2, 10))
        vocab = synthetic_vocab(spec.vocab_size)
        init = init_configuration([0, 1 + seed % 2], vocab, spec)
        res = run(init, max_steps=rng.randint(1, 400), max_tokens=rng.randint(1, 12))
        assert isinstance(res, (Halted, StepLimit, TokenLimit, ContextViolation))
        kinds.add(type(res).__name__)
        assert validate_trace(res.trace) == []
        assert res.config.tape(3) == init.tape(3) and res.config.tape(4) == init.tape(4)
    assert {"Halted", "StepLimit", "TokenLimit", "ContextViolation"} <= kinds


@pytest.mark.acceptance("numerics: 10^4 softmax rows sum to one, argmax and shift invariance, saturation detector")
def test_numerics():
    rng = random.Random(3)
    for _ in range(10_000):
        n = rng.randint(1, 32)
        v = [rng.randint(-8 * Q, 8 * Q) for _ in range(n)]
        row = nx.softmax_fixed(v)
        assert abs(sum(row) - Q) <= 1 and min(row) >= 0
        assert nx.argmax(row) == nx.argmax(v)
        c = rng.randint(-4 * Q, 4 * Q)
        assert nx.softmax_fixed([x + c for x in v]) == row
    assert head_saturation(dominant_key_alpha())
    assert not head_saturation([Q // 4] * 4)
