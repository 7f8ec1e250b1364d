"""Reference implementations that never touch a tape.

The fixed-point forward pass shares the numerics kernel with the tape pipeline so
any disagreement points at pipeline structure; ``float_forward`` is a plain
float64 re-derivation that guards against a bug living in the kernel itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .grammar import COMPLETE, DET, INVALID, NEEDS_VERB, NOUN, THAT, VERB, Lexicon, Verdict, word_class
from .model import ModelSpec


def oracle_forward(ids: Sequence[int], spec: ModelSpec, sat: nx.SatFlag | None = None) -> list[list[int]]:
    """Logits (raw) for every position of ``ids``; full recomputation, no cache."""
    n = len(ids)
    if n > spec.l_max:
        raise ValueError(f"sequence length {n} exceeds L_max {spec.l_max}")
    for t, tid in enumerate(ids):
        if not 0 <= tid < spec.vocab_size:
            raise ValueError(f"token id {tid} at position {t} outside vocab_size {spec.vocab_size}")
    dk = spec.d_k
    scale = nx.inv_sqrt(dk)
    xs = [[nx.fxp_add(e, p, sat) for e, p in zip(spec.embed[tid], spec.pos[t])] for t, tid in enumerate(ids)]
    for block in spec.blocks:
        qs = [[nx.vec_mat(x, block.wq[h], sat) for x in xs] for h in range(spec.heads)]
        ks = [[nx.vec_mat(x, block.wk[h], sat) for x in xs] for h in range(spec.heads)]
        vs = [[nx.vec_mat(x, block.wv[h], sat) for x in xs] for h in range(spec.heads)]
        new_xs = []
        for t in range(n):
            concat: list[int] = []
            for h in range(spec.heads):
                scores = [nx.dot(qs[h][t], ks[h][i], sat) for i in range(t + 1)]
                alpha = nx.softmax_fixed(scores, scale, sat)
                out = [0] * dk
                for i in range(t + 1):
                    for j in range(dk):
                        out[j] = nx.fxp_mul_acc(out[j], alpha[i], vs[h][i][j], sat)
                concat += out
            attn = nx.vec_mat(concat, block.wo, sat)
            x = [nx.fxp_add(a, b, sat) for a, b in zip(xs[t], attn)]
            hidden = nx.relu(nx.vec_mat(x, block.w1, sat))
            ff = nx.vec_mat(hidden, block.w2, sat)
            new_xs.append([nx.fxp_add(a, b, sat) for a, b in zip(x, ff)])
        xs = new_xs
    return [nx.vec_mat(x, spec.w_out, sat) for x in xs]


def oracle_probs(ids: Sequence[int], spec: ModelSpec) -> list[int]:
    """ProbRow for the next token after ``ids``."""
    return nx.softmax_fixed(oracle_forward(ids, spec)[-1], nx.ONE)


def float_forward(ids: Sequence[int], spec: ModelSpec) -> np.ndarray:
    """Same architecture in float64 with the natural-base softmax."""

    def m(mat):
        return np.asarray(mat, dtype=np.float64) / nx.ONE

    n = len(ids)
    x = m(spec.embed)[list(ids)] + m(spec.pos)[:n]
    mask = np.tril(np.ones((n, n), dtype=bool))
    for b in spec.blocks:
        heads = []
        for h in range(spec.heads):
            q, k, v = x @ m(b.wq[h]), x @ m(b.wk[h]), x @ m(b.wv[h])
            s = np.where(mask, q @ k.T / np.sqrt(spec.d_k), -np.inf)
            s = s - s.max(axis=1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=1, keepdims=True)
            heads.append(w @ v)
        x = x + np.concatenate(heads, axis=1) @ m(b.wo)
        x = x + np.maximum(x @ m(b.w1), 0.0) @ m(b.w2)
    return x @ m(spec.w_out)


def oracle_count(text: str, letter: str, case_sensitive: bool = False) -> int:
    if not case_sensitive:
        text, letter = text.lower(), letter.lower()
    return sum(1 for ch in text if ch == letter)


def oracle_centre_embedding(depth: int, lexicon: Lexicon, rng=None) -> tuple[list[str], str | None]:
    """Depth-``depth`` sentence and the verb it still needs (None when complete).

    Depth 0 is the complete ``The cat fled`` shape; deeper sentences stop after
    the embedded verbs, leaving the outermost subject without its main verb.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth + 1 > min(len(lexicon.nouns), len(lexicon.verbs)):
        raise ValueError(f"lexicon too small for depth {depth}")
    if rng is None:
        nouns = list(lexicon.nouns[:depth + 1])
        verbs = list(lexicon.verbs[:depth + 1])
    else:
        nouns = rng.sample(list(lexicon.nouns), depth + 1)
        verbs = rng.sample(list(lexicon.verbs), depth + 1)
    words = ["The", nouns[0]]
    for noun in nouns[1:]:
        words += [lexicon.that, lexicon.det, noun]
    words += list(reversed(verbs[1:]))
    if depth == 0:
        return words + [verbs[0]], None
    return words, verbs[0]


class _Syntax(Exception):
    pass


def oracle_verdict(words: Sequence[str], classes) -> Verdict:
    """Recursive-descent check against S -> Det N [R] V, R -> that Det N [R] V.

    Words outside the four classes are skipped. A prefix that ends where verbs
    are due reports how many are missing.
    """
    seq = [(w.strip().lower(), c) for w in words if (c := word_class(w, classes)) in (NOUN, VERB, THAT, DET)]

    def expect(i, cls):
        if i >= len(seq) or seq[i][1] != cls:
            raise _Syntax(i)
        return i + 1

    def clause(i, relative):
        if relative:
            i = expect(i, THAT)
        i = expect(i, DET)
        i = expect(i, NOUN)
        noun = seq[i - 1][0]
        if i < len(seq) and seq[i][1] == THAT:
            i, missing, _ = clause(i, True)
            if missing:
                return i, missing + 1, noun
        if i >= len(seq):
            return i, 1, noun
        return expect(i, VERB), 0, noun

    try:
        i, missing, outer = clause(0, False)
    except _Syntax:
        return Verdict(INVALID, reason="syntax")
    if missing == 0:
        if i == len(seq):
            return Verdict(COMPLETE)
        if all(c == VERB for _, c in seq[i:]):
            return Verdict(INVALID, reason="underflow")
        return Verdict(INVALID, reason="syntax")
    if missing == 1:
        return Verdict(NEEDS_VERB, noun=outer)
    return Verdict(INVALID, reason="leftover")


@dataclass(frozen=True)
class OracleBeam:
    tokens: tuple[int, ...]
    score: int
    finished: bool


def oracle_beam(prompt_ids: Sequence[int], spec: ModelSpec, eos_id: int, width: int, budget: int) -> OracleBeam:
    """Array-based beam search with the pipeline's scoring and tie rules.

    Candidates are ranked by (score desc, parent slot asc, token id asc); beams
    that emit ``<eos>`` keep their slot frozen. The answer is the best frozen
    ``<eos>`` beam, or the best beam overall if none finished.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    # (tokens, score, alive, finished)
    beams = [(tuple(prompt_ids), 0, len(prompt_ids) <= spec.l_max, False)]
    for _ in range(budget):
        if not any(b[2] for b in beams):
            break
        cands = []
        for slot, (toks, score, alive, finished) in enumerate(beams):
            if not alive:
                cands.append((-score, slot, -1, (toks, score, False, finished)))
                continue
            row = oracle_probs(toks, spec)
            for tid, p in enumerate(row):
                if p > 0:
                    s = score + nx.log2_approx(p)
                    child = toks + (tid,)
                    done = tid == eos_id
                    cands.append((-s, slot, tid, (child, s, not done and len(child) <= spec.l_max, done)))
        cands.sort(key=lambda c: c[:3])
        beams = [c[3] for c in cands[:width]]
    done = [(i, b) for i, b in enumerate(beams) if b[3]]
    pool = done or list(enumerate(beams))
    _, best = min(pool, key=lambda ib: (-ib[1][1], ib[0]))
    return OracleBeam(best[0], best[1], best[3])


def exhaustive_best(prompt_ids: Sequence[int], spec: ModelSpec, eos_id: int, budget: int) -> tuple[tuple[int, ...], int]:
    """Best ``<eos>``-terminated continuation of at most ``budget`` tokens by enumeration."""
    best = None
    frontier = [(tuple(prompt_ids), 0)]
    for _ in range(budget):
        nxt = []
        for toks, score in frontier:
            row = oracle_probs(toks, spec)
            for tid, p in enumerate(row):
                if p <= 0:
                    continue
                s = score + nx.log2_approx(p)
                if tid == eos_id:
                    if best is None or s > best[1]:
                        best = (toks + (tid,), s)
                elif len(toks) + 1 <= spec.l_max:
                    nxt.append((toks + (tid,), s))
        frontier = nxt
    return best
