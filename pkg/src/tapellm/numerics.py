"""Integer-only fixed-point kernel.

Values are plain Python ints holding ``raw`` in Q(total_bits - frac_bits).frac_bits,
i.e. the real value is ``raw / 2**frac_bits``. Every operation saturates to
``+-(2**(total_bits-1) - 1)`` instead of wrapping, and every dropped fraction is
rounded to nearest, ties to even.

The forward pass on the tapes and the array-based oracle both call into this
module, so the same inputs give the same raw outputs everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

FRAC_BITS = 16
TOTAL_BITS = 32
ONE = 1 << FRAC_BITS
QUANTUM = 1
RAW_MAX = (1 << (TOTAL_BITS - 1)) - 1
RAW_MIN = -RAW_MAX

# log2(e) in Q16, folded into the softmax scale so the kernel can use base 2.
LOG2E = 94548

# 2**f on [0, 1): minimax cubic, Q30, pinned so p(0) = 1 and p(1) = 2.
_EXP2_POLY_Q = 30
_EXP2_POLY = (1073741824, 746706015, 242996768, 84039041)

# log2(1 + t) on [0, 1): minimax degree 8, Q40, pinned so p(0) = 0 and p(1) = 1.
_LOG2_POLY_Q = 40
_LOG2_POLY = (
    0,
    1586254431779,
    -792930746094,
    526306548120,
    -381750154437,
    265556224395,
    -150598630977,
    56767804590,
    -10093849600,
)


@dataclass
class SatFlag:
    """Sticky saturation flag; one per machine run."""

    hit: bool = False


def rne_shift(x: int, n: int) -> int:
    """``x / 2**n`` rounded to nearest, ties to even (n >= 0)."""
    if n <= 0:
        return x << -n
    q = x >> n
    r = x - (q << n)
    half = 1 << (n - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def rne_div(num: int, den: int) -> int:
    """``num / den`` rounded to nearest, ties to even (den > 0)."""
    q, r = divmod(num, den)
    twice = 2 * r
    if twice > den or (twice == den and q & 1):
        q += 1
    return q


def saturate(x: int, sat: SatFlag | None = None) -> int:
    if x > RAW_MAX:
        if sat is not None:
            sat.hit = True
        return RAW_MAX
    if x < RAW_MIN:
        if sat is not None:
            sat.hit = True
        return RAW_MIN
    return x


def from_float(v: float) -> int:
    """Quantise a float (test and file-generation helper only)."""
    return saturate(round(v * ONE))


def to_float(raw: int) -> float:
    return raw / ONE


def fxp_add(a: int, b: int, sat: SatFlag | None = None) -> int:
    return saturate(a + b, sat)


def fxp_mul(a: int, b: int, sat: SatFlag | None = None) -> int:
    return saturate(rne_shift(a * b, FRAC_BITS), sat)


def fxp_mul_acc(acc: int, a: int, b: int, sat: SatFlag | None = None) -> int:
    """``acc + a*b``; the product is rounded before the saturating add."""
    return saturate(acc + rne_shift(a * b, FRAC_BITS), sat)


def dot(xs: Sequence[int], ys: Sequence[int], sat: SatFlag | None = None) -> int:
    """Sequential multiply-accumulate in index order."""
    acc = 0
    for a, b in zip(xs, ys):
        acc = fxp_mul_acc(acc, a, b, sat)
    return acc


def vec_mat(x: Sequence[int], mat: Sequence[Sequence[int]], sat: SatFlag | None = None) -> list[int]:
    """Row vector times a row-major matrix (len(x) rows)."""
    cols = len(mat[0]) if mat else 0
    out = []
    for j in range(cols):
        acc = 0
        for i, xi in enumerate(x):
            acc = fxp_mul_acc(acc, xi, mat[i][j], sat)
        out.append(acc)
    return out


def relu(x: Sequence[int]) -> list[int]:
    return [v if v > 0 else 0 for v in x]


def inv_sqrt(n: int) -> int:
    """Raw value of ``1/sqrt(n)`` for a positive integer, correctly rounded."""
    if n <= 0:
        raise ValueError("inv_sqrt needs a positive integer")
    # floor(2**40 / sqrt(n)) then drop 24 bits with RNE
    return rne_shift(math.isqrt((1 << 80) // n), 24)


def exp2_approx(x: int) -> int:
    """2**x for raw x: integer shift for the integer part, cubic for the fraction.

    Negative inputs never return 1.0 (2**x < 1 there), which keeps the maximum of a
    softmax row strictly above every other entry.
    """
    n = x >> FRAC_BITS
    frac = x - (n << FRAC_BITS)
    t = frac << (_EXP2_POLY_Q - FRAC_BITS)
    acc = _EXP2_POLY[-1]
    for c in reversed(_EXP2_POLY[:-1]):
        acc = rne_shift(acc * t, _EXP2_POLY_Q) + c
    # acc is 2**frac in Q30; result in Q16 is acc * 2**n >> 14
    shift = _EXP2_POLY_Q - FRAC_BITS - n
    if shift < 0:
        val = acc << -shift
    else:
        val = rne_shift(acc, shift)
    if x < 0 and val >= ONE:
        val = ONE - 1
    return min(val, RAW_MAX)


def exp2_sat(x: int, sat: SatFlag | None = None) -> int:
    val = exp2_approx(x)
    if val == RAW_MAX and sat is not None:
        sat.hit = True
    return val


def log2_approx(p: int) -> int:
    """Base-2 logarithm of a positive raw value, as a raw value."""
    if p <= 0:
        raise ValueError(f"log2_approx domain error: raw {p} <= 0")
    k = p.bit_length() - 1
    exponent = k - FRAC_BITS
    # mantissa p / 2**k in [1, 2) as 1 + t, t in Q40 (exact since k <= 30)
    t = (p << (_LOG2_POLY_Q - k)) - (1 << _LOG2_POLY_Q)
    acc = _LOG2_POLY[-1]
    for c in reversed(_LOG2_POLY[:-1]):
        acc = rne_shift(acc * t, _LOG2_POLY_Q) + c
    return (exponent << FRAC_BITS) + rne_shift(acc, _LOG2_POLY_Q - FRAC_BITS)


def softmax_fixed(logits: Sequence[int], scale: int = ONE, sat: SatFlag | None = None) -> list[int]:
    """Base-2 softmax over ``scale * logits``; the row sums to exactly ONE.

    The maximum is subtracted first, so adding a constant to every logit gives a
    bit-identical row. Normalisation uses largest-remainder rounding, with ties
    going to the larger exponential, then the larger logit, then the lower index.
    The logit key keeps the row weakly monotone when nearby logits round to the
    same exponential.
    """
    if not logits:
        raise ValueError("softmax_fixed needs a non-empty vector")
    if scale <= 0:
        raise ValueError("softmax_fixed needs scale > 0")
    top = max(logits)
    fold = fxp_mul(scale, LOG2E, sat)
    exps = []
    for v in logits:
        d = saturate(v - top, sat)
        exps.append(exp2_sat(fxp_mul(d, fold, sat), sat))
    total = sum(exps)
    base = []
    rems = []
    for i, e in enumerate(exps):
        q, r = divmod(e * ONE, total)
        base.append(q)
        rems.append((-r, -e, -logits[i], i))
    short = ONE - sum(base)
    for *_, i in sorted(rems)[:short]:
        base[i] += 1
    return base


def argmax(values: Sequence[int]) -> int:
    """Index of the largest value, lowest index on ties."""
    if not values:
        raise ValueError("argmax of an empty row")
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best
