"""Forward computation on the tapes (macro fidelity).

Tape 5 layout, all offsets fixed by the spec::

    cell 0                      number of positions held in the KV cache
    per (layer, head), in order K block  L_max * d_k   key rows by position
                                V block  L_max * d_k   value rows by position
                                alpha    L_max         newest attention row
    x        d_model            residual stream of the position in flight
    heads    d_model            concatenated head outputs
    hidden   d_ff               FFN activations
    logits   vocab_size         output scores of the position in flight
    ext      ...                scratch for the counting / stack subroutines

Tape 6 holds one ``#``-prefixed ProbRow per generation round, append-only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

from . import numerics as nx
from .machine.tape import (
    BLANK, DELIM, ContextWindowError, Configuration, ControlState, MachineError, Tape, decode_ids,
)
from .model import ModelSpec


@dataclass(frozen=True)
class Layout:
    spec_dims: tuple
    layers: int
    heads: int
    d_model: int
    d_k: int
    d_ff: int
    l_max: int
    vocab_size: int

    @property
    def kv_stride(self) -> int:
        return 2 * self.l_max * self.d_k + self.l_max

    def k_base(self, layer: int, head: int) -> int:
        return 1 + (layer * self.heads + head) * self.kv_stride

    def v_base(self, layer: int, head: int) -> int:
        return self.k_base(layer, head) + self.l_max * self.d_k

    def alpha_base(self, layer: int, head: int) -> int:
        return self.v_base(layer, head) + self.l_max * self.d_k

    @property
    def x_base(self) -> int:
        return 1 + self.layers * self.heads * self.kv_stride

    @property
    def heads_base(self) -> int:
        return self.x_base + self.d_model

    @property
    def hidden_base(self) -> int:
        return self.heads_base + self.d_model

    @property
    def logits_base(self) -> int:
        return self.hidden_base + self.d_ff

    @property
    def ext_base(self) -> int:
        return self.logits_base + self.vocab_size


@lru_cache(maxsize=64)
def _layout(dims: tuple) -> Layout:
    L, H, dm, dk, dff, lmax, V = dims
    return Layout(dims, L, H, dm, dk, dff, lmax, V)


def layout_for(spec: ModelSpec) -> Layout:
    return _layout((spec.layers, spec.heads, spec.d_model, spec.d_k, spec.d_ff, spec.l_max, spec.vocab_size))


# --- AttentionWorkspace view ---------------------------------------------------

class AttentionWorkspace:
    """Read/write view over the forward regions of a Tape 5 image."""

    def __init__(self, tape: Tape, spec: ModelSpec):
        self.tape = tape
        self.spec = spec
        self.lay = layout_for(spec)

    @property
    def cached(self) -> int:
        n = self.tape.at(0)
        return 0 if n == BLANK else n

    def _row(self, base: int, pos: int) -> list[int]:
        dk = self.lay.d_k
        row = self.tape.region(base + pos * dk, dk)
        if any(v == BLANK for v in row):
            raise MachineError(f"attention workspace: missing cache entry at position {pos}")
        return row

    def key(self, layer: int, head: int, pos: int) -> list[int]:
        return self._row(self.lay.k_base(layer, head), pos)

    def value(self, layer: int, head: int, pos: int) -> list[int]:
        return self._row(self.lay.v_base(layer, head), pos)

    def alpha(self, layer: int, head: int, t: int) -> list[int]:
        return self.tape.region(self.lay.alpha_base(layer, head), t + 1)

    def vector(self, base: int, n: int) -> list[int]:
        vals = self.tape.region(base, n)
        if any(v == BLANK for v in vals):
            raise MachineError(f"attention workspace: region at {base} not written")
        return vals

    def put(self, base: int, values: Sequence[int]) -> "AttentionWorkspace":
        return AttentionWorkspace(self.tape.write_region(base, list(values)), self.spec)


# --- operations -------------------------------------------------------------------

def context_window_check(t: int, spec: ModelSpec) -> bool:
    """True when position ``t`` fits in the context window."""
    return t < spec.l_max


def embed(token_id: int, position: int, spec: ModelSpec, sat: nx.SatFlag | None = None) -> list[int]:
    if not 0 <= token_id < spec.vocab_size:
        raise MachineError(f"token id {token_id} outside vocab_size {spec.vocab_size}")
    if not context_window_check(position, spec):
        raise ContextWindowError(position, spec.l_max)
    return [nx.fxp_add(e, p, sat) for e, p in zip(spec.embed[token_id], spec.pos[position])]


def attention_head(t: int, layer: int, head: int, ws: AttentionWorkspace, query: Sequence[int],
                   sat: nx.SatFlag | None = None) -> tuple[list[int], AttentionWorkspace]:
    """Causal attention for one head over cached keys/values 0..t; writes alpha."""
    spec = ws.spec
    scores = [nx.dot(query, ws.key(layer, head, i), sat) for i in range(t + 1)]
    alpha = nx.softmax_fixed(scores, nx.inv_sqrt(spec.d_k), sat)
    out = [0] * spec.d_k
    for i in range(t + 1):
        v = ws.value(layer, head, i)
        for j in range(spec.d_k):
            out[j] = nx.fxp_mul_acc(out[j], alpha[i], v[j], sat)
    return out, ws.put(ws.lay.alpha_base(layer, head), alpha)


def multi_head(head_outputs: Sequence[Sequence[int]], layer: int, spec: ModelSpec,
               sat: nx.SatFlag | None = None) -> list[int]:
    concat = [v for o in head_outputs for v in o]
    return nx.vec_mat(concat, spec.blocks[layer].wo, sat)


def ffn(x: Sequence[int], layer: int, spec: ModelSpec, sat: nx.SatFlag | None = None) -> tuple[list[int], list[int]]:
    """Returns (output, hidden activations); the caller adds the residual."""
    b = spec.blocks[layer]
    hidden = nx.relu(nx.vec_mat(x, b.w1, sat))
    return nx.vec_mat(hidden, b.w2, sat), hidden


# --- macro handlers -------------------------------------------------------------

def _finish(config: Configuration, state: ControlState, tape5: Tape | None = None, sat: nx.SatFlag | None = None,
            **tapes: Tape) -> Configuration:
    if tape5 is not None:
        config = config.with_tape(tape5)
    for t in tapes.values():
        config = config.with_tape(t)
    return replace(config, state=state, saturated=config.saturated or bool(sat and sat.hit))


def fwd_start(config: Configuration) -> Configuration:
    """Start of a generation round for the neural path: pick the first position to run."""
    spec = config.spec
    ids = decode_ids(config.tape(2))
    if not ids:
        raise MachineError("forward pass on an empty Tape 2")
    newest = len(ids) - 1
    if not context_window_check(newest, spec):
        raise ContextWindowError(newest, spec.l_max)
    lay = layout_for(spec)
    t5 = config.tape(5)
    if config.options.kv_cache:
        start = AttentionWorkspace(t5, spec).cached
    else:
        start = 0
        t5 = t5.write_region(0, [0])
    if start > newest:
        raise MachineError(f"KV cache holds {start} positions but Tape 2 has {len(ids)}")
    t5 = t5.seek(lay.x_base)
    return _finish(config, ControlState.of("q_fwd,embed", start), t5)


def fwd_embed(config: Configuration) -> Configuration:
    (t,) = config.state.reg
    sat = nx.SatFlag()
    ids = decode_ids(config.tape(2))
    x = embed(ids[t], t, config.spec, sat)
    lay = layout_for(config.spec)
    t5 = config.tape(5).write_region(lay.x_base, x).seek(lay.x_base)
    return _finish(config, ControlState.of("q_attn,weight", t, 0), t5, sat)


def fwd_attn_weight(config: Configuration) -> Configuration:
    """All heads of one layer: project, append K/V to the cache, attend."""
    t, layer = config.state.reg
    spec = config.spec
    sat = nx.SatFlag()
    ws = AttentionWorkspace(config.tape(5), spec)
    lay = ws.lay
    x = ws.vector(lay.x_base, spec.d_model)
    block = spec.blocks[layer]
    outs = []
    for h in range(spec.heads):
        q = nx.vec_mat(x, block.wq[h], sat)
        k = nx.vec_mat(x, block.wk[h], sat)
        v = nx.vec_mat(x, block.wv[h], sat)
        ws = ws.put(lay.k_base(layer, h) + t * spec.d_k, k).put(lay.v_base(layer, h) + t * spec.d_k, v)
        o, ws = attention_head(t, layer, h, ws, q, sat)
        outs.append(o)
    ws = ws.put(lay.heads_base, [v for o in outs for v in o])
    t5 = ws.tape.seek(lay.heads_base)
    return _finish(config, ControlState.of("q_attn,concat", t, layer), t5, sat)


def fwd_attn_concat(config: Configuration) -> Configuration:
    t, layer = config.state.reg
    spec = config.spec
    sat = nx.SatFlag()
    ws = AttentionWorkspace(config.tape(5), spec)
    lay = ws.lay
    concat = ws.vector(lay.heads_base, spec.d_model)
    heads = [concat[h * spec.d_k:(h + 1) * spec.d_k] for h in range(spec.heads)]
    attn = multi_head(heads, layer, spec, sat)
    x = [nx.fxp_add(a, b, sat) for a, b in zip(ws.vector(lay.x_base, spec.d_model), attn)]
    t5 = ws.put(lay.x_base, x).tape.seek(lay.x_base)
    return _finish(config, ControlState.of("q_fwd,ffn", t, layer), t5, sat)


def fwd_ffn(config: Configuration) -> Configuration:
    t, layer = config.state.reg
    spec = config.spec
    sat = nx.SatFlag()
    ws = AttentionWorkspace(config.tape(5), spec)
    lay = ws.lay
    x = ws.vector(lay.x_base, spec.d_model)
    out, hidden = ffn(x, layer, spec, sat)
    x = [nx.fxp_add(a, b, sat) for a, b in zip(x, out)]
    ws = ws.put(lay.hidden_base, hidden).put(lay.x_base, x)
    nxt = ControlState.of("q_attn,weight", t, layer + 1) if layer + 1 < spec.layers else ControlState.of("q_fwd,out", t)
    return _finish(config, nxt, ws.tape.seek(lay.x_base), sat)


def fwd_out(config: Configuration) -> Configuration:
    """Logits into Tape 5; for the newest position also a ProbRow onto Tape 6."""
    (t,) = config.state.reg
    spec = config.spec
    sat = nx.SatFlag()
    ws = AttentionWorkspace(config.tape(5), spec)
    lay = ws.lay
    logits = nx.vec_mat(ws.vector(lay.x_base, spec.d_model), spec.w_out, sat)
    ws = ws.put(lay.logits_base, logits).put(0, [t + 1])
    newest = len(decode_ids(config.tape(2))) - 1
    if t < newest:
        return _finish(config, ControlState.of("q_fwd,embed", t + 1), ws.tape.seek(lay.logits_base), sat)
    row = nx.softmax_fixed(logits, nx.ONE, sat)
    t6 = config.tape(6)
    start = len(t6.cells)
    t6 = t6.write_region(start, [DELIM, *row]).seek(start + 1)
    if config.options.decode == "sample":
        nxt = ControlState.of("q_select,draw")
    else:
        nxt = ControlState.of("q_select,scan", 0, -1, -1)
    return _finish(config, nxt, ws.tape.seek(lay.logits_base), sat, t6=t6)


HANDLERS = {
    "q_fwd,embed": fwd_embed,
    "q_attn,weight": fwd_attn_weight,
    "q_attn,concat": fwd_attn_concat,
    "q_fwd,ffn": fwd_ffn,
    "q_fwd,out": fwd_out,
}


def current_logits(config: Configuration) -> list[int]:
    lay = layout_for(config.spec)
    return AttentionWorkspace(config.tape(5), config.spec).vector(lay.logits_base, config.spec.vocab_size)


def kv_image(config: Configuration) -> list:
    """The K/V cache regions of Tape 5 (alpha rows excluded)."""
    spec = config.spec
    lay = layout_for(spec)
    t5 = config.tape(5)
    out = []
    for layer in range(spec.layers):
        for h in range(spec.heads):
            out += t5.region(lay.k_base(layer, h), 2 * spec.l_max * spec.d_k)
    return out
