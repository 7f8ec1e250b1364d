"""Model specification (Tape 4): dimensions plus fixed-point weights.

Weights are nested tuples of raw ints. Matrices are row-major and are applied
to row vectors (``y = x @ W``), so ``W^Q`` is ``d_model x d_k``.

Synthetic specs come from a splitmix64 stream: output ``k`` of seed ``s`` is
``mix(s + (k+1) * 0x9E3779B97F4A7C15)``; each weight takes one output ``z`` and
maps it to ``(z >> 47) - 65536``, a raw value uniform on [-1, 1). Weights are
drawn in the field order of ``_weight_shapes``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from . import numerics as nx

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class SpecError(ValueError):
    """Dimension or schema violation in a model spec."""


def splitmix64(seed: int) -> Iterator[int]:
    state = seed & MASK64
    while True:
        state = (state + GOLDEN) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


Matrix = tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class LayerWeights:
    wq: tuple[Matrix, ...]  # per head, d_model x d_k
    wk: tuple[Matrix, ...]
    wv: tuple[Matrix, ...]
    wo: Matrix  # d_model x d_model
    w1: Matrix  # d_model x d_ff
    w2: Matrix  # d_ff x d_model


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    heads: int
    d_model: int
    d_ff: int
    l_max: int
    vocab_size: int
    embed: Matrix  # vocab_size x d_model
    pos: Matrix  # l_max x d_model
    w_out: Matrix  # d_model x vocab_size
    blocks: tuple[LayerWeights, ...]
    frac_bits: int = nx.FRAC_BITS

    def __post_init__(self) -> None:
        validate_spec(self)

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def tape_cells(self) -> tuple:
        """Tape 4 image: header cells, then every weight in field order."""
        cells: list = ["L", self.layers, "H", self.heads, "d_model", self.d_model, "d_ff", self.d_ff,
                       "L_max", self.l_max, "V", self.vocab_size, "frac_bits", self.frac_bits]
        for _, mat in _iter_matrices(self):
            for row in mat:
                cells.extend(row)
        return tuple(cells)


def _shape(mat) -> tuple[int, int]:
    return len(mat), (len(mat[0]) if len(mat) else 0)


def validate_spec(spec: ModelSpec) -> None:
    if spec.frac_bits != nx.FRAC_BITS:
        raise SpecError(f"frac_bits {spec.frac_bits} unsupported (kernel uses {nx.FRAC_BITS})")
    for name in ("layers", "heads", "d_model", "d_ff", "l_max", "vocab_size"):
        if getattr(spec, name) < 1:
            raise SpecError(f"{name} must be >= 1")
    if spec.d_model % spec.heads:
        raise SpecError(f"d_model {spec.d_model} is not heads {spec.heads} x d_k")
    if len(spec.blocks) != spec.layers:
        raise SpecError(f"{len(spec.blocks)} layer blocks for layers={spec.layers}")
    for name, mat in _iter_matrices(spec):
        want = _expected_shape(spec, name)
        rows, cols = _shape(mat)
        if (rows, cols) != want or any(len(r) != cols for r in mat):
            raise SpecError(f"{name}: shape {rows}x{cols}, expected {want[0]}x{want[1]}")
        for row in mat:
            for v in row:
                if not isinstance(v, int) or abs(v) > nx.RAW_MAX:
                    raise SpecError(f"{name}: raw value {v!r} outside the 32-bit saturation bound")


def _expected_shape(spec: ModelSpec, name: str) -> tuple[int, int]:
    kind = name.rsplit(".", 1)[-1].split("[")[0]
    return {
        "embed": (spec.vocab_size, spec.d_model),
        "pos": (spec.l_max, spec.d_model),
        "w_out": (spec.d_model, spec.vocab_size),
        "wq": (spec.d_model, spec.d_k),
        "wk": (spec.d_model, spec.d_k),
        "wv": (spec.d_model, spec.d_k),
        "wo": (spec.d_model, spec.d_model),
        "w1": (spec.d_model, spec.d_ff),
        "w2": (spec.d_ff, spec.d_model),
    }[kind]


def _iter_matrices(spec: ModelSpec):
    yield "embed", spec.embed
    yield "pos", spec.pos
    for li, b in enumerate(spec.blocks):
        for h in range(len(b.wq)):
            yield f"blocks[{li}].wq[{h}]", b.wq[h]
            yield f"blocks[{li}].wk[{h}]", b.wk[h]
            yield f"blocks[{li}].wv[{h}]", b.wv[h]
        yield f"blocks[{li}].wo", b.wo
        yield f"blocks[{li}].w1", b.w1
        yield f"blocks[{li}].w2", b.w2
    yield "w_out", spec.w_out


def _weight_shapes(layers, heads, d_model, d_ff, l_max, vocab_size):
    d_k = d_model // heads
    shapes = [("embed", vocab_size, d_model), ("pos", l_max, d_model)]
    for li in range(layers):
        for h in range(heads):
            shapes += [(f"wq{li}.{h}", d_model, d_k), (f"wk{li}.{h}", d_model, d_k), (f"wv{li}.{h}", d_model, d_k)]
        shapes += [(f"wo{li}", d_model, d_model), (f"w1{li}", d_model, d_ff), (f"w2{li}", d_ff, d_model)]
    shapes.append(("w_out", d_model, vocab_size))
    return shapes


def generate_spec(seed: int, layers: int = 1, heads: int = 1, d_model: int = 8, d_ff: int = 16,
                  l_max: int = 16, vocab_size: int = 16) -> ModelSpec:
    """Deterministic synthetic spec from ``seed`` (see module docstring)."""
    if heads < 1 or d_model % heads:
        raise SpecError(f"d_model {d_model} is not heads {heads} x d_k")
    rng = splitmix64(seed)
    mats = {}
    for name, rows, cols in _weight_shapes(layers, heads, d_model, d_ff, l_max, vocab_size):
        mats[name] = tuple(tuple((next(rng) >> 47) - nx.ONE for _ in range(cols)) for _ in range(rows))
    blocks = tuple(
        LayerWeights(
            wq=tuple(mats[f"wq{li}.{h}"] for h in range(heads)),
            wk=tuple(mats[f"wk{li}.{h}"] for h in range(heads)),
            wv=tuple(mats[f"wv{li}.{h}"] for h in range(heads)),
            wo=mats[f"wo{li}"], w1=mats[f"w1{li}"], w2=mats[f"w2{li}"],
        )
        for li in range(layers)
    )
    return ModelSpec(layers, heads, d_model, d_ff, l_max, vocab_size,
                     mats["embed"], mats["pos"], mats["w_out"], blocks)


def zeros(rows: int, cols: int) -> Matrix:
    return tuple(tuple(0 for _ in range(cols)) for _ in range(rows))


def zero_spec(layers=1, heads=1, d_model=4, d_ff=4, l_max=16, vocab_size=4) -> ModelSpec:
    d_k = d_model // heads
    block = LayerWeights(
        wq=tuple(zeros(d_model, d_k) for _ in range(heads)),
        wk=tuple(zeros(d_model, d_k) for _ in range(heads)),
        wv=tuple(zeros(d_model, d_k) for _ in range(heads)),
        wo=zeros(d_model, d_model), w1=zeros(d_model, d_ff), w2=zeros(d_ff, d_model),
    )
    return ModelSpec(layers, heads, d_model, d_ff, l_max, vocab_size, zeros(vocab_size, d_model),
                     zeros(l_max, d_model), zeros(d_model, vocab_size), tuple(block for _ in range(layers)))


# --- files --------------------------------------------------------------------

def _flat(mat: Matrix) -> list[int]:
    return [v for row in mat for v in row]


def _unflat(flat, rows: int, cols: int, where: str) -> Matrix:
    if not isinstance(flat, list) or len(flat) != rows * cols:
        got = len(flat) if isinstance(flat, list) else type(flat).__name__
        raise SpecError(f"{where}: expected {rows * cols} raw values, got {got}")
    return tuple(tuple(flat[r * cols:(r + 1) * cols]) for r in range(rows))


def spec_to_json(spec: ModelSpec) -> dict:
    return {
        "dims": {"layers": spec.layers, "heads": spec.heads, "d_model": spec.d_model, "d_ff": spec.d_ff,
                 "l_max": spec.l_max, "vocab_size": spec.vocab_size},
        "frac_bits": spec.frac_bits,
        "total_bits": nx.TOTAL_BITS,
        "embed": _flat(spec.embed),
        "pos": _flat(spec.pos),
        "w_out": _flat(spec.w_out),
        "layers": [
            {"wq": [_flat(m) for m in b.wq], "wk": [_flat(m) for m in b.wk], "wv": [_flat(m) for m in b.wv],
             "wo": _flat(b.wo), "w1": _flat(b.w1), "w2": _flat(b.w2)}
            for b in spec.blocks
        ],
    }


def dumps_spec(spec: ModelSpec) -> str:
    return json.dumps(spec_to_json(spec), separators=(",", ":")) + "\n"


def save_spec(path: str | Path, spec: ModelSpec) -> None:
    Path(path).write_text(dumps_spec(spec), encoding="utf-8")


def parse_spec(data: dict) -> ModelSpec:
    try:
        dims = data["dims"]
        L, H, dm, dff = dims["layers"], dims["heads"], dims["d_model"], dims["d_ff"]
        lmax, V = dims["l_max"], dims["vocab_size"]
        frac = data.get("frac_bits", nx.FRAC_BITS)
        if data.get("total_bits", nx.TOTAL_BITS) != nx.TOTAL_BITS:
            raise SpecError(f"total_bits {data['total_bits']} unsupported")
        if H < 1 or dm % H:
            raise SpecError(f"d_model {dm} is not heads {H} x d_k")
        dk = dm // H
        if len(data["layers"]) != L:
            raise SpecError(f"{len(data['layers'])} layer blocks for layers={L}")
        blocks = []
        for li, b in enumerate(data["layers"]):
            for key in ("wq", "wk", "wv"):
                if len(b[key]) != H:
                    raise SpecError(f"layers[{li}].{key}: {len(b[key])} heads, expected {H}")
            blocks.append(LayerWeights(
                wq=tuple(_unflat(m, dm, dk, f"layers[{li}].wq") for m in b["wq"]),
                wk=tuple(_unflat(m, dm, dk, f"layers[{li}].wk") for m in b["wk"]),
                wv=tuple(_unflat(m, dm, dk, f"layers[{li}].wv") for m in b["wv"]),
                wo=_unflat(b["wo"], dm, dm, f"layers[{li}].wo"),
                w1=_unflat(b["w1"], dm, dff, f"layers[{li}].w1"),
                w2=_unflat(b["w2"], dff, dm, f"layers[{li}].w2"),
            ))
        return ModelSpec(L, H, dm, dff, lmax, V, _unflat(data["embed"], V, dm, "embed"),
                         _unflat(data["pos"], lmax, dm, "pos"), _unflat(data["w_out"], dm, V, "w_out"),
                         tuple(blocks), frac)
    except KeyError as exc:
        raise SpecError(f"missing field {exc.args[0]!r}") from exc


def load_spec(path: str | Path) -> ModelSpec:
    return parse_spec(json.loads(Path(path).read_text(encoding="utf-8")))
