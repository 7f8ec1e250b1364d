"""Byte-level BPE: vocabularies, merge rules, tokenise / detokenise, regimes.

Token strings are bytes. In vocabulary files they are written as text with one
code point per byte (latin-1), which keeps arbitrary single-byte tokens
representable and the round trip bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
SPECIAL_NAMES = (BOS, EOS, UNK)

SPACE = 0x20

# Words that get their own merge chains in every scenario vocabulary.
PROMPT_WORDS = (
    "How", " many", " times", " does", " the", " letter", " appear", " in",
    "Complete", " sentence",
)
LEXICON_WORDS = (
    "The", " The", " the", " that",
    " cat", " dog", " mouse", " rat", " bird", " fox", " owl", " cow", " pig", " hen", " bee", " ant", " elk",
    " fled", " chased", " feared", " bit", " saw", " liked", " fed", " hit", " met", " led", " won", " ran",
)


class VocabError(ValueError):
    """Schema or invariant violation in a vocabulary file."""


@dataclass(frozen=True)
class MergeRule:
    left: bytes
    right: bytes
    priority: int


@dataclass
class Vocabulary:
    """Bijective token-string <-> id map with special-token ids."""

    entries: dict[int, bytes]
    specials: dict[str, int]
    byte_fallback: bool = True
    frequencies: dict[int, int] = field(default_factory=dict)
    # carried for fidelity with Tape 3 contents; never applied
    subword_regularisation: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.ids: dict[bytes, int] = {}
        for tid, s in self.entries.items():
            if s in self.ids:
                raise VocabError(f"token string {s!r} has ids {self.ids[s]} and {tid}")
            self.ids[s] = tid
        for name in SPECIAL_NAMES:
            if name not in self.specials:
                raise VocabError(f"missing special token {name}")
            if self.specials[name] not in self.entries:
                raise VocabError(f"special {name} id {self.specials[name]} is not a vocabulary entry")
        if self.byte_fallback:
            missing = [b for b in range(256) if bytes([b]) not in self.ids]
            if missing:
                raise VocabError(f"byte_fallback set but {len(missing)} single bytes are missing")
        self._special_ids = frozenset(self.specials.values())

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def bos(self) -> int:
        return self.specials[BOS]

    @property
    def eos(self) -> int:
        return self.specials[EOS]

    @property
    def unk(self) -> int:
        return self.specials[UNK]

    def is_special(self, tid: int) -> bool:
        return tid in self._special_ids

    def token_bytes(self, tid: int) -> bytes:
        """Rendered bytes of a token (specials render empty)."""
        if tid not in self.entries:
            raise KeyError(tid)
        return b"" if tid in self._special_ids else self.entries[tid]

    def id_of(self, text: str | bytes) -> int:
        key = text.encode("utf-8") if isinstance(text, str) else text
        return self.ids[key]

    def tape_cells(self) -> tuple:
        """Tape 3 image: one cell per entry, then one per merge is added by the caller."""
        return tuple((tid, self.entries[tid].decode("latin-1")) for tid in sorted(self.entries))


@dataclass(frozen=True)
class Tokeniser:
    vocab: Vocabulary
    rules: tuple[MergeRule, ...]

    def __post_init__(self) -> None:
        seen = set()
        for r in self.rules:
            if r.priority in seen:
                raise VocabError(f"duplicate merge priority {r.priority}")
            seen.add(r.priority)
            if r.left + r.right not in self.vocab.ids:
                raise VocabError(f"merge result {(r.left + r.right)!r} is not in the vocabulary")
        ranks = {(r.left, r.right): r.priority for r in self.rules}
        object.__setattr__(self, "_ranks", ranks)

    def tape_cells(self) -> tuple:
        merges = tuple(("merge", r.priority, r.left.decode("latin-1"), r.right.decode("latin-1"))
                       for r in sorted(self.rules, key=lambda r: r.priority))
        return self.vocab.tape_cells() + merges

    def bpe(self, chunk: bytes) -> list[bytes]:
        """Apply merges to one chunk until none applies."""
        pieces = [bytes([b]) for b in chunk]
        ranks = self._ranks
        while len(pieces) > 1:
            best = None
            for i in range(len(pieces) - 1):
                rank = ranks.get((pieces[i], pieces[i + 1]))
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, i)
            if best is None:
                break
            i = best[1]
            pieces[i:i + 2] = [pieces[i] + pieces[i + 1]]
        return pieces

    def chunk_ids(self, chunk: bytes, unknown: list | None = None) -> list[int]:
        out = []
        for piece in self.bpe(chunk):
            tid = self.vocab.ids.get(piece)
            if tid is None:
                if unknown is not None:
                    unknown.append(piece)
                tid = self.vocab.unk
            out.append(tid)
        return out

    def tokenise(self, text: str | bytes, unknown: list | None = None) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else text
        ids: list[int] = []
        for chunk in split_chunks(data):
            ids.extend(self.chunk_ids(chunk, unknown))
        return ids

    def detokenise(self, ids: Sequence[int]) -> str:
        return detokenise(ids, self.vocab)


def starts_chunk(prev: int | None, b: int) -> bool:
    """Chunk boundary before byte ``b``: a space that follows a non-space."""
    return prev is not None and b == SPACE and prev != SPACE


def split_chunks(data: bytes) -> list[bytes]:
    chunks: list[bytes] = []
    cur = bytearray()
    prev = None
    for b in data:
        if starts_chunk(prev, b) and cur:
            chunks.append(bytes(cur))
            cur = bytearray()
        cur.append(b)
        prev = b
    if cur:
        chunks.append(bytes(cur))
    return chunks


def tokenise(text: str | bytes, vocab: Vocabulary, rules: Iterable[MergeRule]) -> list[int]:
    return Tokeniser(vocab, tuple(rules)).tokenise(text)


def detokenise_bytes(ids: Sequence[int], vocab: Vocabulary) -> bytes:
    out = bytearray()
    for pos, tid in enumerate(ids):
        if tid not in vocab.entries:
            raise KeyError(f"unknown token id {tid} at position {pos}")
        out += vocab.token_bytes(tid)
    return bytes(out)


def detokenise(ids: Sequence[int], vocab: Vocabulary) -> str:
    return detokenise_bytes(ids, vocab).decode("utf-8", errors="replace")


# --- regimes ------------------------------------------------------------------

def _chain(word: bytes) -> list[tuple[bytes, bytes]]:
    return [(word[:k], word[k:k + 1]) for k in range(1, len(word))]


def build_vocab(words: Sequence[str | bytes], merge_words: Sequence[str | bytes]) -> Tokeniser:
    """Bytes 0..255, then specials, then one left-to-right merge chain per word.

    ``words`` are added as vocabulary entries; ``merge_words`` also get the chain
    of merges that builds them, in order, so BPE reproduces them exactly.
    """
    entries = {b: bytes([b]) for b in range(256)}
    specials = {}
    for name in SPECIAL_NAMES:
        specials[name] = len(entries)
        entries[len(entries)] = name.encode()
    known = set(entries.values())
    rules: list[MergeRule] = []
    seen_pairs = set()

    def add(piece: bytes) -> None:
        if piece not in known:
            known.add(piece)
            entries[len(entries)] = piece

    for w in merge_words:
        wb = w.encode("utf-8") if isinstance(w, str) else w
        for left, right in _chain(wb):
            if (left, right) not in seen_pairs:
                seen_pairs.add((left, right))
                rules.append(MergeRule(left, right, len(rules)))
                add(left + right)
    for w in words:
        add(w.encode("utf-8") if isinstance(w, str) else w)
    return Tokeniser(Vocabulary(entries, specials, byte_fallback=True), tuple(rules))


def build_regime_vocab(regime: str) -> tuple[Vocabulary, tuple[MergeRule, ...]]:
    """Scenario vocabulary: ``A`` whole-word Strawberry, ``B`` Str|aw|berry, ``byte`` no merges."""
    tok = regime_tokeniser(regime)
    return tok.vocab, tok.rules


def regime_tokeniser(regime: str) -> Tokeniser:
    key = regime.strip().lower()
    common = list(PROMPT_WORDS) + list(LEXICON_WORDS)
    if key == "a":
        return build_vocab(common + ["Strawberry"], common + ["Strawberry"])
    if key == "b":
        pieces = ["Str", "aw", "berry"]
        return build_vocab(common + pieces, common + pieces)
    if key in ("byte", "bytelevel", "byte-level"):
        return build_vocab(common + ["Strawberry"], [])
    raise ValueError(f"unknown regime {regime!r} (expected A, B or byte)")


def synthetic_vocab(size: int) -> Vocabulary:
    """Id-only vocabulary for random-spec tests: specials at 0, 1, 2."""
    if size < 3:
        raise ValueError("a vocabulary needs at least the three specials")
    entries = {0: BOS.encode(), 1: EOS.encode(), 2: UNK.encode()}
    for i in range(3, size):
        entries[i] = f"t{i} ".encode()
    return Vocabulary(entries, {BOS: 0, EOS: 1, UNK: 2}, byte_fallback=False)


# --- files --------------------------------------------------------------------

def vocab_to_json(vocab: Vocabulary, rules: Sequence[MergeRule]) -> dict:
    return {
        "entries": [{"id": tid, "string": vocab.entries[tid].decode("latin-1")} for tid in sorted(vocab.entries)],
        "merges": [{"left": r.left.decode("latin-1"), "right": r.right.decode("latin-1"), "priority": r.priority}
                   for r in sorted(rules, key=lambda r: r.priority)],
        "specials": {k: vocab.specials[k] for k in SPECIAL_NAMES},
        "byte_fallback": vocab.byte_fallback,
    }


def dumps_vocab(vocab: Vocabulary, rules: Sequence[MergeRule]) -> str:
    return json.dumps(vocab_to_json(vocab, rules), indent=1, ensure_ascii=True) + "\n"


def save_vocab(path: str | Path, vocab: Vocabulary, rules: Sequence[MergeRule]) -> None:
    Path(path).write_text(dumps_vocab(vocab, rules), encoding="utf-8")


def _field(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise VocabError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
        raise VocabError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def parse_vocab(data: dict) -> tuple[Vocabulary, tuple[MergeRule, ...]]:
    if not isinstance(data, dict):
        raise VocabError("top level must be an object")
    entries: dict[int, bytes] = {}
    for n, e in enumerate(_field(data, "entries", list, "root")):
        where = f"entries[{n}]"
        tid = _field(e, "id", int, where)
        s = _field(e, "string", str, where)
        if tid in entries:
            raise VocabError(f"{where}: duplicate id {tid}")
        try:
            entries[tid] = s.encode("latin-1")
        except UnicodeEncodeError as exc:
            raise VocabError(f"{where}: string is not one code point per byte") from exc
    rules = []
    for n, m in enumerate(_field(data, "merges", list, "root")):
        where = f"merges[{n}]"
        rules.append(MergeRule(_field(m, "left", str, where).encode("latin-1"),
                               _field(m, "right", str, where).encode("latin-1"),
                               _field(m, "priority", int, where)))
    specials = _field(data, "specials", dict, "root")
    byte_fallback = _field(data, "byte_fallback", bool, "root")
    vocab = Vocabulary(entries, dict(specials), byte_fallback)
    tok = Tokeniser(vocab, tuple(rules))
    return tok.vocab, tok.rules


def load_vocab(path: str | Path) -> tuple[Vocabulary, tuple[MergeRule, ...]]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VocabError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_vocab(data)
