"""Word classes, the centre-embedding lexicon, verdicts and the depth suite."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

NOUN, VERB, THAT, DET, OTHER = "Noun", "Verb", "That", "Det", "Other"
CLASSES = (NOUN, VERB, THAT, DET, OTHER)

COMPLETE = "complete"
NEEDS_VERB = "needs-verb"
INVALID = "invalid"


@dataclass(frozen=True)
class Verdict:
    kind: str
    noun: str | None = None
    reason: str | None = None

    @property
    def completion_class(self) -> str | None:
        return VERB if self.kind == NEEDS_VERB else None


@dataclass(frozen=True)
class Lexicon:
    """Nouns and verbs are paired by index: ``verbs[i]`` is what ``nouns[i]`` did."""

    nouns: tuple[str, ...]
    verbs: tuple[str, ...]
    det: str = "the"
    that: str = "that"

    @property
    def classes(self) -> dict[str, str]:
        out = {w: NOUN for w in self.nouns}
        out.update({w: VERB for w in self.verbs})
        out[self.det] = DET
        out[self.that] = THAT
        return out

    def completion_for(self, noun: str) -> str | None:
        if noun in self.nouns:
            i = self.nouns.index(noun)
            if i < len(self.verbs):
                return self.verbs[i]
        return None


DEFAULT_LEXICON = Lexicon(
    nouns=("cat", "dog", "mouse", "rat", "bird", "fox", "owl", "cow", "pig", "hen", "bee", "ant"),
    verbs=("fled", "chased", "feared", "bit", "saw", "liked", "fed", "hit", "met", "led", "won", "ran"),
)


def word_class(word: str, classes: Mapping[str, str]) -> str:
    return classes.get(word.strip().lower(), OTHER)


def load_grammar(path: str | Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("grammar file must map word -> class")
    for w, c in data.items():
        if c not in CLASSES:
            raise ValueError(f"word {w!r}: unknown class {c!r}")
    return {w.lower(): c for w, c in data.items()}


def save_grammar(path: str | Path, classes: Mapping[str, str]) -> None:
    Path(path).write_text(json.dumps(dict(sorted(classes.items())), indent=1) + "\n", encoding="utf-8")


# --- depth suite --------------------------------------------------------------

VARIANTS = ("complete", "needs-verb", "missing-two", "extra-verb")


@dataclass(frozen=True)
class SuiteItem:
    depth: int
    variant: str
    words: tuple[str, ...]


def sentence_words(nouns: Sequence[str], verbs: Sequence[str], n_verbs: int, lex: Lexicon) -> list[str]:
    """``The n0 that the n1 ... the nd`` followed by the last ``n_verbs`` verbs, innermost first."""
    words = ["The", nouns[0]]
    for n in nouns[1:]:
        words += [lex.that, lex.det, n]
    closing = list(reversed(verbs))[:n_verbs]
    return words + closing


def generate_suite(depths: Sequence[int], per_depth: int, lex: Lexicon = DEFAULT_LEXICON,
                   seed: int = 0) -> list[SuiteItem]:
    """Random lexical choices; variants cycle so each depth gets all of them.

    At depth 0 there is no ``missing-two`` variant (one noun cannot miss two verbs).
    """
    rng = random.Random(seed)
    items = []
    for d in depths:
        if d + 1 > min(len(lex.nouns), len(lex.verbs)):
            raise ValueError(f"lexicon too small for depth {d}")
        variants = [v for v in VARIANTS if not (d == 0 and v == "missing-two")]
        for k in range(per_depth):
            variant = variants[k % len(variants)]
            nouns = rng.sample(lex.nouns, d + 1)
            verbs = rng.sample(lex.verbs, d + 1)
            if variant == "complete":
                words = sentence_words(nouns, verbs, d + 1, lex)
            elif variant == "needs-verb":
                words = sentence_words(nouns, verbs, d, lex)
            elif variant == "missing-two":
                words = sentence_words(nouns, verbs, d - 1, lex)
            else:
                extra = rng.choice([v for v in lex.verbs if v not in verbs] or list(lex.verbs))
                words = sentence_words(nouns, verbs, d + 1, lex) + [extra]
            items.append(SuiteItem(d, variant, tuple(words)))
    return items
