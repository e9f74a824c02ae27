"""Closed word-level vocabulary for the toy decoder.

Numbers are spelled digit by digit so that any real value the alignment
answers need can be written.  Detokenization restores the canonical
spacing of template text, so ``detokenize(tokenize(s)) == s`` for every
string produced by the task generators.
"""
from __future__ import annotations

import hashlib
import re
from typing import Sequence

from ..scene_sim import CATEGORIES

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
DIGITS = tuple(str(i) for i in range(10))
PUNCT = (".", "-", ",", "(", ")", ";", ":", "=", "?")
COMMAND_TOKENS = ("<TURN LEFT>", "<TURN RIGHT>", "<FORWARD>",
                  "<ACCELERATE>", "<DECELERATE>", "<STATIONARY>", "<KEEP SPEED>")
SECTION_TOKENS = ("<Narration>", "<Reasoning>")
WORDS = tuple(sorted(set("""
    a ahead and are as ahead accelerating because behavior clear close command
    decelerating describe distance down driving each explain follow forward front
    future going how in is it keep keeps left many no nearby object objects of on
    planned position right road route safe since slowing speeding stop stopping
    straight the there to turning turns type up velocity vx vy waypoints what
    while why x y
""".split()) - set(CATEGORIES)))
TOKENS = SPECIALS + DIGITS + PUNCT + COMMAND_TOKENS + SECTION_TOKENS + tuple(CATEGORIES) + WORDS

_SPLIT = re.compile(r"<[A-Za-z ]+>|[a-z_]+|\d|[^\s\w]")
_NO_SPACE_BEFORE = {",", ")", ":", ";", ".", "?"}
_NO_SPACE_AFTER = {"(", "-"}


class VocabError(KeyError):
    pass


class Vocab:
    def __init__(self, tokens: Sequence[str] = TOKENS):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad, self.bos, self.eos = (self.index[t] for t in SPECIALS)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def split(self, text: str) -> list[str]:
        pieces = _SPLIT.findall(text)
        if "".join(pieces).replace(" ", "") != re.sub(r"\s+", "", text):
            raise VocabError(f"text does not split cleanly: {text!r}")
        return pieces

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in self.split(text):
            try:
                ids.append(self.index[piece])
            except KeyError:
                raise VocabError(f"out-of-vocabulary token {piece!r} in {text!r}") from None
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        toks = [self.tokens[i] for i in ids if self.tokens[i] not in SPECIALS]
        return detokenize(toks)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    prev = None
    for tok in tokens:
        glue = (prev is None or tok in _NO_SPACE_BEFORE or prev in _NO_SPACE_AFTER
                or (tok.isdigit() and (prev.isdigit() or prev == ".")))
        out.append(tok if glue else " " + tok)
        prev = tok
    return "".join(out)


DEFAULT_VOCAB = Vocab()
