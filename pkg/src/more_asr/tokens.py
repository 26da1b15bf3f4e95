"""Token ids and the word vocabulary shared by the corpus, model and metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InvalidConfig, VocabError

PAD = 0
BOS = 1
EOS = 2
FIRST_WORD = 3
SPECIAL = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>"}


@dataclass(frozen=True)
class Vocabulary:
    """Bijective word <-> id mapping; word i gets id FIRST_WORD + i."""

    words: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise InvalidConfig("vocabulary words must be unique")
        if any(not w or any(c.isspace() for c in w) for w in self.words):
            raise InvalidConfig("vocabulary words must be non-empty and contain no whitespace")

    @classmethod
    def default(cls, size: int = 40) -> "Vocabulary":
        return cls(tuple(f"w{i:02d}" for i in range(size)))

    def __len__(self):
        return len(self.words)

    def word_id(self, word: str) -> int:
        try:
            return FIRST_WORD + self._index[word]
        except KeyError:
            raise VocabError(word) from None

    def word(self, token: int) -> str:
        if token in SPECIAL:
            return SPECIAL[token]
        i = token - FIRST_WORD
        if not 0 <= i < len(self.words):
            return f"<unk{token}>"
        return self.words[i]

    def encode(self, text: str) -> list[int]:
        return [self.word_id(w) for w in text.split()]

    def decode(self, tokens: Iterable[int], strip_special: bool = True) -> str:
        if strip_special:
            tokens = [t for t in tokens if t not in SPECIAL]
        return " ".join(self.word(t) for t in tokens)

    @property
    def _index(self) -> dict[str, int]:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_index_cache", cached)
        return cached


def strip_eos(tokens: Sequence[int]) -> list[int]:
    """Drop a terminal EOS (and BOS prefix) keeping all content tokens."""
    out = list(tokens)
    if out and out[0] == BOS:
        out = out[1:]
    if out and out[-1] == EOS:
        out = out[:-1]
    return out


def words_of(tokens: Sequence[int]) -> list[int]:
    """Content tokens up to (excluding) the first EOS."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t in (PAD, BOS):
            continue
        out.append(t)
    return out
