"""Closed-world whitespace tokenizer and vocabulary."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, EOS, SEP = "<pad>", "<unk>", "<eos>", "<sep>"
SPECIALS = (PAD, UNK, EOS, SEP)
PAD_ID, UNK_ID, EOS_ID, SEP_ID = 0, 1, 2, 3

# Keeps decimals like "24.99" intact, drops every other punctuation mark.
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:\.[0-9]+)?")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, strip punctuation, split on whitespace."""
    return tuple(_TOKEN_RE.findall(text.lower()))


class Vocabulary:
    """Bijection between token strings and ids ``0..N-1``.

    The four special tokens always occupy ids 0-3.
    """

    def __init__(self, tokens: Iterable[str]):
        seen: dict[str, int] = {}
        for tok in (*SPECIALS, *tokens):
            if tok not in seen:
                seen[tok] = len(seen)
        self._index = seen
        self.tokens: tuple[str, ...] = tuple(seen)

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]]) -> "Vocabulary":
        words = set()
        for stream in token_streams:
            words.update(stream)
        words.difference_update(SPECIALS)
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[len(SPECIALS):])
