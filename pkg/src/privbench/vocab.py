"""Vocabularies and the two tokenizers (word-level and character-level)."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from privbench.errors import VocabularyError

SEP = "<SEP>"
MASK = "<MASK>"
EOS = "<eos>"
PAD = "<pad>"
UNK = "<unk>"
SPECIAL_TOKENS = (PAD, EOS, SEP, MASK, UNK)

_SPECIAL_RE = "|".join(re.escape(t) for t in SPECIAL_TOKENS)
_WORD_RE = re.compile(rf"{_SPECIAL_RE}|\w+|[^\w\s]")
_CHAR_RE = re.compile(rf"{_SPECIAL_RE}|.", re.DOTALL)


def word_tokenize(text: str) -> list[str]:
    """Split into words and single punctuation marks; special tokens stay whole."""
    return _WORD_RE.findall(text)


def char_tokenize(text: str) -> list[str]:
    return _CHAR_RE.findall(text)


TOKENIZERS = {"word": word_tokenize, "char": char_tokenize}


@dataclass
class Vocabulary:
    """Dense token <-> id mapping. Special tokens always occupy ids 0..4."""

    tokens: list[str]
    kind: str = "word"
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in TOKENIZERS:
            raise VocabularyError(f"unknown tokenizer kind {self.kind!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        for tok in SPECIAL_TOKENS:
            if tok not in self.tokens:
                raise VocabularyError(f"special token {tok} missing")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], kind: str = "word") -> "Vocabulary":
        tokenize = TOKENIZERS[kind]
        seen = dict.fromkeys(SPECIAL_TOKENS)
        for text in texts:
            for tok in tokenize(text):
                seen.setdefault(tok)
        specials = list(SPECIAL_TOKENS)
        rest = sorted(t for t in seen if t not in SPECIAL_TOKENS)
        return cls(specials + rest, kind)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._index[t] for t in SPECIAL_TOKENS)

    def tokenize(self, text: str) -> list[str]:
        return TOKENIZERS[self.kind](text)

    def token_id(self, token: str, strict: bool = True) -> int:
        try:
            return self._index[token]
        except KeyError:
            if strict:
                raise VocabularyError(f"token {token!r} not in vocabulary") from None
            return self._index[UNK]

    def encode_tokens(self, tokens: Sequence[str], strict: bool = True) -> list[int]:
        return [self.token_id(t, strict) for t in tokens]

    def encode(self, text: str, strict: bool = True) -> list[int]:
        return self.encode_tokens(self.tokenize(text), strict)

    def decode_tokens(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"id {i} out of range for vocabulary of {len(self)}")
            out.append(self.tokens[i])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        sep = " " if self.kind == "word" else ""
        return sep.join(self.decode_tokens(ids))

    def save(self, path: str | Path) -> None:
        """One token per line, UTF-8, in id order. The tokenizer kind is not stored."""
        if any("\n" in t for t in self.tokens):
            raise VocabularyError("newline tokens cannot be serialized one per line")
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, kind: str = "word") -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, kind)
