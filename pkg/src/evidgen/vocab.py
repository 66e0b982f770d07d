"""Whitespace tokenizer with a fixed special-token header.

The vocabulary is built from corpus text and serialized inside model
checkpoints. Two reserved items, <pos> and <neg>, serve as the label
tokens emitted by the evidentiality decoder.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS, SEP, UNK, POS_LABEL, NEG_LABEL = (
    "<pad>",
    "<s>",
    "</s>",
    "<sep>",
    "<unk>",
    "<pos>",
    "<neg>",
)
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP, UNK, POS_LABEL, NEG_LABEL)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the special-token header")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, max_size: int | None = None) -> "Vocab":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text))
        items = [
            (tok, n)
            for tok, n in counts.items()
            if n >= min_count and tok not in SPECIAL_TOKENS
        ]
        items.sort(key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            budget = max_size - len(SPECIAL_TOKENS)
            if budget < 0:
                raise ValueError("max_size smaller than the special-token header")
            items = items[:budget]
        return cls(list(SPECIAL_TOKENS) + [tok for tok, _ in items])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    @property
    def pos_id(self) -> int:
        return 5

    @property
    def neg_id(self) -> int:
        return 6

    def encode(self, text: str, allow_unk: bool = True) -> list[int]:
        ids = []
        for tok in tokenize(text):
            idx = self.index.get(tok)
            if idx is None:
                if not allow_unk:
                    raise KeyError(f"token not in vocabulary: {tok!r}")
                idx = self.unk_id
            ids.append(idx)
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        words = []
        n_special = len(SPECIAL_TOKENS)
        for i in ids:
            if skip_special and i < n_special:
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def to_list(self) -> list[str]:
        return list(self.tokens)
