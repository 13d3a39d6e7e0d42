"""Caption tokenization, vocabulary, and per-word text token encoders."""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Module, glorot, zeros
from .tokens import TokenSequence, text_sequence

UNK = 0
JOIN_TOKEN = "+"
TEXT_VARIANTS = ("lstm", "embedding", "transformer1")

_STRIP = str.maketrans("", "", string.punctuation)


@dataclass
class TokenizedCaption:
    words: list
    text: str
    ids: Optional[list] = None

    @property
    def empty(self) -> bool:
        return not self.words

    def __len__(self):
        return len(self.words)


def tokenize(text, vocab: Optional["Vocabulary"] = None) -> TokenizedCaption:
    """Lowercase, strip ASCII punctuation, split on whitespace.

    A list of captions is joined with a standalone ``+`` token, which
    survives punctuation stripping.
    """
    if not isinstance(text, str):
        text = f" {JOIN_TOKEN} ".join(text)
    words = []
    for raw in text.lower().split():
        if raw == JOIN_TOKEN:
            words.append(raw)
            continue
        w = raw.translate(_STRIP)
        if w:
            words.append(w)
    ids = vocab.encode(words) if vocab is not None else None
    return TokenizedCaption(words, text, ids)


class Vocabulary:
    """Word to index map built from training captions; index 0 is unknown."""

    def __init__(self, words: Sequence[str] = ()):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        self.index = {w: i + 1 for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocabulary":
        seen = {}
        for c in captions:
            for w in tokenize(c).words:
                seen.setdefault(w, None)
        return cls(sorted(seen))

    def __len__(self):
        return len(self.words) + 1

    def __contains__(self, word):
        return word in self.index

    def encode(self, words: Sequence[str]) -> list:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list:
        return ["<unk>" if i == UNK else self.words[i - 1] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls([w for w in text.split("\n") if w])


def pad_captions(captions: Sequence[TokenizedCaption]):
    """Right-pad caption ids into an (N, T) int array plus lengths."""
    lengths = np.array([len(c.ids) for c in captions], dtype=np.int64)
    t = int(lengths.max()) if len(lengths) else 0
    ids = np.full((len(captions), t), UNK, dtype=np.int64)
    for i, c in enumerate(captions):
        ids[i, :len(c.ids)] = c.ids
    return ids, lengths


class LSTM(Module):
    """Single-layer LSTM with gate order (input, forget, cell, output)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.w_input = glorot(rng, (d_in, 4 * d_hidden), d_in, 4 * d_hidden)
        self.w_hidden = glorot(rng, (d_hidden, 4 * d_hidden), d_hidden, 4 * d_hidden)
        self.bias = zeros((4 * d_hidden,))
        self._d = d_hidden

    def __call__(self, x: Tensor) -> Tensor:
        """x: (N, T, d_in) -> hidden states (N, T, d_hidden)."""
        n, t, _ = x.shape
        d = self._d
        xs = F.add(F.matmul(x, self.w_input), self.bias)
        h = Tensor(np.zeros((n, d), dtype=x.dtype))
        c = Tensor(np.zeros((n, d), dtype=x.dtype))
        outs = []
        for step in range(t):
            z = F.add(xs[:, step, :], F.matmul(h, self.w_hidden))
            i = F.sigmoid(z[:, :d])
            f = F.sigmoid(z[:, d:2 * d])
            g = F.tanh(z[:, 2 * d:3 * d])
            o = F.sigmoid(z[:, 3 * d:])
            c = F.add(F.mul(f, c), F.mul(i, g))
            h = F.mul(o, F.tanh(c))
            outs.append(F.reshape(h, (n, 1, d)))
        return F.concat(outs, axis=1)


class TextEncoder(Module):
    """Maps padded word ids to one text token per word."""

    def __init__(self, vocab_size: int, d: int, variant: str, rng: np.random.Generator,
                 block_kwargs: Optional[dict] = None):
        if variant not in TEXT_VARIANTS:
            raise ValueError(f"unknown text encoder variant {variant!r}")
        self.variant = variant
        self.embedding = glorot(rng, (vocab_size, d), vocab_size, d)
        if variant == "lstm":
            self.lstm = LSTM(d, d, rng)
        elif variant == "transformer1":
            from .fusion import MAAFBlock
            self.block = MAAFBlock(d, rng=rng, **(block_kwargs or {}))

    def __call__(self, ids, lengths, rng: Optional[np.random.Generator] = None) -> TokenSequence:
        ids = np.asarray(ids)
        lengths = np.asarray(lengths)
        if ids.shape[1] == 0 or np.any(lengths == 0):
            raise ValueError("empty caption: text encoders need at least one word")
        x = F.embedding(self.embedding, ids)
        seq = text_sequence(x, lengths)
        if self.variant == "lstm":
            return seq.with_values(self.lstm(x))
        if self.variant == "transformer1":
            return self.block(seq, rng=rng)
        return seq


def encode_text(tc: TokenizedCaption, encoder: TextEncoder) -> TokenSequence:
    ids, lengths = pad_captions([tc])
    return encoder(ids, lengths)
