"""Small generated corpora with known structure, for tests and demos."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .treeio import Sentence

FILLER = tuple(f"w{i:02d}" for i in range(30))


def keyword_sentences(
    n: int,
    rng: np.random.Generator,
    keyword: str = "great",
    min_len: int = 4,
    max_len: int = 9,
    filler: Sequence[str] = FILLER,
) -> list[Sentence]:
    """Two classes, balanced: label 1 iff ``keyword`` occurs somewhere in the sentence."""
    out = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = [filler[int(k)] for k in rng.integers(len(filler), size=length)]
        label = i % 2
        if label:
            tokens[int(rng.integers(length))] = keyword
        text = " ".join(tokens)
        out.append(Sentence(tuple(tokens), label, len(text)))
    order = rng.permutation(n)
    return [out[i] for i in order]


def bigram_sentences(n: int, rng: np.random.Generator, vocab_size: int = 30, length: int = 8) -> list[Sentence]:
    """Deterministic successor structure ``t -> (7t + 3) mod V`` from a random start token."""
    out = []
    for _ in range(n):
        t = int(rng.integers(vocab_size))
        tokens = []
        for _ in range(length):
            tokens.append(f"tok{t:02d}")
            t = (7 * t + 3) % vocab_size
        out.append(Sentence(tuple(tokens), None, len(" ".join(tokens))))
    return out


def flip_labels(sentences: Sequence[Sentence], rate: float, n_classes: int, rng: np.random.Generator) -> list[Sentence]:
    """Replace each label, with probability ``rate``, by a different uniformly chosen class."""
    out = []
    for s in sentences:
        label = s.label
        if rng.random() < rate:
            label = (label + 1 + int(rng.integers(n_classes - 1))) % n_classes
        out.append(Sentence(s.tokens, label, s.raw_length))
    return out


def to_tsv(sentences: Sequence[Sentence], label_names: Sequence[str] = ("neg", "pos")) -> str:
    return "".join(f"{label_names[s.label]}\t{' '.join(s.tokens)}\n" for s in sentences)


def to_corpus(sentences: Sequence[Sentence]) -> str:
    return "".join(" ".join(s.tokens) + "\n" for s in sentences)
