"""Corpus ingestion: preprocessing, vocabulary, gold trees.

Preprocessing follows the usual caption-corpus recipe: whitespace
tokenization, lowercasing, and collapsing number-like tokens to the
single placeholder "N". Sentences above the length cap are dropped, and
their ordinals are reported so that parallel resources (tree files,
embedding records) stay aligned.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DataError, MalformedTree
from .trees import GoldTree

log = logging.getLogger(__name__)

UNK = "<unk>"
NUMBER_TOKEN = "N"


class EmptySentence(DataError):
    """A corpus line contained no tokens."""


def normalize_token(token: str) -> str:
    # A token is number-like iff it contains a digit and no letter.
    # "N" itself is kept verbatim so preprocessing is idempotent.
    if token == NUMBER_TOKEN:
        return token
    if any(c.isdigit() for c in token) and not any(c.isalpha() for c in token):
        return NUMBER_TOKEN
    return token.lower()


def preprocess(line: str) -> list[str]:
    tokens = [normalize_token(t) for t in line.split()]
    if not tokens:
        raise EmptySentence("no tokens in line")
    return tokens


@dataclass
class Sentence:
    """source_index is the row in the kept corpus, which is also the row
    in any parallel store (gold trees, embedding records); line_no is the
    original file line for diagnostics and differs once lines are dropped."""

    tokens: list[str]
    source_index: int
    ids: np.ndarray | None = None
    line_no: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def where(self) -> str:
        if self.line_no is not None:
            return f"line {self.line_no + 1}"
        return f"sentence {self.source_index}"


@dataclass
class Corpus:
    sentences: list[Sentence]
    dropped: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


def load_corpus(path: str | Path, max_length: int = 45) -> Corpus:
    """One sentence per line; long and empty lines are dropped and recorded."""
    sentences: list[Sentence] = []
    dropped: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            try:
                tokens = preprocess(line)
            except EmptySentence:
                dropped.add(i)
                continue
            if len(tokens) > max_length:
                dropped.add(i)
                continue
            sentences.append(Sentence(tokens, len(sentences), line_no=i))
    if dropped:
        log.info("dropped %d/%d lines from %s", len(dropped), len(dropped) + len(sentences), path)
    return Corpus(sentences, dropped)


@dataclass
class Vocabulary:
    """Token -> dense index map; index 0 is reserved for the unknown token."""

    tokens: list[str]
    index: dict[str, int]
    unk_index: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.index.get(t, self.unk_index) for t in tokens], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        if not tokens or tokens[0] != UNK:
            raise DataError(f"vocabulary must start with {UNK!r}")
        return cls(list(tokens), {t: i for i, t in enumerate(tokens)})


def build_vocabulary(sentences: list[Sentence], max_size: int = 10000) -> Vocabulary:
    """Keep the max_size most frequent tokens; ties broken by first occurrence."""
    if max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    position = 0
    for sent in sentences:
        for tok in sent.tokens:
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = position
            position += 1
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    kept = [UNK] + ranked[:max_size]
    return Vocabulary.from_tokens(kept)


def encode_corpus(corpus: Corpus, vocab: Vocabulary) -> None:
    for sent in corpus.sentences:
        sent.ids = vocab.encode(sent.tokens)


def load_gold_trees(path: str | Path, dropped: set[int] | None = None) -> list[GoldTree]:
    """Read a tree file parallel to a corpus file, skipping dropped ordinals."""
    dropped = dropped or set()
    golds: list[GoldTree] = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if i in dropped:
                continue
            if not line.strip():
                raise MalformedTree(f"{path}:{i + 1}: empty tree line not covered by a dropped sentence")
            golds.append(GoldTree.from_line(line))
    return golds


def check_parallel(corpus: Corpus, golds: list[GoldTree]) -> None:
    if len(corpus.sentences) != len(golds):
        raise AlignmentError(f"{len(corpus.sentences)} sentences vs {len(golds)} gold trees")
    for sent, gold in zip(corpus.sentences, golds):
        if len(sent) != gold.leaf_count:
            raise AlignmentError(f"{sent.where}: {len(sent)} tokens vs {gold.leaf_count} gold leaves")
