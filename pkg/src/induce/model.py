"""A grammar model bundle: parameters, vocabulary, and entry points for
scoring and decoding. This is what checkpoints serialize and what the
trainer, evaluator, and ablations all operate on."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ParamStore
from .config import TrainConfig
from .corpus import Sentence, Vocabulary
from .embedfile import EmbeddingStore
from .encoder import init_encoder_params, init_word_embeddings
from .errors import AlignmentError, CheckpointError
from .grammar import (
    RuleTables,
    SymbolInventory,
    init_grammar_params,
    read_checkpoint,
    rule_tables,
    write_checkpoint,
)
from .parser import batch_span_posteriors, inside, mbr_decode, viterbi_decode
from .trees import Tree, leaf

_PRECISION_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class Model:
    store: ParamStore
    inventory: SymbolInventory
    vocab: Vocabulary
    mode: str                # baseline | llm
    zero_train: bool
    dropout: float
    llm_dim: int | None
    config_hash: str = ""

    @property
    def latent(self) -> bool:
        return not self.zero_train

    @property
    def encoder_in_dim(self) -> int:
        return self.llm_dim if self.mode == "llm" else self.inventory.dim

    # -- construction -------------------------------------------------

    @classmethod
    def build(cls, config: TrainConfig, vocab: Vocabulary, llm_dim: int | None = None, config_hash: str = "") -> "Model":
        if config.mode == "llm" and not config.zero_train and llm_dim is None:
            raise AlignmentError("llm mode needs the embedding dim")
        inv = SymbolInventory(
            config.n_nonterminals, config.n_preterminals, len(vocab), config.dim, config.z_dim
        )
        store = ParamStore(seed=config.seed, dtype=_PRECISION_DTYPES[config.precision])
        model = cls(store, inv, vocab, config.mode, config.zero_train, config.dropout, llm_dim, config_hash)
        model._init_params()
        return model

    def _init_params(self) -> None:
        init_grammar_params(self.store, self.inventory, latent=self.latent)
        if self.latent:
            if self.mode == "baseline":
                init_word_embeddings(self.store, self.inventory.vocab_size, self.inventory.dim)
            init_encoder_params(self.store, self.encoder_in_dim, self.inventory.z_dim)

    # -- encoder (evaluation path, plain numpy) ------------------------

    def pooled_rows(self, sentences: list[Sentence], embeddings: EmbeddingStore | None) -> np.ndarray:
        """(S, in_dim) mean-pooled inputs to the encoder, one row per sentence."""
        if self.mode == "llm":
            if embeddings is None:
                raise AlignmentError("llm mode needs an embedding store")
            rows = [np.asarray(embeddings[s.source_index], dtype=np.float64).mean(axis=0) for s in sentences]
        else:
            table = self.store["enc.embed"].value
            rows = [table[s.ids].mean(axis=0) for s in sentences]
        return np.stack(rows).astype(self.store.dtype)

    def mu_rows(self, sentences: list[Sentence], embeddings: EmbeddingStore | None = None) -> np.ndarray:
        """Posterior means (S, z_dim): the z used everywhere at evaluation."""
        if not self.latent:
            raise ValueError("zero_train model has no latent")
        pooled = self.pooled_rows(sentences, embeddings)
        out = pooled @ self.store["enc.w"].value + self.store["enc.b"].value
        return out[:, : self.inventory.z_dim]

    # -- rule tables ----------------------------------------------------

    def tables(self, z_rows: np.ndarray | None, batch_size: int = 1) -> RuleTables:
        """Forward-only rule tables for decoding/scoring."""
        if z_rows is None:
            return rule_tables(self.store, self.inventory, None, batch_size=batch_size)
        z = ag.constant(np.asarray(z_rows, dtype=self.store.dtype))
        return rule_tables(self.store, self.inventory, z)

    # -- scoring and decoding -------------------------------------------

    def _z_for(self, sentences, embeddings, z_rows):
        if not self.latent:
            return None
        if z_rows is None:
            return self.mu_rows(sentences, embeddings)
        return np.asarray(z_rows)

    def log_likelihoods(
        self,
        sentences: list[Sentence],
        embeddings: EmbeddingStore | None = None,
        z_rows: np.ndarray | None = None,
        batch_size: int = 64,
    ) -> np.ndarray:
        """log p(x) per sentence at z = mu (or given z); -inf for length 1."""
        z = self._z_for(sentences, embeddings, z_rows)
        out = np.empty(len(sentences))
        for idx in _length_buckets(sentences, batch_size):
            ids = np.stack([sentences[i].ids for i in idx])
            tables = self.tables(z[idx] if z is not None else None, batch_size=len(idx))
            chart = inside(tables, ids)
            out[idx] = chart.loglik.value
        return out

    def decode(
        self,
        sentences: list[Sentence],
        embeddings: EmbeddingStore | None = None,
        decoder: str = "mbr",
        z_rows: np.ndarray | None = None,
        batch_size: int = 64,
    ) -> list[Tree]:
        """Parse every sentence; order matches the input list."""
        z = self._z_for(sentences, embeddings, z_rows)
        out: list[Tree | None] = [None] * len(sentences)
        for idx in _length_buckets(sentences, batch_size):
            if len(sentences[idx[0]]) == 1:
                for i in idx:
                    out[i] = leaf(None, 0)
                continue
            ids = np.stack([sentences[i].ids for i in idx])
            tables = self.tables(z[idx] if z is not None else None, batch_size=len(idx))
            if decoder == "mbr":
                posts = batch_span_posteriors(tables, ids)
                for i, post in zip(idx, posts):
                    out[i] = mbr_decode(post)
            elif decoder == "viterbi":
                for pos, i in enumerate(idx):
                    tree, _ = viterbi_decode(tables.values(pos), sentences[i].ids)
                    out[i] = tree
            else:
                raise ValueError(f"unknown decoder {decoder!r}")
        return out

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "mode": self.mode,
            "zero_train": "true" if self.zero_train else "false",
            "dropout": repr(self.dropout),
            "llm_dim": "" if self.llm_dim is None else str(self.llm_dim),
            "vocab": "\n".join(self.vocab.tokens),
        }
        write_checkpoint(path, self.store.state_arrays(), self.inventory, self.config_hash, meta)

    @classmethod
    def load(cls, path: str | Path, precision: str = "f32") -> "Model":
        ckp = read_checkpoint(path)
        try:
            meta = ckp.meta
            vocab = Vocabulary.from_tokens(meta["vocab"].split("\n"))
            mode = meta["mode"]
            zero_train = meta["zero_train"] == "true"
            dropout = float(meta["dropout"])
            llm_dim = int(meta["llm_dim"]) if meta["llm_dim"] else None
        except KeyError as e:
            raise CheckpointError(f"checkpoint missing metadata key {e}")
        store = ParamStore(seed=0, dtype=_PRECISION_DTYPES[precision])
        model = cls(store, ckp.inventory, vocab, mode, zero_train, dropout, llm_dim, ckp.config_hash)
        model._init_params()
        store.load_state(ckp.arrays)
        return model


def _length_buckets(sentences: list[Sentence], batch_size: int) -> list[list[int]]:
    """Indices grouped by exact sentence length, chunked to batch_size."""
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(sentences):
        groups.setdefault(len(s), []).append(i)
    chunks = []
    for length in sorted(groups):
        idx = groups[length]
        for start in range(0, len(idx), batch_size):
            chunks.append(idx[start : start + batch_size])
    return chunks
