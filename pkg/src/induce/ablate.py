"""Inference-time ablations of the sentence latent and its inputs.

Each ablation evaluates a trained model with one pathway disabled or
scrambled, using the same decoder and metrics as a normal evaluation:

- zero_z: the latent is replaced by the zero vector.
- random_z: latents are permuted within each evaluation batch, so every
  sentence is parsed under some other sentence's z.
- shuffle: the tokens of each sentence (and the aligned embedding rows)
  are permuted before encoding and parsing; gold spans are unchanged.
- zero_captions: the pooled encoder input is replaced by zeros, so the
  latent collapses to the encoder bias.

Models trained without a latent have nothing to ablate on the z side;
those modes return the default evaluation unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import evaluate
from .corpus import Corpus, Sentence
from .embedfile import EmbeddingStore
from .errors import UsageError
from .model import Model, _length_buckets
from .trees import GoldTree

log = logging.getLogger(__name__)

ABLATION_KINDS = ("default", "zero_z", "random_z", "shuffle", "zero_captions")

_NEEDS_LATENT = ("zero_z", "random_z", "zero_captions")


@dataclass
class AblationReport:
    kind: str
    metrics: dict[str, float]
    identical_to_default: bool


def ablated_eval(
    model: Model,
    corpus: Corpus,
    gold: list[GoldTree],
    embeddings: EmbeddingStore | None = None,
    kind: str = "default",
    seed: int = 0,
    decoder: str = "mbr",
    batch_size: int = 64,
) -> AblationReport:
    if kind not in ABLATION_KINDS:
        raise UsageError(f"unknown ablation {kind!r}; choose from {ABLATION_KINDS}")
    if kind in _NEEDS_LATENT and not model.latent:
        log.info("model has no latent, %s falls back to the default evaluation", kind)
        metrics = _evaluate(model, corpus.sentences, gold, embeddings, None, decoder, batch_size)
        return AblationReport(kind, metrics, identical_to_default=True)

    sentences = corpus.sentences
    z_rows = None
    if kind == "zero_z":
        z_rows = np.zeros((len(sentences), model.inventory.z_dim), dtype=model.store.dtype)
    elif kind == "random_z":
        z_rows = _batch_permuted(
            model.mu_rows(sentences, embeddings),
            _length_buckets(sentences, batch_size),
            np.random.default_rng([seed, 11]),
        )
    elif kind == "zero_captions":
        pooled = np.zeros((len(sentences), model.encoder_in_dim), dtype=model.store.dtype)
        full = pooled @ model.store["enc.w"].value + model.store["enc.b"].value
        z_rows = full[:, : model.inventory.z_dim]
    elif kind == "shuffle":
        sentences, embeddings = _shuffled_inputs(sentences, embeddings, np.random.default_rng([seed, 13]))

    metrics = _evaluate(model, sentences, gold, embeddings, z_rows, decoder, batch_size)
    return AblationReport(kind, metrics, identical_to_default=(kind == "default"))


def run_ablations(
    model: Model,
    corpus: Corpus,
    gold: list[GoldTree],
    embeddings: EmbeddingStore | None = None,
    kinds: tuple[str, ...] = ABLATION_KINDS,
    seed: int = 0,
    decoder: str = "mbr",
    batch_size: int = 64,
) -> list[AblationReport]:
    return [
        ablated_eval(model, corpus, gold, embeddings, kind, seed, decoder, batch_size)
        for kind in kinds
    ]


def _evaluate(model, sentences, gold, embeddings, z_rows, decoder, batch_size) -> dict[str, float]:
    trees = model.decode(sentences, embeddings, decoder=decoder, z_rows=z_rows, batch_size=batch_size)
    corpus = Corpus(sentences=list(sentences))
    return {
        "corpus_f1": evaluate.corpus_f1(trees, gold).f1,
        "sentence_f1": evaluate.sentence_f1(trees, gold),
        "ppl": evaluate.ppl_score(model, corpus, embeddings, z_rows=z_rows),
        "mbf": evaluate.corpus_mbf(trees),
    }


def _batch_permuted(z: np.ndarray, buckets: list[list[int]], rng: np.random.Generator) -> np.ndarray:
    """Permute rows of z within each evaluation batch, never the identity
    when the batch has more than one row."""
    out = z.copy()
    for idx in buckets:
        if len(idx) < 2:
            continue
        perm = rng.permutation(len(idx))
        while (perm == np.arange(len(idx))).all():
            perm = rng.permutation(len(idx))
        rows = np.fromiter(idx, dtype=np.intp)
        out[rows] = z[rows[perm]]
    return out


def _shuffled_inputs(
    sentences: list[Sentence], embeddings: EmbeddingStore | None, rng: np.random.Generator
) -> tuple[list[Sentence], EmbeddingStore | None]:
    """Per-sentence token permutation, applied consistently to the
    aligned embedding rows so token i still carries its own vector."""
    shuffled: list[Sentence] = []
    records: list[np.ndarray] = [] if embeddings is not None else None
    for row, s in enumerate(sentences):
        perm = rng.permutation(len(s))
        if s.ids is None:
            raise UsageError("sentences must be encoded before ablation")
        shuffled.append(
            Sentence(
                tokens=[s.tokens[i] for i in perm],
                source_index=row,
                ids=s.ids[perm],
                line_no=s.line_no,
            )
        )
        if embeddings is not None:
            records.append(embeddings[s.source_index][perm])
    store = EmbeddingStore(embeddings.dim, records) if embeddings is not None else None
    return shuffled, store
