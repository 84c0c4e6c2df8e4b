"""ELBO training loop: batching, Adam, clipping, checkpoints, run records.

One training step builds a single graph for a batch of same-length
sentences: encode -> sample z -> rule tables -> inside -> mean(-loglik
+ KL). Sentences whose likelihood underflows to -inf are excluded from
the batch mean and counted; a run aborts if more than 1% of a corpus
skips in an epoch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import evaluate
from .autograd import Node, ParamStore
from .config import TrainConfig, config_dict, config_hash
from .corpus import Corpus, Sentence, Vocabulary, build_vocabulary, encode_corpus
from .embedfile import EmbeddingStore, check_embedding_alignment
from .encoder import encode, kl_standard_normal, pool, sample_latent
from .errors import DataError, NonFiniteGradient
from .grammar import rule_tables
from .model import Model
from .parser import inside
from .trees import GoldTree

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over a ParamStore's gradients."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(store[name].value) for name in store.names()}
        self._v = {name: np.zeros_like(store[name].value) for name in store.names()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in self.store.names():
            p = self.store[name]
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name!r}")
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.value = p.value - np.asarray(self.lr * m_hat / (np.sqrt(v_hat) + self.eps), dtype=p.value.dtype)


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in store.names():
        g = store[name].grad
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in store.names():
            p = store[name]
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# loss


@dataclass
class ElboNoise:
    """All randomness of one training forward pass, drawn up front so the
    loss is a deterministic function of parameters (gradient checks)."""

    eps: np.ndarray          # (B, z_dim) reparametrization noise
    pooled_mask: np.ndarray  # (B, in_dim) inverted-dropout mask
    z_mask: np.ndarray       # (B, z_dim)


def draw_noise(rng: np.random.Generator, bsz: int, in_dim: int, z_dim: int, dropout: float, dtype) -> ElboNoise:
    return ElboNoise(
        eps=rng.standard_normal((bsz, z_dim)).astype(dtype),
        pooled_mask=ag.dropout_mask(rng, (bsz, in_dim), dropout, dtype),
        z_mask=ag.dropout_mask(rng, (bsz, z_dim), dropout, dtype),
    )


@dataclass
class BatchLoss:
    loss: Node | None      # scalar mean over kept sentences; None if all skipped
    kept: np.ndarray       # indices into the batch
    logliks: np.ndarray    # raw per-sentence log-likelihood values
    kl: float              # mean KL over kept sentences (0 for zero_train)


def elbo_loss(model: Model, ids: np.ndarray, pooled: Node | None, noise: ElboNoise | None) -> BatchLoss:
    """Mean negative ELBO over a same-length batch.

    pooled is the encoder input (absent for zero_train models); noise
    carries the sampling and dropout draws (absent = evaluation mode,
    z = mu, no dropout).
    """
    ids = np.atleast_2d(ids)
    bsz = ids.shape[0]
    if model.latent:
        if noise is not None:
            pooled = ag.mul(pooled, ag.constant(noise.pooled_mask))
        mu, log_var = encode(model.store, pooled, model.inventory.z_dim)
        eps = noise.eps if noise is not None else np.zeros_like(mu.value)
        z = sample_latent(mu, log_var, eps).z
        if noise is not None:
            z = ag.mul(z, ag.constant(noise.z_mask))
        tables = rule_tables(model.store, model.inventory, z)
        kl = kl_standard_normal(mu, log_var)  # (B,)
    else:
        tables = rule_tables(model.store, model.inventory, None, batch_size=bsz)
        kl = None

    chart = inside(tables, ids)
    logliks = chart.loglik.value.copy()
    kept = np.flatnonzero(np.isfinite(logliks))
    if kept.size == 0:
        return BatchLoss(None, kept, logliks, 0.0)
    neg = ag.neg(ag.gather_rows(chart.loglik, kept))
    if kl is not None:
        neg = ag.add(neg, ag.gather_rows(kl, kept))
    loss = ag.mean(neg)
    kl_mean = float(kl.value[kept].mean()) if kl is not None else 0.0
    return BatchLoss(loss, kept, logliks, kl_mean)


def batch_pooled(model: Model, sentences: list[Sentence], embeddings: EmbeddingStore | None) -> Node | None:
    """Differentiable pooled encoder input for a same-length batch."""
    if not model.latent:
        return None
    if model.mode == "llm":
        mats = [embeddings[s.source_index] for s in sentences]
        stacked = np.stack([np.asarray(m, dtype=np.float64) for m in mats])
        return pool(ag.constant(stacked.astype(model.store.dtype)))
    table = model.store["enc.embed"]
    ids = np.stack([s.ids for s in sentences])
    return pool(ag.gather_rows(table, ids))


# ---------------------------------------------------------------------------
# run records


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    kl: float
    skipped: int
    grad_norm: float
    seconds: float
    val: dict[str, float] = field(default_factory=dict)


@dataclass
class RunRecord:
    seed: int
    config: dict
    config_hash: str
    epochs: list[dict]
    best_epoch: int
    val_metrics: dict
    test_metrics: dict | None
    checkpoint_path: str
    embed_load_seconds: float
    train_seconds: float
    skipped_sentences: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ---------------------------------------------------------------------------
# training loop


def train_run(
    config: TrainConfig,
    train_corpus: Corpus,
    val_corpus: Corpus,
    val_gold: list[GoldTree],
    out_dir: str | Path,
    train_embeddings: EmbeddingStore | None = None,
    val_embeddings: EmbeddingStore | None = None,
    test_corpus: Corpus | None = None,
    test_gold: list[GoldTree] | None = None,
    test_embeddings: EmbeddingStore | None = None,
    vocab: Vocabulary | None = None,
    embed_load_seconds: float = 0.0,
) -> RunRecord:
    """Train one seed end to end and leave a checkpoint plus record.json.

    Deterministic given (config, data, seed): batch order, noise, and
    every metric reproduce bit-for-bit.
    """
    if not train_corpus.sentences or not val_corpus.sentences:
        raise DataError("empty corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if vocab is None:
        vocab = build_vocabulary(train_corpus.sentences, config.vocab_size)
    encode_corpus(train_corpus, vocab)
    encode_corpus(val_corpus, vocab)
    if test_corpus is not None:
        encode_corpus(test_corpus, vocab)

    llm_dim = None
    if config.mode == "llm" and not config.zero_train:
        if train_embeddings is None or val_embeddings is None:
            raise DataError("llm mode needs train and val embedding files")
        check_embedding_alignment(train_embeddings, [len(s) for s in train_corpus.sentences])
        llm_dim = train_embeddings.dim

    chash = config_hash(config)
    model = Model.build(config, vocab, llm_dim=llm_dim, config_hash=chash)
    optimizer = Adam(model.store, config.lr)
    ckp_path = out_dir / "checkpoint.ckp"

    groups: dict[int, list[int]] = {}
    for i, s in enumerate(train_corpus.sentences):
        groups.setdefault(len(s), []).append(i)
    n_train = len(train_corpus.sentences)
    epochs: list[EpochStats] = []
    best_epoch = -1
    best_val_f1 = -1.0
    best_val: dict[str, float] = {}
    train_start = time.monotonic()

    for epoch in range(config.epochs):
        tick = time.monotonic()
        rng = np.random.default_rng([config.seed, 7, epoch])
        order = _shuffled_batches(groups, config.batch_size, rng)
        loss_sum, kl_sum, kept_count, skipped = 0.0, 0.0, 0, 0
        grad_norm_max = 0.0
        for batch_idx in order:
            batch = [train_corpus.sentences[i] for i in batch_idx]
            ids = np.stack([s.ids for s in batch])
            if ids.shape[1] < 2:
                skipped += len(batch)
                continue
            pooled = batch_pooled(model, batch, train_embeddings)
            noise = None
            if model.latent:
                noise = draw_noise(
                    rng, len(batch), model.encoder_in_dim, model.inventory.z_dim, config.dropout, model.store.dtype
                )
            result = elbo_loss(model, ids, pooled, noise)
            skipped += len(batch) - result.kept.size
            if result.loss is None:
                continue
            model.store.zero_grad()
            ag.backward(result.loss)
            grad_norm_max = max(grad_norm_max, clip_gradients(model.store, config.clip_norm))
            optimizer.step()
            loss_sum += float(result.loss.value) * result.kept.size
            kl_sum += result.kl * result.kept.size
            kept_count += result.kept.size
        if skipped > 0.01 * n_train:
            raise DataError(f"epoch {epoch}: {skipped}/{n_train} sentences unparseable, aborting")

        val = evaluate_model(model, val_corpus, val_gold, val_embeddings, decoder=config.decoder)
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / max(kept_count, 1),
            kl=kl_sum / max(kept_count, 1),
            skipped=skipped,
            grad_norm=grad_norm_max,
            seconds=time.monotonic() - tick,
            val=val,
        )
        epochs.append(stats)
        log.info(
            "epoch %d loss %.4f val C-F1 %.4f S-F1 %.4f ppl %.4f mbf %.3f",
            epoch, stats.train_loss, val["corpus_f1"], val["sentence_f1"], val["ppl"], val["mbf"],
        )
        if val["corpus_f1"] > best_val_f1:
            best_val_f1 = val["corpus_f1"]
            best_epoch = epoch
            best_val = val
            model.save(ckp_path)

    train_seconds = time.monotonic() - train_start
    test_metrics = None
    if test_corpus is not None and test_gold is not None:
        best_model = Model.load(ckp_path, precision=config.precision)
        test_metrics = evaluate_model(best_model, test_corpus, test_gold, test_embeddings, decoder=config.decoder)

    record = RunRecord(
        seed=config.seed,
        config=config_dict(config),
        config_hash=chash,
        epochs=[dataclasses.asdict(e) for e in epochs],
        best_epoch=best_epoch,
        val_metrics=best_val,
        test_metrics=test_metrics,
        checkpoint_path=str(ckp_path),
        embed_load_seconds=embed_load_seconds,
        train_seconds=train_seconds,
        skipped_sentences=sum(e.skipped for e in epochs),
    )
    (out_dir / "record.json").write_text(record.to_json() + "\n", encoding="utf-8")
    return record


def evaluate_model(
    model: Model,
    corpus: Corpus,
    gold: list[GoldTree],
    embeddings: EmbeddingStore | None = None,
    decoder: str = "mbr",
) -> dict[str, float]:
    """The four headline metrics on one corpus."""
    trees = model.decode(corpus.sentences, embeddings, decoder=decoder)
    cf1 = evaluate.corpus_f1(trees, gold)
    sf1 = evaluate.sentence_f1(trees, gold)
    ppl = evaluate.ppl_score(model, corpus, embeddings)
    mbf = evaluate.corpus_mbf(trees)
    return {"corpus_f1": cf1.f1, "sentence_f1": sf1, "ppl": ppl, "mbf": mbf}


def _shuffled_batches(
    groups: dict[int, list[int]], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    """Same-length batches with per-epoch shuffling inside each length
    group and over the batch order."""
    batches: list[list[int]] = []
    for length in sorted(groups):
        idx = np.array(groups[length])
        rng.shuffle(idx)
        for start in range(0, len(idx), batch_size):
            batches.append(idx[start : start + batch_size].tolist())
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]
