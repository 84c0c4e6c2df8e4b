"""Token-level embedding extraction from a causal language model.

The corpus is expected to be preprocessed already (one sentence per line,
tokens separated by spaces); extraction must see the exact token sequences
the downstream parser will see, so no further normalization happens here.
Each sentence is encoded with the model's own subword tokenizer, run
through the model once, and the final-layer hidden states are mean-pooled
back to one vector per corpus token.

A BOS token is prepended before the forward pass when the tokenizer
defines one (standard for causal models) and its hidden state is dropped,
so record rows always align one-to-one with corpus tokens.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .emb1 import Emb1Writer, read_file
from .errors import FormatError, ModelLoadError, TokenAlignmentError

log = logging.getLogger(__name__)

DEFAULT_MODEL = "facebook/opt-2.7b"


def read_corpus(path: str | Path) -> list[list[str]]:
    """One sentence per line, split on whitespace; empty lines are skipped
    because the parser-side loader drops them too, which keeps record
    ordinals aligned between the two tools."""
    sentences: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                sentences.append(tokens)
    return sentences


@dataclass
class ExtractionJob:
    corpus: str | Path
    out: str | Path
    model: str = DEFAULT_MODEL
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ExtractResult:
    path: str
    sentences: int
    dim: int


def load_model(name: str, device: str = "cpu"):
    """Returns (tokenizer, model) in eval mode, or raises ModelLoadError."""
    from transformers import AutoModel, AutoTokenizer

    try:
        # add_prefix_space matters for byte-BPE tokenizers when the input
        # arrives pre-split into words; tokenizers that do not know the
        # flag ignore it.
        tokenizer = AutoTokenizer.from_pretrained(name, use_fast=True, add_prefix_space=True)
        model = AutoModel.from_pretrained(name)
    except Exception as exc:
        raise ModelLoadError(f"cannot load {name}: {exc}") from exc
    if not getattr(tokenizer, "is_fast", False):
        raise ModelLoadError(f"{name}: subword-to-word alignment needs a fast tokenizer")
    model.eval()
    model.to(device)
    return tokenizer, model


def output_width(model, tokenizer, device: str = "cpu") -> int:
    """Width of the final hidden layer, measured on a one-token forward
    pass rather than read from the config (some models project their
    output to a width other than hidden_size)."""
    probe = tokenizer.bos_token_id
    if probe is None:
        probe = tokenizer.eos_token_id
    if probe is None:
        probe = 0
    ids = torch.full((1, 1), probe, dtype=torch.long, device=device)
    with torch.no_grad():
        out = model(input_ids=ids, attention_mask=torch.ones_like(ids))
    return int(out.last_hidden_state.shape[-1])


def _pool_words(hidden: np.ndarray, word_ids: list[int | None], n_words: int, where: str) -> np.ndarray:
    """Mean over each word's subword rows; hidden excludes any BOS row."""
    sums = np.zeros((n_words, hidden.shape[1]), dtype=np.float64)
    counts = np.zeros(n_words, dtype=np.int64)
    for j, w in enumerate(word_ids):
        if w is None:
            continue
        sums[w] += hidden[j]
        counts[w] += 1
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise TokenAlignmentError(f"{where}: token {missing[0]} maps to no subwords")
    return (sums / counts[:, None]).astype("<f4")


def _embed_batch(tokenizer, model, device: str, sentences: list[list[str]], start: int) -> list[np.ndarray]:
    enc = tokenizer(
        sentences,
        is_split_into_words=True,
        add_special_tokens=False,
        padding=True,
        return_tensors="pt",
    )
    ids = enc["input_ids"]
    mask = enc["attention_mask"]
    bos = tokenizer.bos_token_id
    lead = 0
    if bos is not None:
        ones = torch.ones((ids.shape[0], 1), dtype=ids.dtype)
        ids = torch.cat([ones * bos, ids], dim=1)
        mask = torch.cat([torch.ones_like(ones), mask], dim=1)
        lead = 1
    with torch.no_grad():
        out = model(input_ids=ids.to(device), attention_mask=mask.to(device))
    hidden = out.last_hidden_state.cpu().numpy()
    records = []
    for row, sentence in enumerate(sentences):
        records.append(
            _pool_words(
                hidden[row, lead:],
                enc.word_ids(row),
                len(sentence),
                f"sentence {start + row}",
            )
        )
    return records


def extract(job: ExtractionJob) -> ExtractResult:
    sentences = read_corpus(job.corpus)
    tokenizer, model = load_model(job.model, job.device)
    dim = output_width(model, tokenizer, job.device)
    log.info("extracting %d sentences at dim %d from %s", len(sentences), dim, job.model)
    with Emb1Writer(job.out, dim, len(sentences)) as writer:
        for start in range(0, len(sentences), job.batch_size):
            batch = sentences[start : start + job.batch_size]
            for record in _embed_batch(tokenizer, model, job.device, batch, start):
                writer.append(record)
    return ExtractResult(str(job.out), len(sentences), dim)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ValidationReport:
    path: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "ok": self.ok,
            "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks],
        }


def validate(
    path: str | Path,
    corpus: str | Path,
    model: str = DEFAULT_MODEL,
    device: str = "cpu",
    sample_index: int | None = None,
    tol: float = 1e-5,
) -> ValidationReport:
    """Structural checks on an embedding file against its corpus, plus a
    recomputation check: one sentence is re-run through the model and its
    pooled vectors must match the stored record within tol (the stored
    record came from a padded batch, so bit equality is not guaranteed)."""
    report = ValidationReport(str(path))
    sentences = read_corpus(corpus)
    try:
        data = read_file(path)
    except FormatError as exc:
        report.checks.append(CheckResult("structure", False, str(exc)))
        return report
    report.checks.append(CheckResult("structure", True))

    counts_ok = len(data.records) == len(sentences)
    report.checks.append(
        CheckResult(
            "sentence_count",
            counts_ok,
            "" if counts_ok else f"{len(data.records)} records vs {len(sentences)} sentences",
        )
    )

    mismatch = ""
    for i, (rec, sent) in enumerate(zip(data.records, sentences)):
        if rec.shape[0] != len(sent):
            mismatch = f"record {i}: {rec.shape[0]} rows vs {len(sent)} tokens"
            break
    report.checks.append(CheckResult("token_counts", not mismatch, mismatch))

    bad = ""
    for i, rec in enumerate(data.records):
        if not np.isfinite(rec).all():
            bad = f"record {i} contains non-finite values"
            break
    report.checks.append(CheckResult("finite", not bad, bad))

    if not report.ok or not sentences:
        return report

    if sample_index is None:
        sample_index = random.Random(0).randrange(len(sentences))
    if not 0 <= sample_index < len(sentences):
        raise ValueError(f"sample_index {sample_index} out of range for {len(sentences)} sentences")
    tokenizer, loaded = load_model(model, device)
    fresh = _embed_batch(tokenizer, loaded, device, [sentences[sample_index]], sample_index)[0]
    stored = data.records[sample_index]
    if fresh.shape != stored.shape:
        report.checks.append(
            CheckResult(
                "pooled_recompute",
                False,
                f"sentence {sample_index}: fresh shape {fresh.shape} vs stored {stored.shape}",
            )
        )
        return report
    diff = float(np.max(np.abs(fresh.astype(np.float64) - stored.astype(np.float64))))
    report.checks.append(
        CheckResult(
            "pooled_recompute",
            diff <= tol,
            f"sentence {sample_index}: max abs diff {diff:.3g}",
        )
    )
    return report
