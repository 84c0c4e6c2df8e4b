"""Unsupervised-parsing metrics and run selection.

F1 is computed over non-trivial spans: width >= 2 and not the whole
sentence. Sentences with no non-trivial gold spans (length <= 2) score
a sentence-F1 of 1 and are counted; corpus-F1 pools match counts over
the whole corpus so those sentences contribute nothing to either pool.
All F1 values are fractions in [0, 1]; reports scale to percentages.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, TooFewRuns, ZeroVariance
from .trees import GoldTree, Tree, internal_nodes, leaf, node, tree_spans

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class F1Score:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, matched: int, predicted: int, gold: int) -> "F1Score":
        p = matched / predicted if predicted else 0.0
        r = matched / gold if gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


def predicted_spans(tree: Tree) -> set[tuple[int, int]]:
    return tree_spans(tree, exclude_trivial=True)


def _check_pairs(preds: list[Tree], golds: list[GoldTree]) -> None:
    if len(preds) != len(golds):
        raise AlignmentError(f"{len(preds)} predictions vs {len(golds)} gold trees")
    for i, (p, g) in enumerate(zip(preds, golds)):
        n = p.end - p.start
        if n != g.leaf_count:
            raise AlignmentError(f"pair {i}: {n} predicted leaves vs {g.leaf_count} gold leaves")


def sentence_f1(preds: list[Tree], golds: list[GoldTree], count_short: bool = True) -> float:
    """Mean per-sentence F1. Sentences without non-trivial gold spans
    (length <= 2) score 1.0 and are counted unless count_short is off."""
    _check_pairs(preds, golds)
    scores = []
    for pred, gold in zip(preds, golds):
        gold_spans = gold.nontrivial_spans()
        if not gold_spans:
            if count_short:
                scores.append(1.0)
            continue
        pred_spans = predicted_spans(pred)
        matched = len(pred_spans & gold_spans)
        scores.append(F1Score.from_counts(matched, len(pred_spans), len(gold_spans)).f1)
    if not scores:
        raise ValueError("no sentences to score")
    return float(np.mean(scores))


def corpus_f1(preds: list[Tree], golds: list[GoldTree]) -> F1Score:
    """Precision/recall pooled over all sentences, then combined."""
    _check_pairs(preds, golds)
    matched = predicted = gold_total = 0
    for pred, gold in zip(preds, golds):
        gold_spans = gold.nontrivial_spans()
        pred_spans = predicted_spans(pred)
        matched += len(pred_spans & gold_spans)
        predicted += len(pred_spans)
        gold_total += len(gold_spans)
    return F1Score.from_counts(matched, predicted, gold_total)


# ---------------------------------------------------------------------------
# rule-based baseline trees


def baseline_tree(kind: str, n: int, rng: np.random.Generator | None = None) -> Tree:
    """left: fully left-nested; right: fully right-nested; random:
    recursive uniform split choices (seeded rng required)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return leaf(None, 0)
    if kind == "left":
        tree = leaf(None, 0)
        for i in range(1, n):
            tree = node("T", [tree, leaf(None, i)])
        return tree
    if kind == "right":
        tree = leaf(None, n - 1)
        for i in range(n - 2, -1, -1):
            tree = node("T", [leaf(None, i), tree])
        return tree
    if kind == "random":
        if rng is None:
            raise ValueError("random baseline needs an rng")

        def build(i: int, j: int) -> Tree:
            if j - i == 1:
                return leaf(None, i)
            k = int(rng.integers(i + 1, j))
            return node("T", [build(i, k), build(k, j)])

        return build(0, n)
    raise ValueError(f"unknown baseline kind {kind!r}")


# ---------------------------------------------------------------------------
# branching factor


def mbf(tree: Tree) -> float:
    """Mean over internal nodes of right-subtree leaves / left-subtree
    leaves. Requires a binary tree with at least one internal node."""
    nodes = internal_nodes(tree)
    if not nodes:
        raise ValueError("tree has no internal nodes")
    total = 0.0
    for t in nodes:
        if len(t.children) != 2:
            raise ValueError("mbf needs a binary tree")
        l, r = t.children
        total += (r.end - r.start) / (l.end - l.start)
    return total / len(nodes)


def corpus_mbf(trees: list[Tree]) -> float:
    """Mean of per-tree MBF; single-leaf trees carry no signal and are skipped."""
    values = [mbf(t) for t in trees if not t.is_leaf]
    if not values:
        raise ValueError("no trees with internal nodes")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# perplexity-style model selection score


def ppl_score(model, corpus, embeddings=None, z_rows=None) -> float:
    """exp of per-token negative log evidence at z = mu (or given z).

    Sentences with zero probability (including length 1, which a CNF
    grammar cannot yield) are excluded and counted.
    """
    sentences = list(corpus)
    logliks = model.log_likelihoods(sentences, embeddings, z_rows=z_rows)
    keep = np.isfinite(logliks)
    excluded = int((~keep).sum())
    if excluded:
        log.info("ppl_score: excluded %d zero-probability sentences", excluded)
    if not keep.any():
        raise ValueError("no scorable sentences")
    total_tokens = sum(len(s) for s, k in zip(sentences, keep) if k)
    return float(np.exp(-logliks[keep].sum() / total_tokens))


# ---------------------------------------------------------------------------
# correlation


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("pearson needs two equal-length series of >= 2 points")
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    sx = float(np.sqrt((xd * xd).sum()))
    sy = float(np.sqrt((yd * yd).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("a constant series has no correlation")
    return float((xd * yd).sum() / (sx * sy))


# ---------------------------------------------------------------------------
# run selection


@dataclass
class Selection:
    criterion: str
    chosen_seeds: list[int]
    mean_corpus_f1: float
    std_corpus_f1: float
    mean_sentence_f1: float
    std_sentence_f1: float
    used_test_metrics: bool


_CRITERIA = ("val_f1", "ppl", "mbf")


def _criterion_key(record, criterion: str) -> float:
    metrics = record.val_metrics
    if criterion == "val_f1":
        return -metrics["corpus_f1"]
    if criterion == "ppl":
        return metrics["ppl"]
    if criterion == "mbf":
        return abs(metrics["mbf"] - 1.0)
    raise ValueError(f"unknown criterion {criterion!r}; choose from {_CRITERIA}")


def select_runs(records: list, criterion: str = "val_f1", k: int = 4) -> Selection:
    """Top-k runs by a validation criterion; mean and sample std of the
    reported (test) metrics. Sorting is stable under input order: ties
    break by seed."""
    if k > len(records):
        raise TooFewRuns(f"asked for top {k} of {len(records)} runs")
    ranked = sorted(records, key=lambda r: (_criterion_key(r, criterion), r.seed))
    chosen = ranked[:k]
    use_test = all(r.test_metrics is not None for r in chosen)
    if not use_test:
        log.warning("select_runs: some records lack test metrics, reporting validation metrics")
    reported = [(r.test_metrics if use_test else r.val_metrics) for r in chosen]
    cf1 = [m["corpus_f1"] for m in reported]
    sf1 = [m["sentence_f1"] for m in reported]
    return Selection(
        criterion=criterion,
        chosen_seeds=[r.seed for r in chosen],
        mean_corpus_f1=float(np.mean(cf1)),
        std_corpus_f1=float(statistics.stdev(cf1)) if k > 1 else 0.0,
        mean_sentence_f1=float(np.mean(sf1)),
        std_sentence_f1=float(statistics.stdev(sf1)) if k > 1 else 0.0,
        used_test_metrics=use_test,
    )
