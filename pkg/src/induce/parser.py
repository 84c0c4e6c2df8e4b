"""Inside algorithm, span posteriors, decoders, sampling, and oracles.

The inside pass runs over a batch of same-length sentences as one graph.
Chart cells are dense log-score arrays: width-1 cells range over
preterminals, width>=2 cells over nonterminals, so the four child-type
blocks of the binary rule table are sliced per (left width, right width)
and no -inf padding is ever introduced by the layout itself.

Span posteriors come from two independent routes that must agree: an
explicit numpy outside pass, and differentiation of the log-likelihood
with respect to per-span zero potentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node
from .errors import TooLongError, UnproductiveGrammar, ZeroProbability
from .grammar import ExplicitGrammar, RuleTables
from .trees import Tree, leaf, node

BRUTE_FORCE_MAX = 8


@dataclass
class InsideChart:
    n: int
    loglik: Node                      # (B,)
    cells: dict[int, Node]            # width -> (B, n-width+1, symbols)
    potentials: dict[int, Node] | None = None

    def cell_values(self, b: int = 0) -> dict[int, np.ndarray]:
        return {w: c.value[b] for w, c in self.cells.items()}


def _child_block(binary: Node, n_nt: int, left_wide: bool, right_wide: bool) -> Node:
    """Slice the (B, N, M, M) table down to the child types in play."""
    m = binary.value.shape[2]
    row = (0, n_nt) if left_wide else (n_nt, m - n_nt)
    col = (0, n_nt) if right_wide else (n_nt, m - n_nt)
    return ag.narrow(ag.narrow(binary, 2, *row), 3, *col)


def inside(tables: RuleTables, ids: np.ndarray, with_potentials: bool = False) -> InsideChart:
    """Batched inside pass. ids: (B, n) vocabulary indices.

    With with_potentials, every width>=2 cell row gets a zero additive
    leaf whose gradient after backward() is the span posterior.
    """
    ids = np.atleast_2d(np.asarray(ids))
    bsz, n = ids.shape
    n_nt = tables.root.value.shape[1]
    dtype = tables.root.value.dtype

    term_tok = ag.gather_terminals(tables.terminal, ids)  # (B, n, P)
    cells: dict[int, Node] = {1: term_tok}
    potentials: dict[int, Node] = {}

    if n == 1:
        # CNF has no length-1 yield; the evidence is exactly zero.
        loglik = ag.constant(np.full(bsz, -np.inf, dtype=dtype))
        return InsideChart(n, loglik, cells, potentials if with_potentials else None)

    blocks: dict[tuple[bool, bool], Node] = {}
    for w in range(2, n + 1):
        length = n - w + 1
        parts = []
        for k in range(1, w):
            left = ag.narrow(cells[k], 1, 0, length)
            right = ag.narrow(cells[w - k], 1, k, length)
            key = (k > 1, w - k > 1)
            if key not in blocks:
                blocks[key] = _child_block(tables.binary, n_nt, *key)
            parts.append(ag.span_combine(left, right, blocks[key]))
        cell = parts[0] if len(parts) == 1 else ag.logsumexp(ag.stack(parts, axis=0), axis=0)
        if with_potentials:
            phi = ag.leaf(np.zeros((bsz, length), dtype=dtype))
            potentials[w] = phi
            cell = ag.add(cell, ag.reshape(phi, (bsz, length, 1)))
        cells[w] = cell

    root_scores = ag.add(tables.root, ag.reshape(cells[n], (bsz, n_nt)))
    loglik = ag.logsumexp(root_scores, axis=-1)  # (B,)
    return InsideChart(n, loglik, cells, potentials if with_potentials else None)


def as_nodes(tables: RuleTables, dtype=np.float64) -> RuleTables:
    """Wrap unbatched numpy tables as constant nodes with batch size 1."""
    return RuleTables(
        ag.constant(tables.root[None, :], dtype=dtype),
        ag.constant(tables.binary[None, :], dtype=dtype),
        ag.constant(tables.terminal[None, :], dtype=dtype),
    )


def inside_log_likelihood(tables: RuleTables, ids: np.ndarray) -> float:
    """log p(x) for one sentence under unbatched numpy tables; -inf if unparseable."""
    chart = inside(as_nodes(tables), np.asarray(ids)[None, :])
    return float(chart.loglik.value[0])


# ---------------------------------------------------------------------------
# span posteriors


@dataclass
class SpanPosteriors:
    n: int
    probs: np.ndarray  # (n+1, n+1); probs[i, j] for 0 <= i < j <= n
    loglik: float

    def width_sum(self, min_width: int = 2) -> float:
        total = 0.0
        for i in range(self.n):
            for j in range(i + min_width, self.n + 1):
                total += self.probs[i, j]
        return total


def _lse(x: np.ndarray, axis) -> np.ndarray:
    axes = axis if isinstance(axis, tuple) else (axis,)
    m = x.max(axis=axes, keepdims=True)
    e = ag._shifted_exp(x, m)
    s = e.sum(axis=axes, keepdims=True)
    out = np.where(s > 0, np.where(np.isfinite(m), m, 0.0) + ag._safe_log(s), -np.inf)
    return np.squeeze(out, axis=axes)


def outside_values(
    root: np.ndarray, binary: np.ndarray, beta: dict[int, np.ndarray], n: int
) -> dict[int, np.ndarray]:
    """Explicit outside pass over inside values for one sentence.

    beta[w] is the (n-w+1, symbols) inside array. Returns alpha with the
    same indexing: alpha[w][i, s] = log outside score of span (i, i+w)
    under symbol s.
    """
    n_nt = root.shape[0]
    m = binary.shape[1]
    alpha: dict[int, np.ndarray] = {n: root[None, :].copy()}
    for w in range(n - 1, 0, -1):
        own = slice(0, n_nt) if w > 1 else slice(n_nt, m)
        length = n - w + 1
        acc = np.full((length, own.stop - own.start), -np.inf)
        for pw in range(w + 1, n + 1):
            lp = n - pw + 1
            sw = pw - w
            sib_slice = slice(0, n_nt) if sw > 1 else slice(n_nt, m)
            sib = beta[sw]
            ap = alpha[pw]
            # as left child: parent at i, sibling to the right at i+w
            blk = binary[:, own, sib_slice]
            t = ap[:, :, None, None] + blk[None] + sib[w : w + lp][:, None, None, :]
            acc[:lp] = np.logaddexp(acc[:lp], _lse(t, (1, 3)))
            # as right child: parent at j, sibling to the left at j
            blk = binary[:, sib_slice, own]
            t = ap[:, :, None, None] + blk[None] + sib[0:lp][:, None, :, None]
            acc[sw : sw + lp] = np.logaddexp(acc[sw : sw + lp], _lse(t, (1, 2)))
        alpha[w] = acc
    return alpha


def span_posteriors(tables: RuleTables, ids: np.ndarray, method: str = "outside") -> SpanPosteriors:
    """Posterior constituent probability for every span of one sentence.

    method="outside": explicit inside-outside in numpy.
    method="grad": d log p(x) / d phi for zero span potentials phi.
    The two implementations are independent and agree to float64 precision.
    """
    ids = np.asarray(ids)
    n = ids.shape[0]
    if method == "grad":
        chart = inside(as_nodes(tables), ids[None, :], with_potentials=True)
        loglik = float(chart.loglik.value[0])
        if not np.isfinite(loglik):
            raise ZeroProbability("sentence has zero probability")
        probs = np.zeros((n + 1, n + 1))
        for i in range(n):
            probs[i, i + 1] = 1.0
        ag.backward(ag.reduce_sum(chart.loglik))
        for w, phi in chart.potentials.items():
            for i in range(n - w + 1):
                probs[i, i + w] = phi.grad[0, i]
        return SpanPosteriors(n, probs, loglik)
    if method != "outside":
        raise ValueError(f"unknown method {method!r}")

    chart = inside(as_nodes(tables), ids[None, :])
    loglik = float(chart.loglik.value[0])
    if not np.isfinite(loglik):
        raise ZeroProbability("sentence has zero probability")
    beta = chart.cell_values(0)
    alpha = outside_values(tables.root, tables.binary, beta, n)
    probs = np.zeros((n + 1, n + 1))
    for w in range(1, n + 1):
        joint = _lse(beta[w] + alpha[w], axis=1)  # (n-w+1,)
        for i in range(n - w + 1):
            probs[i, i + w] = float(np.exp(joint[i] - loglik))
    return SpanPosteriors(n, probs, loglik)


def batch_span_posteriors(tables: RuleTables, ids: np.ndarray) -> list[SpanPosteriors]:
    """Grad-route posteriors for a batch of same-length sentences at once."""
    ids = np.atleast_2d(ids)
    bsz, n = ids.shape
    chart = inside(tables, ids, with_potentials=True)
    logliks = chart.loglik.value
    ag.backward(ag.reduce_sum(chart.loglik))
    out = []
    for b in range(bsz):
        probs = np.zeros((n + 1, n + 1))
        for i in range(n):
            probs[i, i + 1] = 1.0
        for w, phi in chart.potentials.items():
            for i in range(n - w + 1):
                probs[i, i + w] = phi.grad[b, i]
        out.append(SpanPosteriors(n, probs, float(logliks[b])))
    return out


# ---------------------------------------------------------------------------
# decoders


def mbr_decode(post: SpanPosteriors) -> Tree:
    """Tree maximizing the total posterior mass of its spans (CKY).

    Ties prefer the smallest split point, so decoding is deterministic.
    """
    n = post.n
    if n == 1:
        return leaf(None, 0)
    score = np.zeros((n + 1, n + 1))
    split = np.zeros((n + 1, n + 1), dtype=np.int64)
    for w in range(2, n + 1):
        for i in range(n - w + 1):
            j = i + w
            best, best_k = -np.inf, -1
            for k in range(i + 1, j):
                v = score[i, k] + score[k, j]
                if v > best:
                    best, best_k = v, k
            score[i, j] = post.probs[i, j] + best
            split[i, j] = best_k

    def build(i: int, j: int) -> Tree:
        if j - i == 1:
            return leaf(None, i)
        k = int(split[i, j])
        return node("T", [build(i, k), build(k, j)])

    return build(0, n)


def viterbi_decode(tables: RuleTables, ids: np.ndarray) -> tuple[Tree, float]:
    """Max-probability derivation; ties take the first index in scan order."""
    ids = np.asarray(ids)
    n = ids.shape[0]
    if n == 1:
        return leaf(None, 0), -np.inf
    root, binary, terminal = tables.root, tables.binary, tables.terminal
    n_nt = root.shape[0]
    m = binary.shape[1]
    chart: dict[int, np.ndarray] = {1: terminal[:, ids].T}  # (n, P)
    back: dict[int, tuple[np.ndarray, ...]] = {}
    for w in range(2, n + 1):
        length = n - w + 1
        best = np.full((length, n_nt), -np.inf)
        bk = np.zeros((length, n_nt), dtype=np.int64)
        bb = np.zeros((length, n_nt), dtype=np.int64)
        bc = np.zeros((length, n_nt), dtype=np.int64)
        for k in range(1, w):
            left = chart[k][0:length]
            right = chart[w - k][k : k + length]
            row = slice(0, n_nt) if k > 1 else slice(n_nt, m)
            col = slice(0, n_nt) if w - k > 1 else slice(n_nt, m)
            blk = binary[:, row, col]
            t = left[:, None, :, None] + blk[None] + right[:, None, None, :]
            flat = t.reshape(length, n_nt, -1)
            idx = flat.argmax(axis=2)
            val = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
            better = val > best
            n_col = col.stop - col.start
            bk = np.where(better, k, bk)
            bb = np.where(better, idx // n_col, bb)
            bc = np.where(better, idx % n_col, bc)
            best = np.where(better, val, best)
        chart[w] = best
        back[w] = (bk, bb, bc)

    totals = root + chart[n][0]
    a = int(np.argmax(totals))
    logprob = float(totals[a])
    if not np.isfinite(logprob):
        raise ZeroProbability("sentence has zero probability")

    def build(w: int, i: int, sym: int) -> Tree:
        if w == 1:
            return leaf(None, i)
        bk, bb, bc = back[w]
        k, b, c = int(bk[i, sym]), int(bb[i, sym]), int(bc[i, sym])
        return node("T", [build(k, i, b), build(w - k, i + k, c)])

    return build(n, 0, a), logprob


# ---------------------------------------------------------------------------
# brute-force oracle


def _tree_shapes(width: int) -> list:
    if width == 1:
        return [None]
    shapes = []
    for k in range(1, width):
        for l in _tree_shapes(k):
            for r in _tree_shapes(width - k):
                shapes.append((k, l, r))
    return shapes


def brute_force_log_likelihood(tables: RuleTables, ids: np.ndarray) -> float:
    """Sum over every binary tree shape and symbol assignment, in linear space.

    Exponential-time oracle for the inside algorithm; capped at 8 tokens
    (429 shapes).
    """
    ids = np.asarray(ids)
    n = ids.shape[0]
    if n > BRUTE_FORCE_MAX:
        raise TooLongError(f"brute force capped at {BRUTE_FORCE_MAX} tokens, got {n}")
    if n == 0:
        raise ValueError("empty sentence")
    if n == 1:
        return -np.inf
    n_nt = tables.root.shape[0]
    m = tables.binary.shape[1]
    with np.errstate(over="ignore"):
        root_lin = np.exp(np.asarray(tables.root, dtype=np.float64))
        bin_lin = np.exp(np.asarray(tables.binary, dtype=np.float64))
        term_lin = np.exp(np.asarray(tables.terminal, dtype=np.float64))

    def vec(shape, i: int, w: int) -> np.ndarray:
        if shape is None:
            return term_lin[:, ids[i]]
        k, ls, rs = shape
        vl = vec(ls, i, k)
        vr = vec(rs, i + k, w - k)
        row = slice(0, n_nt) if k > 1 else slice(n_nt, m)
        col = slice(0, n_nt) if w - k > 1 else slice(n_nt, m)
        return np.einsum("abc,b,c->a", bin_lin[:, row, col], vl, vr)

    total = 0.0
    for shape in _tree_shapes(n):
        total += float(root_lin @ vec(shape, 0, n))
    return float(np.log(total)) if total > 0 else -np.inf


# ---------------------------------------------------------------------------
# ancestral sampling


class _Overflow(Exception):
    pass


class _Budget:
    __slots__ = ("leaves", "cap")

    def __init__(self, cap: int):
        self.leaves = 0
        self.cap = cap


def sample_corpus(
    grammar: ExplicitGrammar, count: int, max_len: int, seed: int
) -> list[tuple[list[str], Tree]]:
    """Ancestral samples from S, rejecting yields longer than max_len.

    Returns (tokens, labeled gold tree) pairs, deterministic given seed.
    Raises UnproductiveGrammar after 1000 consecutive rejections.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    n_nt = len(grammar.nonterminals)
    m = n_nt + len(grammar.preterminals)
    root_p = _to_probs(grammar.tables.root)
    bin_p = _to_probs(grammar.tables.binary.reshape(n_nt, -1))
    term_p = _to_probs(grammar.tables.terminal)
    rng = np.random.default_rng(seed)

    def expand(sym: int, budget: _Budget, depth: int) -> Tree:
        # Depth > cap guarantees the final yield exceeds the cap too
        # (every binary ancestor contributes at least one more leaf).
        if depth > budget.cap:
            raise _Overflow
        if sym >= n_nt:
            pt = sym - n_nt
            w = int(rng.choice(len(grammar.words), p=term_p[pt]))
            budget.leaves += 1
            if budget.leaves > budget.cap:
                raise _Overflow
            word = grammar.words[w]
            return node(grammar.preterminals[pt], [leaf(word, budget.leaves - 1)])
        pair = int(rng.choice(m * m, p=bin_p[sym]))
        b, c = divmod(pair, m)
        left_child = expand(b, budget, depth + 1)
        right_child = expand(c, budget, depth + 1)
        return node(grammar.nonterminals[sym], [left_child, right_child])

    out: list[tuple[list[str], Tree]] = []
    rejects = 0
    while len(out) < count:
        budget = _Budget(max_len)
        start = int(rng.choice(n_nt, p=root_p))
        try:
            tree = expand(start, budget, 0)
        except _Overflow:
            rejects += 1
            if rejects >= 1000:
                raise UnproductiveGrammar(f"1000 consecutive samples exceeded max_len={max_len}")
            continue
        rejects = 0
        out.append((tree.tokens(), tree))
    return out


def _to_probs(log_table: np.ndarray) -> np.ndarray:
    p = np.exp(np.asarray(log_table, dtype=np.float64))
    totals = p.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("a rule family has zero total probability")
    return p / totals
