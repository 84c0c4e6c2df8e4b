"""Reverse-mode automatic differentiation over dense numpy arrays.

A deliberately small engine: a handful of ops recorded into a graph of
`Node` objects, a topological backward pass, and a finite-difference
checker. Quantities that represent probabilities live in log space
throughout; exponentials only ever appear inside numerically shifted
reductions (`logsumexp`, `log_softmax`, `span_combine`).

Two dtypes are supported. float32 is the training default; float64 is
used by the gradient checker and the oracle tests, where agreement
tolerances are far below float32 resolution.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonDeterministicLoss, NonScalarRoot

Array = np.ndarray

NEG_INF = -np.inf


class Node:
    """One value in the computation graph.

    `value` is a dense numpy array, treated as immutable once wrapped.
    `grad` is filled in during `backward` for every node on a path from
    the root to a gradient-requiring leaf, and accumulates across
    multiple consumers.
    """

    __slots__ = ("value", "parents", "needs_grad", "grad", "_backward")

    def __init__(
        self,
        value: Array,
        parents: tuple["Node", ...] = (),
        backward: Callable[[Array], None] | None = None,
        needs_grad: bool = False,
    ):
        self.value = value
        self.parents = parents
        self.needs_grad = needs_grad
        self.grad: Array | None = None
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype}, grad={self.needs_grad})"


class Parameter(Node):
    """A named trainable leaf. Its grad buffer persists across graphs."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: Array):
        super().__init__(value, (), None, True)
        self.name = name
        self.grad = np.zeros_like(value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def constant(value, dtype=None) -> Node:
    """Wrap an array-like as a non-differentiable leaf."""
    return Node(np.asarray(value, dtype=dtype))


def leaf(value, dtype=None) -> Node:
    """A differentiable leaf that is not a parameter (e.g. span potentials)."""
    return Node(np.asarray(value, dtype=dtype), (), None, True)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: Array, parents: Sequence[Node], backward) -> Node:
    needs = any(p.needs_grad for p in parents)
    if not needs:
        # Dead branch for backprop: drop parents so the subgraph can be freed.
        return Node(value)
    return Node(value, tuple(parents), backward, True)


def _accum(node: Node, g: Array) -> None:
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def bw(g: Array) -> None:
        if a.needs_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.needs_grad:
            _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def bw(g: Array) -> None:
        if a.needs_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.needs_grad:
            _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def bw(g: Array) -> None:
        if a.needs_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.needs_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Node:
    a = _wrap(a)

    def bw(g: Array) -> None:
        _accum(a, -g)

    return _make(-a.value, (a,), bw)


def exp(a) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)

    def bw(g: Array) -> None:
        _accum(a, g * out)

    return _make(out, (a,), bw)


def relu(a) -> Node:
    a = _wrap(a)
    out = np.maximum(a.value, 0)

    def bw(g: Array) -> None:
        _accum(a, g * (a.value > 0))

    return _make(out, (a,), bw)


def matmul(a, b) -> Node:
    """Batched matrix product; both operands must have ndim >= 2."""
    a, b = _wrap(a), _wrap(b)
    out = a.value @ b.value

    def bw(g: Array) -> None:
        if a.needs_grad:
            ga = g @ np.swapaxes(b.value, -1, -2)
            _accum(a, _unbroadcast(ga, a.value.shape))
        if b.needs_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.value.shape))

    return _make(out, (a, b), bw)


def affine(x, w, b) -> Node:
    """x @ w + b with w stored (in, out)."""
    return add(matmul(x, w), b)


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = _wrap(a)
    in_shape = a.value.shape

    def bw(g: Array) -> None:
        _accum(a, g.reshape(in_shape))

    return _make(a.value.reshape(shape), (a,), bw)


def broadcast_to(a, shape: tuple[int, ...]) -> Node:
    a = _wrap(a)

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.value.shape))

    return _make(np.broadcast_to(a.value, shape), (a,), bw)


def narrow(a, axis: int, start: int, length: int) -> Node:
    """Slice `length` entries from `start` along `axis`."""
    a = _wrap(a)
    index = (slice(None),) * axis + (slice(start, start + length),)
    out = a.value[index]

    def bw(g: Array) -> None:
        ga = np.zeros_like(a.value)
        ga[index] = g
        _accum(a, ga)

    return _make(out, (a,), bw)


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]

    def bw(g: Array) -> None:
        offset = 0
        for p, size in zip(parts, sizes):
            if p.needs_grad:
                index = (slice(None),) * (axis % g.ndim) + (slice(offset, offset + size),)
                _accum(p, g[index])
            offset += size

    return _make(out, parts, bw)


def stack(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = [_wrap(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)

    def bw(g: Array) -> None:
        pieces = np.moveaxis(g, axis, 0)
        for p, piece in zip(parts, pieces):
            if p.needs_grad:
                _accum(p, piece)

    return _make(out, parts, bw)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = _wrap(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        if axis is None:
            ga = np.full_like(a.value, 1.0 / a.value.size) * g
        else:
            count = a.value.shape[axis]
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.broadcast_to(g / count, a.value.shape)
        _accum(a, ga)

    return _make(out, (a,), bw)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = _wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.value.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.value.shape))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# log-space reductions


def _shifted_exp(x: Array, m: Array) -> Array:
    """exp(x - m) with -inf entries mapped to exactly 0, never NaN."""
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(x - safe_m)
    return np.where(np.isneginf(x), 0.0, e)


def _safe_log(s: Array) -> Array:
    with np.errstate(divide="ignore"):
        return np.log(s)


def logsumexp(a, axis, keepdims: bool = False) -> Node:
    """Stable log-sum-exp along one or more axes; -inf slices stay -inf."""
    a = _wrap(a)
    axes = axis if isinstance(axis, tuple) else (axis,)
    m = a.value.max(axis=axes, keepdims=True)
    e = _shifted_exp(a.value, m)
    s = e.sum(axis=axes, keepdims=True)
    out = np.where(s > 0, np.where(np.isfinite(m), m, 0.0) + _safe_log(s), NEG_INF)
    if not keepdims:
        out = np.squeeze(out, axis=axes)

    def bw(g: Array) -> None:
        with np.errstate(invalid="ignore"):
            w = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
        gg = g if keepdims else g.reshape(s.shape)
        _accum(a, gg * w)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Node:
    """log softmax along `axis`; input must be finite."""
    a = _wrap(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g: Array) -> None:
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def gather_rows(table, ids: Array) -> Node:
    """table[(V, d)] indexed by integer ids of any shape -> ids.shape + (d,)."""
    table = _wrap(table)
    ids = np.asarray(ids)
    out = table.value[ids]

    def bw(g: Array) -> None:
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(out, (table,), bw)


def gather_terminals(term, ids: Array) -> Node:
    """Select per-token terminal scores.

    term: (B, P, V) log-probabilities, ids: (B, n) token indices.
    Returns (B, n, P): out[b, i, p] = term[b, p, ids[b, i]].
    """
    term = _wrap(term)
    ids = np.asarray(ids)
    batch = np.arange(ids.shape[0])[:, None]
    out = term.value[batch, :, ids]

    def bw(g: Array) -> None:
        gt = np.zeros_like(term.value)
        np.add.at(gt, (batch, slice(None), ids), g)
        _accum(term, gt)

    return _make(out, (term,), bw)


def span_combine(left, right, rules) -> Node:
    """Fused chart step: out[b,l,a] = logsumexp_{c1,c2} left[b,l,c1] + right[b,l,c2] + rules[b,a,c1,c2].

    All three inputs may contain -inf. The reduction is factored through
    shifted exponentials and matrix products so a chart row costs two
    GEMMs instead of materializing the (B, L, A, C1, C2) tensor.
    """
    left, right, rules = _wrap(left), _wrap(right), _wrap(rules)
    bsz, length, n_c1 = left.value.shape
    n_a, n_c2 = rules.value.shape[1], rules.value.shape[3]

    ml = left.value.max(axis=2, keepdims=True)               # (B, L, 1)
    mr = right.value.max(axis=2, keepdims=True)              # (B, L, 1)
    mg = rules.value.max(axis=(2, 3))                        # (B, A)
    el = _shifted_exp(left.value, ml)                        # (B, L, C1)
    er = _shifted_exp(right.value, mr)                       # (B, L, C2)
    eg = _shifted_exp(rules.value, mg[:, :, None, None])     # (B, A, C1, C2)

    # sum_{c1,c2} el * er * eg, contracted as (el @ eg) . er
    eg_mat = eg.transpose(0, 2, 1, 3).reshape(bsz, n_c1, n_a * n_c2)
    t1 = (el @ eg_mat).reshape(bsz, length, n_a, n_c2)       # (B, L, A, C2)
    es = np.einsum("blac,blc->bla", t1, er)                  # (B, L, A)

    with np.errstate(invalid="ignore"):
        out = ml + mr + mg[:, None, :] + np.where(es > 0, _safe_log(es), NEG_INF)
    out = np.where(es > 0, out, NEG_INF)

    def bw(g: Array) -> None:
        with np.errstate(invalid="ignore"):
            gw = np.where(es > 0, g / np.where(es > 0, es, 1.0), 0.0)  # (B, L, A)
        if rules.needs_grad:
            u = el[:, :, :, None] * er[:, :, None, :]                  # (B, L, C1, C2)
            gr = np.swapaxes(gw, 1, 2) @ u.reshape(bsz, length, n_c1 * n_c2)
            _accum(rules, eg * gr.reshape(bsz, n_a, n_c1, n_c2))
        if left.needs_grad or right.needs_grad:
            w = (gw @ eg.reshape(bsz, n_a, n_c1 * n_c2)).reshape(bsz, length, n_c1, n_c2)
            if left.needs_grad:
                _accum(left, el * np.einsum("blxc,blc->blx", w, er))
            if right.needs_grad:
                _accum(right, er * np.einsum("blxc,blx->blc", w, el))

    return _make(out, (left, right, rules), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar `root` into every reachable leaf.

    Visits each node exactly once in reverse topological order. Gradients
    on `Parameter` leaves add to their persistent buffers; call
    `ParamStore.zero_grad` between losses.
    """
    if root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar, got shape {root.value.shape}")
    order: list[Node] = []
    visited = {id(root)}
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack[-1]
        if i < len(node.parents):
            stack[-1] = (node, i + 1)
            parent = node.parents[i]
            if parent.needs_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
            stack.pop()
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float, dtype=np.float32) -> Array:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate). Multiply in as a constant."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.dtype(dtype).type(1.0 - rate)


# ---------------------------------------------------------------------------
# parameter store


_INITS = ("xavier", "normal", "zeros")


class ParamStore:
    """Named trainable parameters plus the rng used to initialize them."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def param(self, name: str, shape: tuple[int, ...], init: str = "xavier") -> Parameter:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        if init not in _INITS:
            raise ValueError(f"unknown init {init!r}")
        if init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "normal":
            value = self.rng.standard_normal(shape).astype(self.dtype)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
            fan_out = shape[-1]
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            value = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def state_arrays(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, Array]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in arrays.items():
            p = self._params[name]
            if value.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {p.value.shape}")
            p.value = np.asarray(value, dtype=self.dtype)

    def check_finite(self) -> None:
        for name, p in self._params.items():
            if not np.all(np.isfinite(p.value)):
                raise FloatingPointError(f"parameter {name!r} contains non-finite values")


def finite_diff_check(
    loss_fn: Callable[[ParamStore], Node],
    store: ParamStore,
    eps: float = 1e-4,
) -> float:
    """Compare analytic gradients with central differences.

    Returns the maximum relative error over every scalar parameter entry,
    with the denominator floored at 1 so that vanishing gradients are
    compared absolutely (pure relative error on a near-zero gradient
    measures floating-point roundoff of the differences, not correctness).
    `loss_fn` must be deterministic; it is evaluated twice up front and a
    mismatch raises NonDeterministicLoss. Intended for float64 stores.
    """
    v1 = float(loss_fn(store).value)
    v2 = float(loss_fn(store).value)
    if v1 != v2:
        raise NonDeterministicLoss(f"loss closure returned {v1!r} then {v2!r}")

    store.zero_grad()
    backward(loss_fn(store))
    analytic = {name: store[name].grad.copy() for name in store.names()}

    worst = 0.0
    for name in store.names():
        p = store[name]
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(store).value)
            flat[i] = orig - eps
            down = float(loss_fn(store).value)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            an = float(analytic[name].reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1.0)
            worst = max(worst, abs(fd - an) / denom)
    return worst
