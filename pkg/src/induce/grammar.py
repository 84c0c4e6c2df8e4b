"""CNF grammar machinery.

Rule probabilities for the neural grammar come from three softmax heads:
root over nonterminals from an MLP on the root embedding, binary over
child pairs from a single linear layer on the parent embedding, and
terminal over the vocabulary from an MLP on the preterminal embedding.
With a latent z, z is concatenated onto each input embedding first.

Symbols are indexed 0..N-1 for nonterminals and N..N+P-1 for
preterminals; child axes of the binary table range over all N+P symbols.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Node, ParamStore
from .errors import CheckpointError, GrammarError

ROOT_SYMBOL = "S"


@dataclass(frozen=True)
class SymbolInventory:
    n_nonterminals: int
    n_preterminals: int
    vocab_size: int
    dim: int = 256
    z_dim: int = 64

    def __post_init__(self):
        for name in ("n_nonterminals", "n_preterminals", "vocab_size", "dim", "z_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_symbols(self) -> int:
        return self.n_nonterminals + self.n_preterminals


@dataclass
class RuleTables:
    """Log-probability tables. Nodes with a leading batch axis in the
    neural path; plain unbatched arrays for explicit grammars."""

    root: Node | np.ndarray      # (B, N) or (N,)
    binary: Node | np.ndarray    # (B, N, M, M) or (N, M, M)
    terminal: Node | np.ndarray  # (B, P, V) or (P, V)

    @property
    def batched(self) -> bool:
        return isinstance(self.root, Node)

    def values(self, b: int = 0) -> "RuleTables":
        """Unbatched numpy view of one batch row."""
        if not self.batched:
            return self
        return RuleTables(self.root.value[b], self.binary.value[b], self.terminal.value[b])


def init_grammar_params(store: ParamStore, inv: SymbolInventory, latent: bool) -> None:
    d = inv.dim
    in_dim = d + (inv.z_dim if latent else 0)
    m = inv.n_symbols
    store.param("root_emb", (1, d))
    store.param("nt_emb", (inv.n_nonterminals, d))
    store.param("pt_emb", (inv.n_preterminals, d))
    for prefix, out in (("root", inv.n_nonterminals), ("term", inv.vocab_size)):
        store.param(f"{prefix}.l1.w", (in_dim, d))
        store.param(f"{prefix}.l1.b", (d,), init="zeros")
        store.param(f"{prefix}.l2.w", (d, d))
        store.param(f"{prefix}.l2.b", (d,), init="zeros")
        store.param(f"{prefix}.out.w", (d, out))
        store.param(f"{prefix}.out.b", (out,), init="zeros")
    store.param("bin.w", (in_dim, m * m))
    store.param("bin.b", (m * m,), init="zeros")


def _mlp_head(store: ParamStore, prefix: str, x: Node) -> Node:
    h = ag.relu(ag.affine(x, store[f"{prefix}.l1.w"], store[f"{prefix}.l1.b"]))
    h = ag.relu(ag.affine(h, store[f"{prefix}.l2.w"], store[f"{prefix}.l2.b"]))
    return ag.affine(h, store[f"{prefix}.out.w"], store[f"{prefix}.out.b"])


def rule_tables(store: ParamStore, inv: SymbolInventory, z: Node | None, batch_size: int | None = None) -> RuleTables:
    """Normalized rule tables, differentiable in params and z.

    With z: inputs are [embedding; z] per sentence, giving per-sentence
    tables (batch = z rows). Without z: a single shared table, broadcast
    to batch_size if given.
    """
    n, p, m, v = inv.n_nonterminals, inv.n_preterminals, inv.n_symbols, inv.vocab_size
    d = inv.dim
    if z is not None:
        if z.value.shape[1] != inv.z_dim:
            raise ValueError(f"z dim {z.value.shape[1]} != {inv.z_dim}")
        bsz = z.value.shape[0]
    else:
        bsz = 1

    root_in = ag.broadcast_to(store["root_emb"], (bsz, d))
    nt_in = ag.broadcast_to(ag.reshape(store["nt_emb"], (1, n, d)), (bsz, n, d))
    pt_in = ag.broadcast_to(ag.reshape(store["pt_emb"], (1, p, d)), (bsz, p, d))
    if z is not None:
        root_in = ag.concat([root_in, z], axis=-1)
        z_nt = ag.broadcast_to(ag.reshape(z, (bsz, 1, inv.z_dim)), (bsz, n, inv.z_dim))
        z_pt = ag.broadcast_to(ag.reshape(z, (bsz, 1, inv.z_dim)), (bsz, p, inv.z_dim))
        nt_in = ag.concat([nt_in, z_nt], axis=-1)
        pt_in = ag.concat([pt_in, z_pt], axis=-1)

    root = ag.log_softmax(_mlp_head(store, "root", root_in), axis=-1)          # (B, N)
    bin_logits = ag.affine(nt_in, store["bin.w"], store["bin.b"])              # (B, N, M*M)
    binary = ag.reshape(ag.log_softmax(bin_logits, axis=-1), (bsz, n, m, m))
    terminal = ag.log_softmax(_mlp_head(store, "term", pt_in), axis=-1)        # (B, P, V)

    if z is None and batch_size is not None and batch_size != 1:
        root = ag.broadcast_to(root, (batch_size, n))
        binary = ag.broadcast_to(binary, (batch_size, n, m, m))
        terminal = ag.broadcast_to(terminal, (batch_size, p, v))
    return RuleTables(root, binary, terminal)


# ---------------------------------------------------------------------------
# explicit grammars


@dataclass
class ExplicitGrammar:
    """A concrete PCFG with named symbols and plain log-prob tables."""

    nonterminals: list[str]
    preterminals: list[str]
    words: list[str]
    tables: RuleTables  # unbatched float64 arrays

    @property
    def inventory(self) -> SymbolInventory:
        return SymbolInventory(
            len(self.nonterminals), len(self.preterminals), len(self.words), dim=1, z_dim=1
        )

    def word_ids(self, tokens: list[str]) -> np.ndarray:
        try:
            return np.array([self.words.index(t) for t in tokens], dtype=np.int64)
        except ValueError as e:
            raise GrammarError(f"token not in grammar vocabulary: {e}")


Rule = tuple[str, tuple[str, ...], float]


def parse_grammar_file(text: str) -> list[Rule]:
    """One rule per line: 'S -> A 1.0', 'A -> B C 0.5', 'T -> w 0.25'."""
    rules: list[Rule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 4 or parts[1] != "->":
            raise GrammarError(f"line {lineno}: expected 'LHS -> RHS... PROB', got {raw!r}")
        try:
            prob = float(parts[-1])
        except ValueError:
            raise GrammarError(f"line {lineno}: bad probability {parts[-1]!r}")
        lhs, rhs = parts[0], tuple(parts[2:-1])
        if len(rhs) not in (1, 2):
            raise GrammarError(f"line {lineno}: rule must have 1 or 2 right-hand symbols")
        if prob < 0:
            raise GrammarError(f"line {lineno}: negative probability")
        rules.append((lhs, rhs, prob))
    return rules


def format_grammar(rules: list[Rule]) -> str:
    return "\n".join(f"{lhs} -> {' '.join(rhs)} {prob}" for lhs, rhs, prob in rules) + "\n"


def explicit_grammar(rules: list[Rule]) -> ExplicitGrammar:
    """Build log-prob tables from explicit rules; absent rules get -inf.

    Every rule family (the root, each nonterminal, each preterminal)
    must sum to 1 within 1e-9.
    """
    root_rules: list[tuple[str, float]] = []
    binary_rules: dict[str, list[tuple[str, str, float]]] = {}
    lexical_rules: dict[str, list[tuple[str, float]]] = {}
    order: dict[str, None] = {}
    for lhs, rhs, prob in rules:
        if lhs == ROOT_SYMBOL:
            if len(rhs) != 1:
                raise GrammarError(f"root rule must have one right-hand symbol: {lhs} -> {rhs}")
            root_rules.append((rhs[0], prob))
        elif len(rhs) == 2:
            binary_rules.setdefault(lhs, []).append((rhs[0], rhs[1], prob))
            order.setdefault(lhs)
        else:
            lexical_rules.setdefault(lhs, []).append((rhs[0], prob))
            order.setdefault(lhs)

    both = set(binary_rules) & set(lexical_rules)
    if both:
        raise GrammarError(f"symbols with both binary and lexical rules (not CNF): {sorted(both)}")
    if ROOT_SYMBOL in order:
        raise GrammarError(f"{ROOT_SYMBOL!r} is reserved for the root")
    if not root_rules:
        raise GrammarError("no root rules")

    nonterminals = [s for s in order if s in binary_rules]
    preterminals = [s for s in order if s in lexical_rules]
    words_seen: dict[str, None] = {}
    for rs in lexical_rules.values():
        for w, _ in rs:
            words_seen.setdefault(w)
    words = list(words_seen)

    nt_index = {s: i for i, s in enumerate(nonterminals)}
    sym_index = dict(nt_index)
    for j, s in enumerate(preterminals):
        sym_index[s] = len(nonterminals) + j
    word_index = {w: i for i, w in enumerate(words)}

    n, p, m, v = len(nonterminals), len(preterminals), len(nonterminals) + len(preterminals), len(words)
    if n == 0 or p == 0:
        raise GrammarError("grammar needs at least one nonterminal and one preterminal")

    root = np.full(n, -np.inf)
    for sym, prob in root_rules:
        if sym not in nt_index:
            raise GrammarError(f"root rule points at non-nonterminal {sym!r}")
        if np.isfinite(root[nt_index[sym]]):
            raise GrammarError(f"duplicate root rule for {sym!r}")
        root[nt_index[sym]] = _log(prob)

    binary = np.full((n, m, m), -np.inf)
    for lhs, rs in binary_rules.items():
        for b, c, prob in rs:
            if b not in sym_index or c not in sym_index:
                raise GrammarError(f"unknown child symbol in {lhs} -> {b} {c}")
            cell = (nt_index[lhs], sym_index[b], sym_index[c])
            if np.isfinite(binary[cell]):
                raise GrammarError(f"duplicate rule {lhs} -> {b} {c}")
            binary[cell] = _log(prob)

    terminal = np.full((p, v), -np.inf)
    for lhs, rs in lexical_rules.items():
        for w, prob in rs:
            cell = (sym_index[lhs] - n, word_index[w])
            if np.isfinite(terminal[cell]):
                raise GrammarError(f"duplicate rule {lhs} -> {w}")
            terminal[cell] = _log(prob)

    _check_family("root", root.reshape(1, -1), [ROOT_SYMBOL])
    _check_family("binary", binary.reshape(n, -1), nonterminals)
    _check_family("terminal", terminal, preterminals)
    return ExplicitGrammar(nonterminals, preterminals, words, RuleTables(root, binary, terminal))


def _log(prob: float) -> float:
    return float(np.log(prob)) if prob > 0 else -np.inf


def _check_family(kind: str, table: np.ndarray, names: list[str]) -> None:
    with np.errstate(over="ignore"):
        totals = np.exp(table).sum(axis=1)
    for name, total in zip(names, totals):
        if abs(total - 1.0) > 1e-9:
            raise GrammarError(f"{kind} family {name!r} sums to {total}, not 1")


# ---------------------------------------------------------------------------
# checkpoint io (format CKP1)

CKP_MAGIC = b"CKP1"
CKP_VERSION = 1
_CKP_HEADER = struct.Struct("<4sIIIIII")
_U32 = struct.Struct("<I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    inventory: SymbolInventory
    config_hash: str
    meta: dict[str, str]


def write_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    inventory: SymbolInventory,
    config_hash: str,
    meta: dict[str, str] | None = None,
) -> None:
    """Atomic write: temp file in place, then rename. Values stored as f32."""
    meta = meta or {}
    path = Path(path)
    buf = bytearray()
    buf += _CKP_HEADER.pack(
        CKP_MAGIC,
        CKP_VERSION,
        inventory.n_nonterminals,
        inventory.n_preterminals,
        inventory.vocab_size,
        inventory.dim,
        inventory.z_dim,
    )
    _put_str(buf, config_hash)
    buf += _U32.pack(len(meta))
    for key, value in meta.items():
        _put_str(buf, key)
        _put_str(buf, value)
    buf += _U32.pack(len(arrays))
    for name, arr in arrays.items():
        _put_str(buf, name)
        data = np.ascontiguousarray(arr, dtype="<f4")
        buf += bytes([0])
        buf += _U32.pack(data.ndim)
        for dim in data.shape:
            buf += _U32.pack(dim)
        buf += data.tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    magic, version, n, p, v, d, z_dim = reader.take(_CKP_HEADER)
    if magic != CKP_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKP_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    config_hash = reader.take_str()
    meta = {}
    (n_meta,) = reader.take(_U32)
    for _ in range(n_meta):
        key = reader.take_str()
        meta[key] = reader.take_str()
    arrays: dict[str, np.ndarray] = {}
    (n_arrays,) = reader.take(_U32)
    for _ in range(n_arrays):
        name = reader.take_str()
        code = reader.take_bytes(1)[0]
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for array {name!r}")
        (ndim,) = reader.take(_U32)
        shape = tuple(reader.take(_U32)[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        dtype = _DTYPES[code]
        raw = reader.take_bytes(count * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(blob):
        raise CheckpointError(f"{len(blob) - reader.pos} trailing bytes")
    return Checkpoint(arrays, SymbolInventory(n, p, v, d, z_dim), config_hash, meta)


def _put_str(buf: bytearray, s: str) -> None:
    data = s.encode("utf-8")
    buf += _U32.pack(len(data))
    buf += data


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def take(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take_bytes(fmt.size))

    def take_str(self) -> str:
        (n,) = self.take(_U32)
        return self.take_bytes(n).decode("utf-8")
