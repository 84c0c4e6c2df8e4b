"""Constituency trees: s-expression parsing, binarization, span extraction.

Trees are n-ary; binary trees are the special case where every internal
node has two children. Leaves carry a token position and optionally the
token string. Spans are half-open (start, end) over token positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MalformedTree


@dataclass
class Tree:
    label: str | None
    children: list["Tree"] = field(default_factory=list)
    token: str | None = None
    start: int = 0
    end: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> list["Tree"]:
        if self.is_leaf:
            return [self]
        out: list[Tree] = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def tokens(self) -> list[str]:
        return [l.token for l in self.leaves()]


def leaf(token: str | None, position: int) -> Tree:
    return Tree(None, [], token, position, position + 1)


def node(label: str, children: list[Tree]) -> Tree:
    if not children:
        raise MalformedTree("internal node with no children")
    return Tree(label, children, None, children[0].start, children[-1].end)


def parse_tree_line(line: str) -> Tree:
    """Parse one bracketed tree: labeled nodes, bare-token leaves."""
    tokens = line.replace("(", " ( ").replace(")", " ) ").split()
    if not tokens:
        raise MalformedTree("empty line")
    if tokens[0] != "(":
        raise MalformedTree(f"expected '(' at start of {line!r}")
    tree, pos = _parse(tokens, 0, _Counter())
    if pos != len(tokens):
        raise MalformedTree(f"trailing content after tree in {line!r}")
    return tree


class _Counter:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0


def _parse(tokens: list[str], pos: int, counter: _Counter) -> tuple[Tree, int]:
    if tokens[pos] == ")":
        raise MalformedTree("unexpected ')'")
    if tokens[pos] != "(":
        t = leaf(tokens[pos], counter.n)
        counter.n += 1
        return t, pos + 1
    if pos + 1 >= len(tokens) or tokens[pos + 1] in ("(", ")"):
        raise MalformedTree("constituent without a label")
    label = tokens[pos + 1]
    children: list[Tree] = []
    pos += 2
    while pos < len(tokens) and tokens[pos] != ")":
        child, pos = _parse(tokens, pos, counter)
        children.append(child)
    if pos >= len(tokens):
        raise MalformedTree("unbalanced parentheses")
    if not children:
        raise MalformedTree("empty constituent")
    return node(label, children), pos + 1


def linearize(tree: Tree, tokens: list[str] | None = None) -> str:
    """Inverse of parse_tree_line; unlabeled nodes print as 'T'."""
    if tree.is_leaf:
        return tokens[tree.start] if tokens is not None else str(tree.token)
    inner = " ".join(linearize(c, tokens) for c in tree.children)
    return f"({tree.label or 'T'} {inner})"


def binarize(tree: Tree) -> Tree:
    """Right-binarize: children c1..ck become (c1 (c2 (... ck))).

    Unary chains collapse onto the child, so the result is strictly
    binary over the same leaves.
    """
    if tree.is_leaf:
        return tree
    kids = [binarize(c) for c in tree.children]
    if len(kids) == 1:
        return kids[0]
    right = kids[-1]
    for left_child in reversed(kids[:-1]):
        right = node(tree.label or "T", [left_child, right])
    return right


def tree_spans(tree: Tree, exclude_trivial: bool = False) -> set[tuple[int, int]]:
    """Spans of internal nodes; leaves never count.

    With exclude_trivial, the whole-sentence span and all width-1 spans
    (unary wrappers) are removed.
    """
    spans: set[tuple[int, int]] = set()
    stack = [tree]
    while stack:
        t = stack.pop()
        if t.is_leaf:
            continue
        spans.add((t.start, t.end))
        stack.extend(t.children)
    if exclude_trivial:
        spans = {(i, j) for i, j in spans if j - i >= 2 and (i, j) != (tree.start, tree.end)}
    return spans


def internal_nodes(tree: Tree) -> list[Tree]:
    out = []
    stack = [tree]
    while stack:
        t = stack.pop()
        if not t.is_leaf:
            out.append(t)
            stack.extend(t.children)
    return out


def check_binary(tree: Tree) -> None:
    """Assert the BinaryTree shape invariants (n-1 internal nodes, proper nesting)."""
    n = tree.end - tree.start
    count = 0
    stack = [tree]
    while stack:
        t = stack.pop()
        if t.is_leaf:
            continue
        count += 1
        if len(t.children) != 2:
            raise ValueError(f"non-binary node with {len(t.children)} children at ({t.start},{t.end})")
        l, r = t.children
        if not (l.start == t.start and l.end == r.start and r.end == t.end):
            raise ValueError(f"children do not partition ({t.start},{t.end})")
        stack.extend(t.children)
    if count != n - 1:
        raise ValueError(f"{count} internal nodes for {n} leaves")


@dataclass(frozen=True)
class GoldTree:
    """Reference parse reduced to what evaluation needs.

    `spans` come from the right-binarized tree (internal nodes of width
    >= 2, whole-sentence span included).
    """

    spans: frozenset[tuple[int, int]]
    leaf_count: int

    @classmethod
    def from_tree(cls, tree: Tree) -> "GoldTree":
        binary = binarize(tree)
        spans = {(i, j) for i, j in tree_spans(binary) if j - i >= 2}
        return cls(frozenset(spans), len(tree.leaves()))

    @classmethod
    def from_line(cls, line: str) -> "GoldTree":
        return cls.from_tree(parse_tree_line(line))

    def nontrivial_spans(self) -> frozenset[tuple[int, int]]:
        return frozenset(s for s in self.spans if s != (0, self.leaf_count))
