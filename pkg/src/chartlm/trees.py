"""Constituency-tree containers and bracketed s-expression I/O.

Induced trees are proper binary trees over token positions; gold trees read
from disk may be n-ary and labeled. Serialized form: "(X (X w1 w2) (X w3))",
with a bare "(w1)" for single-token sentences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Span = tuple[int, int]


@dataclass
class Node:
    """Tree node; a leaf has a token and no children."""

    label: str = "X"
    children: list["Node"] = field(default_factory=list)
    token: str | None = None
    span: Span = (0, 0)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def leaf(token: str, position: int) -> Node:
    return Node(label="X", token=token, span=(position, position))


def branch(children: list[Node], label: str = "X") -> Node:
    return Node(label=label, children=children,
                span=(children[0].span[0], children[-1].span[1]))


def assign_spans(root: Node, start: int = 1) -> int:
    """Fill 1-based token spans; returns the next free position."""
    pos = start
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if node.is_leaf:
            node.span = (pos, pos)
            pos += 1
        elif expanded:
            node.span = (node.children[0].span[0], node.children[-1].span[1])
        else:
            stack.append((node, True))
            stack.extend((c, False) for c in reversed(node.children))
    return pos


def leaves(root: Node) -> list[Node]:
    if root.is_leaf:
        return [root]
    out: list[Node] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            out.append(node)
        else:
            stack.extend(reversed(node.children))
    return out


def in_order(root: Node) -> list[Node]:
    """Left subtree, node, right subtree; binary trees only."""
    out: list[Node] = []

    def walk(node: Node) -> None:
        if node.is_leaf:
            out.append(node)
            return
        if len(node.children) != 2:
            raise ValueError(f"in_order needs a binary tree, node has {len(node.children)} children")
        walk(node.children[0])
        out.append(node)
        walk(node.children[1])

    walk(root)
    return out


def node_count(root: Node) -> int:
    count = 0
    stack = [root]
    while stack:
        node = stack.pop()
        count += 1
        stack.extend(node.children)
    return count


# ---------------------------------------------------------------------------
# s-expression round trip
# ---------------------------------------------------------------------------

def format_sexpr(root: Node) -> str:
    if root.is_leaf:
        return f"({root.token})"
    # explicit stack: left-branching trees from long sentences are deep
    parts: list[str] = []
    stack: list[Node | str] = [root]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            parts.append(item)
        elif item.is_leaf:
            parts.append(item.token or "")
        else:
            parts.append(f"({item.label}")
            stack.append(")")
            for child in reversed(item.children):
                stack.append(child)
                stack.append(" ")
    return "".join(parts)


def _tokenize_sexpr(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_sexpr(text: str) -> Node:
    """Parse one bracketed tree; labels are the first atom after '('.

    A childless "(w1)" collapses to a leaf; unary nodes like "(NP he)"
    survive. Iterative, so nesting depth is unbounded.
    """
    toks = _tokenize_sexpr(text)
    if not toks:
        raise ValueError("empty tree string")
    stack: list[Node] = []
    root: Node | None = None
    i = 0
    while i < len(toks):
        tok = toks[i]
        if root is not None:
            raise ValueError("trailing content after tree")
        if tok == "(":
            if i + 1 >= len(toks):
                raise ValueError("unbalanced tree string")
            head = toks[i + 1]
            if head in ("(", ")"):
                raise ValueError("empty node")
            stack.append(Node(label=head))
            i += 2
        elif tok == ")":
            if not stack:
                raise ValueError("unbalanced tree string")
            node = stack.pop()
            if not node.children:
                node = Node(token=node.label)
            if stack:
                stack[-1].children.append(node)
            else:
                root = node
            i += 1
        else:
            if stack:
                stack[-1].children.append(Node(token=tok))
            else:
                root = Node(token=tok)
            i += 1
    if root is None or stack:
        raise ValueError("unbalanced tree string")
    assign_spans(root)
    return root


def read_tree_file(path: str) -> list[Node]:
    with open(path, encoding="utf-8") as fh:
        return [parse_sexpr(line) for line in fh if line.strip()]


def write_tree_file(path: str, roots: list[Node]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for root in roots:
            fh.write(format_sexpr(root) + "\n")


# ---------------------------------------------------------------------------
# baseline tree shapes
# ---------------------------------------------------------------------------

def left_branching(tokens: list[str]) -> Node:
    node = leaf(tokens[0], 1)
    for pos, tok in enumerate(tokens[1:], start=2):
        node = branch([node, leaf(tok, pos)])
    return node


def right_branching(tokens: list[str]) -> Node:
    node = leaf(tokens[-1], len(tokens))
    for pos in range(len(tokens) - 1, 0, -1):
        node = branch([leaf(tokens[pos - 1], pos), node])
    return node


def random_binary(tokens: list[str], rng: np.random.Generator) -> Node:
    """Uniformly random split at every level."""

    def build(lo: int, hi: int) -> Node:
        if lo == hi:
            return leaf(tokens[lo - 1], lo)
        k = lo + int(rng.integers(0, hi - lo))  # split in [lo, hi)
        return branch([build(lo, k), build(k + 1, hi)])

    return build(1, len(tokens))
