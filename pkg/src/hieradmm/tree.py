"""Rooted aggregation trees with tuple node addresses.

Nodes are plain tuples of positive integers. The root is the empty tuple
``()``; its children are ``(1, 1), (1, 2), ...`` and a node ``(1, j, k)`` is
the ``k``-th child of ``(1, j)``. The leading ``1`` is the root's own index,
so a non-root node at depth ``d`` has a path of length ``d + 1``.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

NodeId = tuple[int, ...]

ROOT: NodeId = ()


class TreeError(ValueError):
    """Raised for malformed trees or queries on unknown nodes."""


def node_label(node: NodeId) -> str:
    """Human-readable form: ``"root"`` or dotted path such as ``"1.2.1"``."""
    return "root" if not node else ".".join(str(d) for d in node)


def parse_label(label: str) -> NodeId:
    if label in ("root", "", "∅"):
        return ROOT
    try:
        return tuple(int(p) for p in label.split("."))
    except ValueError:
        raise TreeError(f"bad node label {label!r}") from None


def parent_of(node: NodeId) -> NodeId | None:
    if not node:
        return None
    if len(node) <= 2:
        return ROOT
    return node[:-1]


def _check_path(node: NodeId) -> None:
    if not node:
        return
    if len(node) < 2 or node[0] != 1:
        raise TreeError(f"node {node!r}: non-root paths start with 1 and have length >= 2")
    if any((not isinstance(d, int)) or d < 1 for d in node):
        raise TreeError(f"node {node!r}: path entries must be positive integers")


class Tree:
    """Immutable rooted tree.

    Parameters
    ----------
    nodes : iterable of NodeId
        Every node of the tree, root included. Parents are implied by the
        paths, so the set must be prefix-closed.
    """

    def __init__(self, nodes: Iterable[Sequence[int]]):
        node_set = {tuple(int(d) for d in n) for n in nodes}
        if ROOT not in node_set:
            raise TreeError("tree has no root")
        children: dict[NodeId, list[NodeId]] = {n: [] for n in node_set}
        for n in node_set:
            _check_path(n)
            if n == ROOT:
                continue
            p = parent_of(n)
            if p not in node_set:
                raise TreeError(f"node {node_label(n)} has no parent {node_label(p)} in tree")
            children[p].append(n)
        for lst in children.values():
            lst.sort()
        self._nodes = frozenset(node_set)
        self._children = {k: tuple(v) for k, v in children.items()}
        self._leaves = tuple(sorted(n for n in node_set if not children[n]))
        self._branches = tuple(sorted(n for n in node_set if children[n]))
        self._leaf_desc: dict[NodeId, tuple[NodeId, ...]] = {}
        for b in self._branches:
            self._leaf_desc[b] = tuple(leaf for leaf in self._leaves if _extends(leaf, b))

    @classmethod
    def from_children(cls, counts: dict[NodeId, int]) -> "Tree":
        """Build a tree from ``{node: number_of_children}``; absent nodes get none."""
        nodes = {ROOT}
        stack = [ROOT]
        while stack:
            n = stack.pop()
            for j in range(1, counts.get(n, 0) + 1):
                c = (1, j) if n == ROOT else n + (j,)
                nodes.add(c)
                stack.append(c)
        return cls(nodes)

    @property
    def nodes(self) -> frozenset[NodeId]:
        return self._nodes

    def __contains__(self, node) -> bool:
        return tuple(node) in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tree) and self._nodes == other._nodes

    def __hash__(self) -> int:
        return hash(self._nodes)

    def __repr__(self) -> str:
        return f"Tree({len(self._nodes)} nodes, {len(self._leaves)} leaves, depth {self.depth})"

    def _require(self, node) -> NodeId:
        node = tuple(node)
        if node not in self._nodes:
            raise TreeError(f"node not in tree: {node_label(node)}")
        return node

    @property
    def depth(self) -> int:
        return max(level_of(n) for n in self._nodes)

    def children(self, node: NodeId) -> tuple[NodeId, ...]:
        return self._children[self._require(node)]

    def parent(self, node: NodeId) -> NodeId | None:
        return parent_of(self._require(node))

    def descendants(self, node: NodeId) -> set[NodeId]:
        """All nodes strictly below ``node``."""
        node = self._require(node)
        return {n for n in self._nodes if n != node and _extends(n, node)}

    def ancestors(self, node: NodeId) -> list[NodeId]:
        """Proper ancestors, root first."""
        node = self._require(node)
        out = []
        p = parent_of(node)
        while p is not None:
            out.append(p)
            p = parent_of(p)
        return out[::-1]

    def leaves(self) -> set[NodeId]:
        return set(self._leaves)

    def branching_nodes(self) -> set[NodeId]:
        return set(self._branches)

    @property
    def leaf_order(self) -> tuple[NodeId, ...]:
        """Leaves sorted lexicographically; the canonical stacking order."""
        return self._leaves

    @property
    def branch_order(self) -> tuple[NodeId, ...]:
        return self._branches

    def leaf_descendants(self, branch: NodeId) -> list[NodeId]:
        branch = self._require(branch)
        if branch not in self._leaf_desc:
            raise TreeError(f"{node_label(branch)} is a leaf, not a branching node")
        return list(self._leaf_desc[branch])

    def nodes_at_level(self, level: int) -> set[NodeId]:
        if level < 0:
            raise TreeError("level must be >= 0")
        return {n for n in self._nodes if level_of(n) == level}

    def is_leaf(self, node: NodeId) -> bool:
        return not self._children[self._require(node)]


def level_of(node: NodeId) -> int:
    return 0 if not node else len(node) - 1


def _extends(node: NodeId, prefix: NodeId) -> bool:
    if not prefix:
        return bool(node)
    return len(node) > len(prefix) and node[: len(prefix)] == prefix
