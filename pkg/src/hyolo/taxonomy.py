"""Class hierarchy: parsing, validation, padding and level-indexed queries.

A taxonomy file looks like::

    depth=3 pad=false
    # comment
    ROOT > food
    food > dairy
    dairy > milk

``ROOT`` is reserved.  Node names are case-sensitive and unique across the
whole tree.  Within a level, class indices follow the order in which nodes
first appear in the file (synthetic padding nodes come last).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DuplicateNode,
    IndexOutOfRange,
    LevelOutOfRange,
    MalformedTaxonomy,
    MultipleRoots,
    NotALeaf,
    RaggedDepthWithoutPadding,
    RootHasNoAncestorSet,
    SelfParent,
    UnknownNode,
)

ROOT = "ROOT"
PAD_SEP = "~"

Edge = tuple[str, str]


@dataclass(frozen=True, eq=False)
class Taxonomy:
    """Immutable uniform-depth tree with per-level class indexing.

    Levels are numbered from 0 (children of the root) to ``depth - 1`` (leaves).
    Build instances with :func:`parse_taxonomy` or :func:`build_taxonomy`.
    """

    depth: int
    parent: dict[str, str]
    levels: tuple[tuple[str, ...], ...]
    level_index: tuple[dict[str, int], ...] = field(repr=False)
    child_mask: tuple[np.ndarray | None, ...] = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return (self.depth, self.levels, self.parent) == (other.depth, other.levels, other.parent)

    __hash__ = None

    # -- basic lookups -------------------------------------------------
    @property
    def level_sizes(self) -> list[int]:
        return [len(names) for names in self.levels]

    @property
    def nodes(self) -> list[str]:
        return [name for names in self.levels for name in names]

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.levels[-1]

    def __contains__(self, name: str) -> bool:
        return name in self.parent

    def __len__(self) -> int:
        return len(self.parent)

    def level_of(self, node: str) -> int:
        self._check_node(node)
        level = 0
        while self.parent[node] != ROOT:
            node = self.parent[node]
            level += 1
        return level

    def index_of(self, node: str) -> int:
        return self.level_index[self.level_of(node)][node]

    def name_at(self, level: int, index: int) -> str:
        self._check_level(level, 0)
        if not 0 <= index < len(self.levels[level]):
            raise IndexOutOfRange(
                f"index {index} out of range at level {level} "
                f"(size {len(self.levels[level])})")
        return self.levels[level][index]

    def children(self, node: str) -> list[str]:
        if node != ROOT:
            self._check_node(node)
        return [n for names in self.levels for n in names if self.parent[n] == node]

    # -- hierarchy queries ---------------------------------------------
    def ancestors(self, node: str) -> frozenset[str]:
        """Nodes on the root-to-``node`` path, root excluded, ``node`` included."""
        if node == ROOT:
            raise RootHasNoAncestorSet("the root has no ancestor set")
        self._check_node(node)
        members = []
        while node != ROOT:
            members.append(node)
            node = self.parent[node]
        return frozenset(members)

    def path(self, node: str) -> list[str]:
        """Root-to-``node`` names (root excluded)."""
        if node == ROOT:
            raise RootHasNoAncestorSet("the root has no path")
        self._check_node(node)
        out = []
        while node != ROOT:
            out.append(node)
            node = self.parent[node]
        return out[::-1]

    def is_child(self, level: int, class_at_level: int, parent_class_at_prev_level: int) -> bool:
        self._check_level(level, 1)
        mask = self.child_mask[level]
        if not 0 <= parent_class_at_prev_level < mask.shape[0]:
            raise IndexOutOfRange(
                f"parent index {parent_class_at_prev_level} out of range at level {level - 1}")
        if not 0 <= class_at_level < mask.shape[1]:
            raise IndexOutOfRange(f"class index {class_at_level} out of range at level {level}")
        return bool(mask[parent_class_at_prev_level, class_at_level])

    def leaf_path(self, leaf: str) -> tuple[int, ...]:
        self._check_node(leaf)
        names = self.path(leaf)
        if len(names) != self.depth:
            raise NotALeaf(f"{leaf!r} sits at level {len(names) - 1}, leaves are at {self.depth - 1}")
        return tuple(self.level_index[l][n] for l, n in enumerate(names))

    def path_names(self, indices: Sequence[int]) -> list[str]:
        return [self.name_at(l, int(i)) for l, i in enumerate(indices)]

    def is_valid_path(self, indices: Sequence[int]) -> bool:
        """True when ``indices`` follow child edges at every level."""
        if len(indices) > self.depth:
            return False
        for l, i in enumerate(indices):
            if not 0 <= i < len(self.levels[l]):
                return False
            if l and not self.child_mask[l][indices[l - 1], i]:
                return False
        return True

    # -- serialization -------------------------------------------------
    def edges(self) -> list[Edge]:
        """Edge list ordered by (level, class index); parsing it back keeps every index."""
        return [(self.parent[n], n) for names in self.levels for n in names]

    def serialize(self) -> str:
        lines = [f"depth={self.depth} pad=false"]
        lines += [f"{p} > {c}" for p, c in self.edges()]
        return "\n".join(lines) + "\n"

    # -- internals -----------------------------------------------------
    def _check_node(self, node: str) -> None:
        if node not in self.parent:
            raise UnknownNode(f"unknown node {node!r}")

    def _check_level(self, level: int, lowest: int) -> None:
        if not lowest <= level < self.depth:
            raise LevelOutOfRange(f"level {level} outside [{lowest}, {self.depth})")


def parse_header(line: str) -> tuple[int, bool]:
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise MalformedTaxonomy(f"bad header token {tok!r}")
        fields[key] = value
    if set(fields) != {"depth", "pad"}:
        raise MalformedTaxonomy(f"header must set exactly depth and pad, got {sorted(fields)}")
    try:
        depth = int(fields["depth"])
    except ValueError:
        raise MalformedTaxonomy(f"depth must be an integer, got {fields['depth']!r}") from None
    if depth < 1:
        raise MalformedTaxonomy(f"depth must be >= 1, got {depth}")
    if fields["pad"] not in ("true", "false"):
        raise MalformedTaxonomy(f"pad must be true or false, got {fields['pad']!r}")
    return depth, fields["pad"] == "true"


def parse_edges(text: str) -> tuple[int, bool, list[Edge]]:
    """Split taxonomy text into ``(depth, pad, edges)`` without validating the tree."""
    header = None
    edges: list[Edge] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            header = parse_header(line)
            continue
        parent, sep, child = line.partition(">")
        parent, child = parent.strip(), child.strip()
        if not sep or not parent or not child or ">" in child or " " in parent or " " in child:
            raise MalformedTaxonomy(f"line {lineno}: expected '<parent> > <child>', got {raw!r}")
        edges.append((parent, child))
    if header is None:
        raise MalformedTaxonomy("missing 'depth=<L> pad=<true|false>' header")
    return header[0], header[1], edges


def parse_taxonomy(text: str) -> Taxonomy:
    depth, pad, edges = parse_edges(text)
    return build_taxonomy(edges, depth=depth, pad=pad)


def load_taxonomy(path) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def _validate(edges: Sequence[Edge]) -> dict[str, str]:
    for p, c in edges:
        if p == c:
            raise SelfParent(f"node {c!r} is its own parent")
        if c == ROOT:
            raise MalformedTaxonomy(f"{ROOT} cannot be a child (edge {p} > {c})")

    children: dict[str, list[str]] = {}
    for p, c in edges:
        children.setdefault(p, []).append(c)
    # iterative three-colour DFS over every node, so cycles detached from ROOT are found too
    color: dict[str, int] = {}
    for start in list(children):
        if color.get(start):
            continue
        stack = [(start, iter(children.get(start, ())))]
        trail = [start]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                trail.pop()
            elif color.get(nxt) == 1:
                cycle = trail[trail.index(nxt):] + [nxt]
                raise CycleDetected("cycle: " + " > ".join(cycle))
            elif not color.get(nxt):
                color[nxt] = 1
                trail.append(nxt)
                stack.append((nxt, iter(children.get(nxt, ()))))

    parent: dict[str, str] = {}
    for p, c in edges:
        if c in parent:
            raise DuplicateNode(f"node {c!r} declared twice (parents {parent[c]!r} and {p!r})")
        parent[c] = p

    orphans = sorted({p for p, _ in edges if p != ROOT and p not in parent})
    if orphans:
        raise MultipleRoots(f"nodes without a parent besides {ROOT}: {', '.join(orphans)}")
    if not any(p == ROOT for p, _ in edges):
        raise MultipleRoots(f"{ROOT} has no children")
    return parent


def _node_depths(edges: Sequence[Edge], parent: dict[str, str]) -> dict[str, int]:
    depth: dict[str, int] = {}
    for _, c in edges:
        chain = []
        n = c
        while n != ROOT and n not in depth:
            chain.append(n)
            n = parent[n]
        base = 0 if n == ROOT else depth[n]
        for k, m in enumerate(reversed(chain), 1):
            depth[m] = base + k
    return depth


def _pad_edges(edges: Sequence[Edge], parent: dict[str, str], depth: int) -> list[Edge]:
    d = _node_depths(edges, parent)
    has_child = {p for p, _ in edges}
    out = list(edges)
    leaves = [c for _, c in edges if c not in has_child]
    leaves.sort(key=lambda n: d[n])  # stable: file order within each depth
    names = set(parent)
    for leaf in leaves:
        prev = leaf
        for gen in range(1, depth - d[leaf] + 1):
            name = f"{leaf}{PAD_SEP}{gen}"
            if name in names:
                raise DuplicateNode(f"padding name {name!r} collides with an existing node")
            names.add(name)
            out.append((prev, name))
            prev = name
    return out


def build_taxonomy(edges: Iterable[Edge], depth: int | None = None, pad: bool = False) -> Taxonomy:
    """Validate ``edges`` and index them per level.

    ``depth`` defaults to the deepest leaf.  With ``pad`` false every leaf must
    already sit at ``depth``; otherwise short branches are extended by
    repeating their leaf (``milk~1``, ``milk~2``, ...).
    """
    edges = list(edges)
    parent = _validate(edges)
    d = _node_depths(edges, parent)
    deepest = max(d.values())
    if depth is None:
        depth = deepest
    if deepest > depth:
        deep = sorted(n for n, k in d.items() if k > depth)
        raise MalformedTaxonomy(f"declared depth {depth} but nodes reach depth {deepest}: {', '.join(deep[:5])}")
    has_child = {p for p, _ in edges}
    short = [c for _, c in edges if c not in has_child and d[c] < depth]
    if short:
        if not pad:
            raise RaggedDepthWithoutPadding(
                f"leaves above depth {depth} with pad=false: {', '.join(short[:5])}"
                + (" ..." if len(short) > 5 else ""))
        edges = _pad_edges(edges, parent, depth)
        parent = dict(parent)
        parent.update({c: p for p, c in edges})
        d = _node_depths(edges, parent)

    levels: list[list[str]] = [[] for _ in range(depth)]
    for _, c in edges:
        levels[d[c] - 1].append(c)
    level_index = tuple({n: i for i, n in enumerate(names)} for names in levels)
    masks: list[np.ndarray | None] = [None]
    for l in range(1, depth):
        m = np.zeros((len(levels[l - 1]), len(levels[l])), dtype=bool)
        for j, n in enumerate(levels[l]):
            m[level_index[l - 1][parent[n]], j] = True
        m.setflags(write=False)
        masks.append(m)
    return Taxonomy(
        depth=depth,
        parent=parent,
        levels=tuple(tuple(names) for names in levels),
        level_index=level_index,
        child_mask=tuple(masks),
    )


def pad_to_uniform_depth(edges: Iterable[Edge], depth: int | None = None) -> Taxonomy:
    return build_taxonomy(edges, depth=depth, pad=True)


FIG4_EDGES: tuple[Edge, ...] = (
    (ROOT, "A"), (ROOT, "B"), (ROOT, "C"),
    ("A", "D"), ("B", "F"), ("B", "G"), ("C", "H"),
    ("D", "I"), ("D", "J"), ("F", "L"), ("F", "M"),
    ("G", "N"), ("H", "O"), ("H", "P"),
)


def example_taxonomy() -> Taxonomy:
    """The small three-level tree used throughout the docs and tests."""
    return build_taxonomy(FIG4_EDGES, depth=3)
