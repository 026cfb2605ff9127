"""Industry trees: parsing prefix-coded taxonomies and walking them.

A taxonomy file is UTF-8, tab separated, one industry per line::

    code<TAB>title<TAB>definition[<TAB>parent_code]

``#`` lines and blank lines are skipped.  The root is implicit.  Without a
parent column the parent is the longest proper prefix of the code that is
itself present (NAICS style); an explicit parent column always wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path


class TaxonomyError(ValueError):
    """Malformed taxonomy input."""


class TreeDomainError(ValueError):
    """Operator applied outside its domain (bad level offset, foreign node)."""


ROOT_CODE = ""


@dataclass
class IndustryNode:
    id: int
    code: str
    title: str
    level: int
    parent: int | None
    children: list[int] = field(default_factory=list)
    index: int = 1
    definition: str = ""

    @property
    def label(self) -> str:
        return f"T{self.level}{self.index}"


class TaxonomyTree:
    """Immutable tree with level-indexed nodes; node 0 is the root."""

    def __init__(self, nodes: list[IndustryNode], fingerprint: str = ""):
        self.nodes = nodes
        self.fingerprint = fingerprint
        self.L = max(n.level for n in nodes)
        self.levels: list[list[int]] = [[] for _ in range(self.L + 1)]
        for n in nodes:
            self.levels[n.level].append(n.id)
        self.by_code = {n.code: n.id for n in nodes}
        self._check()

    @property
    def root(self) -> IndustryNode:
        return self.nodes[0]

    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    def N_l(self, level: int) -> int:
        return len(self.levels[level])

    def node(self, key) -> IndustryNode:
        if isinstance(key, IndustryNode):
            if key.id >= len(self.nodes) or self.nodes[key.id] is not key:
                raise TreeDomainError(f"node {key.code!r} does not belong to this tree")
            return key
        if isinstance(key, str):
            try:
                return self.nodes[self.by_code[key]]
            except KeyError:
                raise KeyError(f"unknown industry code {key!r}") from None
        return self.nodes[int(key)]

    def at(self, level: int, index: int) -> IndustryNode:
        """The ``index``-th industry (1-based) at ``level``."""
        return self.nodes[self.levels[level][index - 1]]

    def _check(self) -> None:
        root = self.nodes[0]
        if root.level != 0 or root.parent is not None:
            raise TaxonomyError("node 0 must be the root")
        if len(self.levels[0]) != 1:
            raise TaxonomyError("exactly one level-0 node is allowed")
        for n in self.nodes[1:]:
            if self.nodes[n.parent].level != n.level - 1:
                raise TaxonomyError(f"{n.code}: parent is not one level up")
            if not n.children and n.level != self.L:
                raise TaxonomyError(
                    f"ragged tree: leaf {n.code!r} sits at level {n.level}, leaves must all be at level {self.L}")

    # Definition 2 operators -----------------------------------------------

    def ancestor(self, node, k: int = 1) -> IndustryNode:
        n = self.node(node)
        if not 0 <= k <= n.level:
            raise TreeDomainError(f"ancestor offset {k} outside 0..{n.level} for {n.code!r}")
        for _ in range(k):
            n = self.nodes[n.parent]
        return n

    def descendants(self, node, k: int = 1) -> list[IndustryNode]:
        n = self.node(node)
        if not 0 <= k <= self.L - n.level:
            raise TreeDomainError(f"descendant offset {k} outside 0..{self.L - n.level} for {n.code!r}")
        frontier = [n.id]
        for _ in range(k):
            frontier = [c for i in frontier for c in self.nodes[i].children]
        return [self.nodes[i] for i in sorted(frontier)]

    def children(self, node) -> list[IndustryNode]:
        return [self.nodes[c] for c in self.node(node).children]

    def path(self, node) -> list[IndustryNode]:
        """Nodes from level 1 down to ``node`` (root excluded)."""
        n = self.node(node)
        out = []
        while n.parent is not None:
            out.append(n)
            n = self.nodes[n.parent]
        return out[::-1]

    def structure_knowledge(self, node) -> list[IndustryNode]:
        """All non-root ancestors and all descendants of a non-root node."""
        n = self.node(node)
        if n.level < 1:
            raise TreeDomainError("structure knowledge is defined for levels 1..L")
        ups = [self.ancestor(n, k) for k in range(1, n.level)]
        downs = [d for k in range(1, self.L - n.level + 1) for d in self.descendants(n, k)]
        return sorted(ups + downs, key=lambda x: x.id)

    def tree_distance(self, a, b) -> int:
        a, b = self.node(a), self.node(b)
        steps = 0
        while a.level > b.level:
            a, steps = self.nodes[a.parent], steps + 1
        while b.level > a.level:
            b, steps = self.nodes[b.parent], steps + 1
        while a.id != b.id:
            a, b = self.nodes[a.parent], self.nodes[b.parent]
            steps += 2
        return steps


def _build(records: list[tuple[int, str, str, str, str | None]], fingerprint: str) -> TaxonomyTree:
    """records: (line number, code, title, definition, explicit parent or None)."""
    seen: dict[str, int] = {}
    for lineno, code, *_ in records:
        if code in seen:
            raise TaxonomyError(f"line {lineno}: duplicate code {code!r} (first at line {seen[code]})")
        seen[code] = lineno

    parents: dict[str, str] = {}
    for lineno, code, _, _, parent in records:
        if parent is not None:
            if parent and parent not in seen:
                raise TaxonomyError(f"line {lineno}: parent {parent!r} of {code!r} is not defined")
            parents[code] = parent
            continue
        cands = [code[:k] for k in range(len(code) - 1, 0, -1) if code[:k] in seen]
        if cands:
            parents[code] = cands[0]
        elif len(code) == min(len(c) for _, c, *_ in records):
            parents[code] = ROOT_CODE
        else:
            raise TaxonomyError(f"line {lineno}: orphan code {code!r}, no prefix of it is defined")

    depth: dict[str, int] = {ROOT_CODE: 0}

    def level_of(code, trail=()):
        if code in depth:
            return depth[code]
        if code in trail:
            raise TaxonomyError(f"line {seen[code]}: cycle through {code!r}")
        depth[code] = level_of(parents[code], trail + (code,)) + 1
        return depth[code]

    for _, code, *_ in records:
        level_of(code)

    max_level = max(depth.values())
    has_child = set(parents.values())
    for lineno, code, *_ in records:
        if code not in has_child and depth[code] != max_level:
            raise TaxonomyError(
                f"line {lineno}: ragged tree, leaf {code!r} is at level {depth[code]} "
                f"but leaves must all be at level {max_level}")

    nodes = [IndustryNode(0, ROOT_CODE, "ROOT", 0, None)]
    ids = {ROOT_CODE: 0}
    for lvl in range(1, max_level + 1):
        rows = [r for r in records if depth[r[1]] == lvl]
        if not rows:
            raise TaxonomyError(f"non-contiguous levels: level {lvl} is empty")
        for i, (lineno, code, title, definition, _) in enumerate(rows, start=1):
            nid = len(nodes)
            pid = ids[parents[code]]
            ids[code] = nid
            nodes.append(IndustryNode(nid, code, title, lvl, pid, index=i, definition=definition))
            nodes[pid].children.append(nid)
    return TaxonomyTree(nodes, fingerprint)


def parse_taxonomy_text(text: str) -> TaxonomyTree:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 3 or len(cols) > 4:
            raise TaxonomyError(f"line {lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}")
        code = cols[0].strip()
        if not code:
            raise TaxonomyError(f"line {lineno}: empty code")
        parent = cols[3].strip() if len(cols) == 4 else None
        records.append((lineno, code, cols[1].strip(), cols[2].strip(), parent))
    if not records:
        raise TaxonomyError("taxonomy has no industries")
    fingerprint = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return _build(records, fingerprint)


def parse_taxonomy(path) -> TaxonomyTree:
    return parse_taxonomy_text(Path(path).read_text(encoding="utf-8"))


def write_taxonomy(tree: TaxonomyTree, path, explicit_parents: bool = False) -> None:
    lines = []
    for n in tree.nodes[1:]:
        cols = [n.code, n.title, n.definition]
        if explicit_parents:
            cols.append(tree.nodes[n.parent].code)
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
