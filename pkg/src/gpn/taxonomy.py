"""Class taxonomy DAG: hop distances, task-class sampling, propagation pathways."""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class CategoryGraph:
    """Directed acyclic graph of classes with parent -> child arcs.

    Treated as immutable: every "mutating" helper returns a new graph.
    """

    def __init__(self, nodes: Iterable[int] = (), arcs: Iterable[tuple[int, int]] = ()):
        node_set = {int(n) for n in nodes}
        arc_list = []
        for p, c in arcs:
            p, c = int(p), int(c)
            if p == c:
                raise GraphError(f"self-loop on class {p}")
            node_set.add(p)
            node_set.add(c)
            arc_list.append((p, c))
        for n in node_set:
            if n < 0:
                raise GraphError(f"class ids must be non-negative, got {n}")
        self.nodes: tuple[int, ...] = tuple(sorted(node_set))
        self.arcs: tuple[tuple[int, int], ...] = tuple(sorted(set(arc_list)))
        parents: dict[int, list[int]] = {n: [] for n in self.nodes}
        children: dict[int, list[int]] = {n: [] for n in self.nodes}
        for p, c in self.arcs:
            parents[c].append(p)
            children[p].append(c)
        self.parents = {n: tuple(sorted(v)) for n, v in parents.items()}
        self.children = {n: tuple(sorted(v)) for n, v in children.items()}
        self.neighbors = {
            n: tuple(sorted(set(self.parents[n]) | set(self.children[n]))) for n in self.nodes
        }
        self._order = self._toposort()

    def _toposort(self) -> tuple[int, ...]:
        ts = TopologicalSorter({n: self.parents[n] for n in self.nodes})
        try:
            return tuple(ts.static_order())
        except CycleError as exc:
            raise GraphError(f"graph has a directed cycle: {exc.args[1]}") from None

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, y: int) -> bool:
        return y in self.parents

    def topological_order(self) -> tuple[int, ...]:
        return self._order

    def roots(self) -> list[int]:
        return [n for n in self.nodes if not self.parents[n]]

    def leaves(self) -> list[int]:
        return [n for n in self.nodes if not self.children[n]]

    def descendants(self, y: int) -> set[int]:
        seen: set[int] = set()
        stack = list(self.children[y])
        while stack:
            z = stack.pop()
            if z not in seen:
                seen.add(z)
                stack.extend(self.children[z])
        return seen

    def _check(self, y: int) -> None:
        if y not in self.parents:
            raise GraphError(f"unknown class id {y}")

    def distances_from(self, sources: Iterable[int], max_hops: int | None = None,
                       through: set[int] | None = None) -> dict[int, int]:
        """Multi-source undirected BFS.

        ``through`` restricts which nodes may be entered (sources are always
        included).
        """
        dist: dict[int, int] = {}
        queue: deque[int] = deque()
        for s in sources:
            self._check(s)
            if s not in dist:
                dist[s] = 0
                queue.append(s)
        while queue:
            u = queue.popleft()
            d = dist[u]
            if max_hops is not None and d >= max_hops:
                continue
            for z in self.neighbors[u]:
                if z in dist or (through is not None and z not in through):
                    continue
                dist[z] = d + 1
                queue.append(z)
        return dist

    def hop_distance(self, a: int, b: int) -> int | None:
        """Shortest undirected path length, or ``None`` when unreachable."""
        self._check(a)
        self._check(b)
        return self.distances_from([a]).get(b)

    def without(self, drop: Iterable[int]) -> "CategoryGraph":
        drop = set(drop)
        return CategoryGraph(
            [n for n in self.nodes if n not in drop],
            [(p, c) for p, c in self.arcs if p not in drop and c not in drop],
        )

    def with_arcs(self, nodes: Iterable[int], arcs: Iterable[tuple[int, int]]) -> "CategoryGraph":
        return CategoryGraph(list(self.nodes) + list(nodes), list(self.arcs) + list(arcs))

    def __eq__(self, other) -> bool:
        return isinstance(other, CategoryGraph) and self.nodes == other.nodes and self.arcs == other.arcs

    def __hash__(self) -> int:
        return hash((self.nodes, self.arcs))

    def __repr__(self) -> str:
        return f"CategoryGraph(nodes={len(self.nodes)}, arcs={len(self.arcs)})"


# ---------------------------------------------------------------------------
# file format

def parse_graph(text: str) -> CategoryGraph:
    nodes: list[int] = []
    arcs: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "node" and len(parts) == 2:
                nodes.append(int(parts[1]))
            elif len(parts) == 2:
                arcs.append((int(parts[0]), int(parts[1])))
            else:
                raise ValueError
        except ValueError:
            raise GraphError(f"line {lineno}: cannot parse {raw!r}") from None
    return CategoryGraph(nodes, arcs)


def format_graph(g: CategoryGraph) -> str:
    lines = ["# parent child"]
    touched = {n for arc in g.arcs for n in arc}
    lines += [f"node {n}" for n in g.nodes if n not in touched]
    lines += [f"{p} {c}" for p, c in g.arcs]
    return "\n".join(lines) + "\n"


def read_graph(path: str | os.PathLike) -> CategoryGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def write_graph(path: str | os.PathLike, g: CategoryGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_graph(g))


# ---------------------------------------------------------------------------
# task-class sampling

def _eligible(g: CategoryGraph, eligible: Iterable[int] | None) -> list[int]:
    if eligible is None:
        return list(g.nodes)
    out = sorted(set(eligible))
    for y in out:
        g._check(y)
    return out


def sample_random(g: CategoryGraph, n: int, rng: np.random.Generator,
                  eligible: Iterable[int] | None = None) -> list[int]:
    pool = _eligible(g, eligible)
    if n < 1 or n > len(pool):
        raise ValueError(f"cannot draw {n} classes from {len(pool)} eligible")
    picks = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in picks]


def sample_snowball(g: CategoryGraph, n: int, k_n: int, rng: np.random.Generator,
                    eligible: Iterable[int] | None = None) -> tuple[list[int], list[bool]]:
    """Sequential sampling from hop-``k_n`` neighbourhoods of the picks so far.

    Returns the picks in order and, per pick, whether it came from the
    uniform fallback (frontier empty). The first pick is never a fallback.
    """
    if k_n < 1:
        raise ValueError("k_n must be >= 1")
    pool = _eligible(g, eligible)
    if n < 1 or n > len(pool):
        raise ValueError(f"cannot draw {n} classes from {len(pool)} eligible")
    pool_set = set(pool)
    chosen = [pool[int(rng.integers(len(pool)))]]
    fallback = [False]
    while len(chosen) < n:
        near = g.distances_from(chosen, max_hops=k_n)
        taken = set(chosen)
        frontier = sorted(y for y in near if y in pool_set and y not in taken)
        if frontier:
            chosen.append(frontier[int(rng.integers(len(frontier)))])
            fallback.append(False)
        else:
            rest = [y for y in pool if y not in taken]
            chosen.append(rest[int(rng.integers(len(rest)))])
            fallback.append(True)
    return chosen, fallback


# ---------------------------------------------------------------------------
# propagation pathway

@dataclass(frozen=True)
class PropagationPathway:
    """Classes that exchange messages plus the (weighted) arcs between them.

    ``edges`` keep their original orientation as ``(parent, child, weight)``.
    """

    members: tuple[int, ...]
    edges: tuple[tuple[int, int, float], ...]
    task_classes: tuple[int, ...] = ()
    _pa: dict = field(default_factory=dict, repr=False, compare=False)
    _ch: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pa = {m: [] for m in self.members}
        ch = {m: [] for m in self.members}
        for p, c, _ in self.edges:
            pa[c].append(p)
            ch[p].append(c)
        self._pa.update({m: tuple(sorted(v)) for m, v in pa.items()})
        self._ch.update({m: tuple(sorted(v)) for m, v in ch.items()})

    def parents(self, y: int) -> tuple[int, ...]:
        return self._pa[y]

    def children(self, y: int) -> tuple[int, ...]:
        return self._ch[y]

    def neighbors(self, y: int) -> tuple[int, ...]:
        return tuple(sorted(self._pa[y] + self._ch[y]))

    def total_weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))

    def n_components(self) -> int:
        return _count_components(self.members, [(p, c) for p, c, _ in self.edges])


class _DisjointSet:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


def _count_components(members, pairs) -> int:
    ds = _DisjointSet(members)
    return len(members) - sum(ds.union(a, b) for a, b in pairs)


def _cos(p: np.ndarray, q: np.ndarray) -> float:
    return float(p @ q) / (float(np.linalg.norm(p)) * float(np.linalg.norm(q)))


def maximum_spanning_forest(members: Sequence[int],
                            weighted_arcs: Iterable[tuple[int, int, float]]) -> list[tuple[int, int, float]]:
    """Kruskal on descending weight; ties broken by the smaller id pair."""
    order = sorted(weighted_arcs, key=lambda e: (-e[2], min(e[0], e[1]), max(e[0], e[1])))
    ds = _DisjointSet(members)
    kept = [e for e in order if ds.union(e[0], e[1])]
    return sorted(kept, key=lambda e: (e[0], e[1]))


def build_pathway(g: CategoryGraph, task_classes: Sequence[int], t_steps: int,
                  memory, task_protos: Mapping[int, np.ndarray] | None = None,
                  use_mst: bool = True) -> PropagationPathway:
    """Propagation pathway for one task.

    Candidates are the task classes plus every class within ``t_steps`` hops
    that has a memory prototype; hops only pass through candidates. Edge
    weights are cosine similarities of memory prototypes, with ``task_protos``
    standing in for task classes absent from memory. With ``use_mst`` the
    result is the maximum spanning forest, otherwise all induced arcs.
    """
    task = list(dict.fromkeys(int(y) for y in task_classes))
    task_protos = task_protos or {}
    for y in task:
        g._check(y)
    task_set = set(task)
    through = task_set | {y for y in g.nodes if memory.has(y)}
    members = sorted(g.distances_from(task, max_hops=t_steps, through=through))
    vec = {}
    for y in members:
        v = memory.fetch(y)
        if v is None:
            v = task_protos.get(y)
        vec[y] = v
    member_set = set(members)
    arcs = []
    for y in members:
        for c in g.children[y]:
            if c in member_set:
                p_vec, c_vec = vec[y], vec[c]
                w = _cos(p_vec, c_vec) if p_vec is not None and c_vec is not None else 0.0
                arcs.append((y, c, w))
    edges = maximum_spanning_forest(members, arcs) if use_mst else sorted(arcs)
    return PropagationPathway(tuple(members), tuple(edges), tuple(task))


# ---------------------------------------------------------------------------
# unseen test classes

def attach_test_classes(g: CategoryGraph, test_protos: Mapping[int, np.ndarray],
                        train_protos: Mapping[int, np.ndarray], k_c: int) -> CategoryGraph:
    """Copy of ``g`` with each test class pointing at its ``k_c`` most
    cosine-similar training classes."""
    if not train_protos:
        raise GraphError("no training prototypes to attach test classes to")
    if k_c < 1 or k_c > len(train_protos):
        raise ValueError(f"k_c={k_c} outside [1, {len(train_protos)}]")
    train_ids = sorted(train_protos)
    train_mat = np.stack([np.asarray(train_protos[y], dtype=np.float64) for y in train_ids])
    train_unit = train_mat / np.linalg.norm(train_mat, axis=1, keepdims=True)
    new_nodes, new_arcs = [], []
    for t in sorted(test_protos):
        if t in g:
            raise GraphError(f"test class {t} already in graph")
        q = np.asarray(test_protos[t], dtype=np.float64)
        sims = train_unit @ (q / np.linalg.norm(q))
        order = sorted(range(len(train_ids)), key=lambda i: (-sims[i], train_ids[i]))
        new_nodes.append(t)
        new_arcs += [(t, train_ids[i]) for i in order[:k_c]]
    return g.with_arcs(new_nodes, new_arcs)
