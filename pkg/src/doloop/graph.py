"""Directed acyclic causal graphs with cached topology."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CycleDetected, InvalidIndex, SelfLoop


@dataclass(frozen=True)
class CausalGraph:
    """An immutable DAG over named nodes.

    `parents[i]` lists the parent indices of node i in ascending order; that
    order also fixes the argument order of node i's mechanism.
    """

    node_names: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    parents: tuple[tuple[int, ...], ...] = field(init=False)
    children: tuple[tuple[int, ...], ...] = field(init=False)
    topo_order: tuple[int, ...] = field(init=False)
    roots: frozenset[int] = field(init=False)

    def __post_init__(self):
        n = len(self.node_names)
        parents: list[list[int]] = [[] for _ in range(n)]
        children: list[list[int]] = [[] for _ in range(n)]
        for p, c in self.edges:
            parents[c].append(p)
            children[p].append(c)
        object.__setattr__(self, "parents", tuple(tuple(sorted(ps)) for ps in parents))
        object.__setattr__(self, "children", tuple(tuple(sorted(cs)) for cs in children))
        object.__setattr__(self, "topo_order", _topological_order(n, self.edges))
        object.__setattr__(self, "roots", frozenset(i for i in range(n) if not self.parents[i]))

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    def name(self, i: int) -> str:
        return self.node_names[i]

    def index(self, name: str) -> int:
        return self.node_names.index(name)


def _topological_order(n: int, edges: frozenset[tuple[int, int]]) -> tuple[int, ...]:
    # Kahn's algorithm; ties resolved by lowest index for determinism.
    indeg = [0] * n
    out: list[list[int]] = [[] for _ in range(n)]
    for p, c in edges:
        indeg[c] += 1
        out[p].append(c)
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order: list[int] = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for c in sorted(out[i]):
            indeg[c] -= 1
            if indeg[c] == 0:
                # Insertion keeps `ready` sorted; n is small everywhere we run.
                ready.append(c)
                ready.sort()
    if len(order) != n:
        raise CycleDetected("graph contains a directed cycle")
    return tuple(order)


def validate_graph(edges, n_nodes: int, node_names=None) -> CausalGraph:
    """Check edge indices, self-loops, duplicates and acyclicity; build the graph."""
    if n_nodes < 1:
        raise InvalidIndex("need at least one node")
    if node_names is None:
        node_names = tuple(f"X{i + 1}" for i in range(n_nodes))
    else:
        node_names = tuple(node_names)
        if len(node_names) != n_nodes:
            raise InvalidIndex("node_names length does not match n_nodes")
    seen = set()
    for e in edges:
        p, c = e
        if not (0 <= p < n_nodes and 0 <= c < n_nodes):
            raise InvalidIndex(f"edge {e} references a node outside [0, {n_nodes})")
        if p == c:
            raise SelfLoop(f"self-loop on node {p}")
        if (p, c) in seen:
            raise InvalidIndex(f"duplicate edge {e}")
        seen.add((p, c))
    return CausalGraph(node_names, frozenset(seen))


def descendants(graph: CausalGraph, node: int) -> set[int]:
    """Transitive closure of `node`'s children (excluding the node itself)."""
    if not (0 <= node < graph.n_nodes):
        raise InvalidIndex(f"node {node} outside graph")
    found: set[int] = set()
    stack = list(graph.children[node])
    while stack:
        c = stack.pop()
        if c not in found:
            found.add(c)
            stack.extend(graph.children[c])
    return found
