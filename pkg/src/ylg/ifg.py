"""Information flow graphs of multi-step attention.

Layer ``V^i`` holds the token copies before step ``i``.  An edge ``u -> v``
between ``V^i`` and ``V^{i+1}`` exists when output ``v`` of step ``i`` attends
to input ``u``, i.e. information flows from the attended token to the
attending one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .patterns import PatternFactorization, split_query_blocks


@dataclass(frozen=True, eq=False)
class InformationFlowGraph:
    """Layered DAG; ``adjacency[i][u, v]`` is the edge from ``u`` in V^i to ``v`` in V^{i+1}."""

    adjacency: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        adj = tuple(np.array(a, dtype=bool) for a in self.adjacency)
        if not adj:
            raise ValueError("graph needs at least one step")
        for i, a in enumerate(adj):
            if a.ndim != 2 or 0 in a.shape:
                raise ValueError(f"step {i} adjacency must be a non-empty matrix")
            if i and a.shape[0] != adj[i - 1].shape[1]:
                raise ValueError(f"step {i} does not chain onto step {i - 1}")
            a.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)

    @property
    def steps(self) -> int:
        return len(self.adjacency)

    @property
    def layers(self) -> int:
        return self.steps + 1

    @property
    def layer_sizes(self) -> list[int]:
        return [self.adjacency[0].shape[0]] + [a.shape[1] for a in self.adjacency]

    def edges(self, step: int) -> list[tuple[int, int]]:
        return [(int(u), int(v)) for u, v in np.argwhere(self.adjacency[step])]

    def successors(self, layer: int, node: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[layer][node])


def build_ifg(f: PatternFactorization, *, expanded: bool = False) -> InformationFlowGraph:
    """Graph of a square factorization.

    With ``expanded=True`` a non-square final step is allowed; its output
    layer then has one node per query row.
    """
    if not (f.is_square or expanded):
        raise ValueError("information flow graphs need square steps; split query blocks first")
    return InformationFlowGraph(tuple(step.bits.T for step in f.steps))


def from_masks(masks: Sequence[np.ndarray]) -> InformationFlowGraph:
    """Graph from raw square boolean masks (``mask[v, u]`` means v attends u)."""
    sizes = {np.shape(m) for m in masks}
    if len(sizes) != 1 or any(r != c for r, c in sizes):
        raise ValueError(f"ragged or non-square step masks: {sorted(sizes)}")
    return InformationFlowGraph(tuple(np.asarray(m, dtype=bool).T for m in masks))


def star_topology(n: int) -> InformationFlowGraph:
    """All n inputs feed one hub, which feeds all n outputs (2n edges)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return InformationFlowGraph((np.ones((n, 1), bool), np.ones((1, n), bool)))


def reachability(g: InformationFlowGraph) -> np.ndarray:
    """Boolean ``|V^0| x |V^p|`` matrix: ``R[a, b]`` iff a path a -> b exists.

    Breadth-first propagation one layer at a time, all sources at once.
    """
    frontier = np.eye(g.layer_sizes[0], dtype=np.float64)
    for adj in g.adjacency:
        # counts stay exact in float64 for any desk-scale graph
        frontier = (frontier @ adj.astype(np.float64)) > 0
        frontier = frontier.astype(np.float64)
    return frontier > 0


class Verdict(NamedTuple):
    full_information: bool
    witness: tuple[int, int] | None

    def __bool__(self) -> bool:
        return self.full_information


def unreachable_pairs(g: InformationFlowGraph) -> list[tuple[int, int]]:
    return [(int(a), int(b)) for a, b in np.argwhere(~reachability(g))]


def full_information(g: InformationFlowGraph) -> Verdict:
    """Whether every input node reaches every output node.

    On failure the witness is the lexicographically smallest unreachable
    ``(source, target)`` pair.
    """
    missing = np.argwhere(~reachability(g))
    if missing.size == 0:
        return Verdict(True, None)
    a, b = missing[0]
    return Verdict(False, (int(a), int(b)))


def _split_network(g: InformationFlowGraph) -> tuple[dict[int, dict[int, int]], list[int]]:
    """Residual capacities with every node split into in/out halves of capacity one."""
    offsets = np.concatenate([[0], np.cumsum(g.layer_sizes)]).tolist()
    total = offsets[-1]
    cap: dict[int, dict[int, int]] = {v: {} for v in range(2 * total + 2)}

    def add(u: int, v: int) -> None:
        cap[u][v] = cap[u].get(v, 0) + 1
        cap[v].setdefault(u, 0)

    for node in range(total):
        add(2 * node, 2 * node + 1)
    for i, adj in enumerate(g.adjacency):
        for u, v in np.argwhere(adj):
            add(2 * (offsets[i] + int(u)) + 1, 2 * (offsets[i + 1] + int(v)))
    return cap, offsets


def _augment(cap: dict[int, dict[int, int]], source: int, sink: int) -> bool:
    parent = {source: source}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v, c in cap[u].items():
            if c > 0 and v not in parent:
                parent[v] = u
                if v == sink:
                    while v != source:
                        u = parent[v]
                        cap[u][v] -= 1
                        cap[v][u] += 1
                        v = u
                    return True
                queue.append(v)
    return False


def pair_flow(
    g: InformationFlowGraph, sources: tuple[int, int], targets: tuple[int, int]
) -> int:
    """Maximum number of tokens routable from ``sources`` to ``targets`` at once.

    Every edge and every node carries at most one token.
    """
    if len(sources) != 2 or len(targets) != 2:
        raise ValueError("pair_flow takes exactly two sources and two targets")
    if sources[0] == sources[1] or targets[0] == targets[1]:
        raise ValueError("sources and targets must each be distinct")
    sizes = g.layer_sizes
    for s in sources:
        if not 0 <= s < sizes[0]:
            raise ValueError(f"source {s} out of range for layer of size {sizes[0]}")
    for t in targets:
        if not 0 <= t < sizes[-1]:
            raise ValueError(f"target {t} out of range for layer of size {sizes[-1]}")

    cap, offsets = _split_network(g)
    super_source = 2 * offsets[-1]
    super_sink = super_source + 1
    for s in sources:
        cap[super_source][2 * s] = 1
        cap[2 * s].setdefault(super_source, 0)
    for t in targets:
        out_half = 2 * (offsets[-2] + t) + 1
        cap[out_half][super_sink] = 1
        cap[super_sink].setdefault(out_half, 0)

    flow = 0
    while _augment(cap, super_source, super_sink):
        flow += 1
    return flow


class EdgeStats(NamedTuple):
    edges_per_step: list[int]
    total_edges: int
    density: float


def edge_stats(g: InformationFlowGraph) -> EdgeStats:
    """Edge counts; density is relative to fully connected consecutive layers."""
    per_step = [int(a.sum()) for a in g.adjacency]
    possible = sum(a.size for a in g.adjacency)
    total = sum(per_step)
    return EdgeStats(per_step, total, total / possible)


def blockwise_full_information(f: PatternFactorization) -> Verdict:
    """Full information for every query block of a (possibly expanded) factorization.

    The witness, if any, is reported in expanded query coordinates.
    """
    if f.is_square:
        return full_information(build_ifg(f))
    if f.n_query % f.n:
        raise ValueError(f"final step has {f.n_query} rows, not a multiple of n={f.n}")
    for k, block in enumerate(split_query_blocks(f)):
        verdict = full_information(build_ifg(block))
        if not verdict:
            a, b = verdict.witness
            return Verdict(False, (a, b + k * f.n))
    return Verdict(True, None)
