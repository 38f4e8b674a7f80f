"""Sensor-network graphs and combination weights.

Node indices are 0-based in memory and 1-based in edge-list files.
Weight matrices follow the column-stochastic convention: ``a[l, k]`` is the
weight node ``k`` puts on neighbour ``l``, so every column sums to one.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STOCHASTIC_TOL = 1e-12
MAX_REWIRE_ATTEMPTS = 64


class TopologyError(ValueError):
    """Invalid graph or weight construction."""


class ConnectivityError(TopologyError):
    pass


@dataclass(frozen=True)
class NetworkTopology:
    adjacency: np.ndarray  # (N, N) bool, symmetric, true diagonal
    neighborhoods: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] == 0:
            raise TopologyError(f"adjacency must be a non-empty square matrix, got shape {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise TopologyError("adjacency must be symmetric")
        if not adj.diagonal().all():
            raise TopologyError("every node must be its own neighbour")
        if not is_connected(adj):
            raise ConnectivityError("graph is not connected")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        hoods = tuple(tuple(int(l) for l in np.flatnonzero(adj[:, k])) for k in range(adj.shape[0]))
        object.__setattr__(self, "neighborhoods", hoods)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def degrees(self) -> np.ndarray:
        """Neighbour counts excluding the node itself."""
        return self.adjacency.sum(axis=0) - 1

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(l, k)`` with ``l < k``, self-loops excluded."""
        ls, ks = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(l), int(k)) for l, k in zip(ls, ks)]


@dataclass(frozen=True)
class CombinationMatrices:
    a: np.ndarray  # combination-step weights a[l, k]
    c: np.ndarray  # adaptation-step weights c[l, k]


def is_connected(adjacency: np.ndarray) -> bool:
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in np.flatnonzero(adj[node]):
            if not seen[nb]:
                seen[nb] = True
                queue.append(int(nb))
    return bool(seen.all())


def topology_from_edges(n_nodes: int, edges) -> NetworkTopology:
    """Build a topology from 0-based undirected edges; self-loops are added."""
    if n_nodes < 1:
        raise TopologyError("n_nodes must be positive")
    adj = np.eye(n_nodes, dtype=bool)
    for l, k in edges:
        if not (0 <= l < n_nodes and 0 <= k < n_nodes):
            raise TopologyError(f"edge ({l}, {k}) out of range for {n_nodes} nodes")
        adj[l, k] = adj[k, l] = True
    return NetworkTopology(adj)


def build_random_topology(n_nodes: int, target_degree: int, seed: int) -> NetworkTopology:
    """Random connected graph with mean degree ``target_degree`` (self excluded).

    A uniformly random recursive tree guarantees connectivity; extra edges are
    then drawn uniformly among the missing pairs until the edge budget
    ``round(n_nodes * target_degree / 2)`` is met.
    """
    if n_nodes < 1:
        raise TopologyError("n_nodes must be positive")
    if n_nodes == 1:
        return NetworkTopology(np.ones((1, 1), dtype=bool))
    if not 1 <= target_degree < n_nodes:
        raise TopologyError(f"target_degree must lie in [1, {n_nodes - 1}], got {target_degree}")

    rng = np.random.default_rng(seed)
    n_edges = max(n_nodes - 1, int(round(n_nodes * target_degree / 2)))
    for _ in range(MAX_REWIRE_ATTEMPTS):
        adj = np.eye(n_nodes, dtype=bool)
        order = rng.permutation(n_nodes)
        for pos in range(1, n_nodes):
            child = order[pos]
            parent = order[rng.integers(pos)]
            adj[child, parent] = adj[parent, child] = True
        missing = np.argwhere(np.triu(~adj, k=1))
        n_extra = n_edges - (n_nodes - 1)
        if n_extra > 0:
            pick = rng.choice(len(missing), size=n_extra, replace=False)
            for l, k in missing[pick]:
                adj[l, k] = adj[k, l] = True
        if is_connected(adj):
            return NetworkTopology(adj)
    raise ConnectivityError(f"no connected graph after {MAX_REWIRE_ATTEMPTS} attempts")


def uniform_weights(topology: NetworkTopology) -> CombinationMatrices:
    """Uniform policy: ``a[l, k] = c[l, k] = 1 / |N_k|`` on the neighbourhood."""
    adj = topology.adjacency.astype(float)
    w = adj / adj.sum(axis=0, keepdims=True)
    return CombinationMatrices(a=w.copy(), c=w.copy())


@dataclass(frozen=True)
class Violation:
    matrix: str  # "a" or "c"
    kind: str  # "shape", "support", "negative", "column_sum"
    index: tuple[int, ...]
    detail: str

    def __str__(self) -> str:
        return f"{self.matrix}{list(self.index)}: {self.kind} ({self.detail})"


def validate(matrices: CombinationMatrices, topology: NetworkTopology, tol: float = STOCHASTIC_TOL) -> list[Violation]:
    """Return every violated weight invariant; an empty list means valid."""
    report: list[Violation] = []
    n = topology.n_nodes
    for name in ("a", "c"):
        w = np.asarray(getattr(matrices, name), dtype=float)
        if w.shape != (n, n):
            report.append(Violation(name, "shape", (), f"expected {(n, n)}, got {w.shape}"))
            continue
        for l, k in np.argwhere((w != 0) & ~topology.adjacency):
            report.append(Violation(name, "support", (int(l), int(k)), f"weight {w[l, k]:g} on a non-edge"))
        for l, k in np.argwhere(w < 0):
            report.append(Violation(name, "negative", (int(l), int(k)), f"weight {w[l, k]:g} < 0"))
        sums = w.sum(axis=0)
        for k in np.flatnonzero(np.abs(sums - 1.0) > tol):
            report.append(Violation(name, "column_sum", (int(k),), f"column sums to {sums[k]:.15g}"))
    return report


def write_edge_list(topology: NetworkTopology, path: str | Path) -> None:
    lines = [f"# n_nodes {topology.n_nodes}"]
    lines += [f"{l + 1} {k + 1}" for l, k in topology.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path: str | Path) -> NetworkTopology:
    """Parse an edge-list file written by :func:`write_edge_list`.

    Without a ``# n_nodes`` header the node count is the largest index seen.
    """
    n_nodes = None
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "n_nodes":
                n_nodes = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TopologyError(f"{path}:{lineno}: expected 'l k', got {raw!r}")
        l, k = int(parts[0]) - 1, int(parts[1]) - 1
        if l < 0 or k < 0:
            raise TopologyError(f"{path}:{lineno}: indices are 1-based")
        edges.append((l, k))
    if n_nodes is None:
        n_nodes = 1 + max((max(e) for e in edges), default=0)
    return topology_from_edges(n_nodes, edges)
