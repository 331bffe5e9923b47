"""Spatial adjacency structures for intrinsic CAR fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class GraphError(ValueError):
    """Raised for malformed or unusable adjacency input."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected, connected, unweighted region graph.

    ``edges`` is an ``(m, 2)`` integer array with ``i < j`` in each row,
    sorted lexicographically. ``labels`` maps dense index -> original id.
    """

    n_regions: int
    edges: np.ndarray
    labels: tuple[str, ...] = field(default=())
    neighbor_counts: np.ndarray = field(init=False, repr=False, compare=False)
    neighbors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.n_regions < 1:
            raise GraphError("graph needs at least one region")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed")
        if edges.size and (edges.min() < 0 or edges.max() >= self.n_regions):
            raise GraphError("edge index out of range")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if not self.labels:
            object.__setattr__(
                self, "labels", tuple(str(i) for i in range(self.n_regions))
            )
        elif len(self.labels) != self.n_regions:
            raise GraphError("labels length does not match n_regions")

        ncomp, comp = csgraph.connected_components(self.adjacency_matrix(), directed=False)
        if ncomp != 1:
            groups = [
                [self.labels[i] for i in np.flatnonzero(comp == c)] for c in range(ncomp)
            ]
            raise GraphError(
                f"graph has {ncomp} components; ICAR centering needs one: {groups}"
            )

        counts = np.bincount(edges.ravel(), minlength=self.n_regions)
        counts.setflags(write=False)
        object.__setattr__(self, "neighbor_counts", counts)
        nbrs = [[] for _ in range(self.n_regions)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(
            self, "neighbors", tuple(np.array(sorted(nb), dtype=np.int64) for nb in nbrs)
        )

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def adjacency_matrix(self) -> sparse.csr_matrix:
        """Symmetric 0/1 matrix ``A`` with ``A[i, j] = w_ij``."""
        n = self.n_regions
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    def precision_structure(self) -> np.ndarray:
        """Dense ``H - A``; only meant for small graphs and checks."""
        A = self.adjacency_matrix().toarray()
        return np.diag(A.sum(axis=1)) - A

    def coloring(self) -> np.ndarray:
        """Greedy proper vertex coloring (largest degree first).

        Regions sharing a color have no edge between them, so their
        single-site ICAR updates can be done in one vectorized step.
        """
        order = np.argsort(-self.neighbor_counts, kind="stable")
        color = np.full(self.n_regions, -1, dtype=np.int64)
        for i in order:
            used = {color[j] for j in self.neighbors[i]}
            c = 0
            while c in used:
                c += 1
            color[i] = c
        return color

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise GraphError(f"unknown region id {label!r}") from None


def build_grid_adjacency(rows: int, cols: int) -> AdjacencyGraph:
    """Rook-neighbor lattice; cell ``(r, c)`` has index ``r * cols + c``."""
    if rows < 1 or cols < 1 or (rows < 2 and cols < 2):
        raise GraphError(f"invalid grid dimensions {rows}x{cols}")
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    edges = np.concatenate([horiz, vert])
    labels = tuple(f"g{r}_{c}" for r in range(rows) for c in range(cols))
    return AdjacencyGraph(rows * cols, edges, labels)


def _parse_edge_lines(lines: Iterable[str]) -> list[tuple[str, str, int]]:
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected two region ids, got {line!r}")
        if parts[0] == parts[1]:
            raise GraphError(f"line {lineno}: self-loop on region {parts[0]!r}")
        pairs.append((parts[0], parts[1], lineno))
    return pairs


def load_adjacency(source: TextIO | Iterable[str], labels: Iterable[str] | None = None) -> AdjacencyGraph:
    """Read a whitespace-separated edge list.

    Region ids are arbitrary strings. Without ``labels`` the dense index
    follows first appearance in the file; pass ``labels`` to fix the order
    (every id in the file must then be one of them).
    """
    pairs = _parse_edge_lines(source)
    if labels is not None:
        order = list(labels)
        if len(set(order)) != len(order):
            raise GraphError("duplicate region labels")
        index = {lab: k for k, lab in enumerate(order)}
        for a, b, lineno in pairs:
            for lab in (a, b):
                if lab not in index:
                    raise GraphError(f"line {lineno}: unknown region id {lab!r}")
    else:
        index = {}
        order = []
        for a, b, _ in pairs:
            for lab in (a, b):
                if lab not in index:
                    index[lab] = len(order)
                    order.append(lab)
    if not order:
        raise GraphError("edge list is empty")
    edges = np.array([(index[a], index[b]) for a, b, _ in pairs], dtype=np.int64).reshape(-1, 2)
    return AdjacencyGraph(len(order), edges, tuple(order))


def write_adjacency(graph: AdjacencyGraph, stream: TextIO) -> None:
    stream.write("# region_a region_b\n")
    for i, j in graph.edges:
        stream.write(f"{graph.labels[i]} {graph.labels[j]}\n")
