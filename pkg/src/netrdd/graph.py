"""Networks, interference sets and dependency graphs.

All containers here are immutable once built.  Sparse structures are held as
CSR arrays (``indptr``/``indices``) so that bounded-degree graphs with very
many units fit comfortably in memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Network",
    "InterferenceSets",
    "DependencyGraph",
    "GraphError",
    "interference_from_network",
    "interference_from_clusters",
    "dependency_graph",
    "degree_diagnostics",
    "read_edge_list",
]

DEPENDENCY_MODES = ("overlap", "k_hop", "cluster_block", "identity")


class GraphError(ValueError):
    """Invalid network, cluster or dependency-graph input."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Network:
    """Undirected simple graph on ``n`` units, stored as a symmetric CSR matrix."""

    n: int
    adjacency: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        a = self.adjacency
        if a.shape != (self.n, self.n):
            raise GraphError(f"adjacency shape {a.shape} does not match n={self.n}")
        if a.diagonal().any():
            raise GraphError("adjacency has self-loops")
        if (a != a.T).nnz:
            raise GraphError("adjacency is not symmetric")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Network":
        """Build from an iterable of ``(i, j)`` pairs; duplicates are merged."""
        e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError(f"edge index outside [0, {n})")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loop in edge list")
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
        a.data[:] = 1
        a.sort_indices()
        return cls(n, a)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def edges(self) -> np.ndarray:
        """Array of ``(i, j)`` pairs with ``i < j``."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        return np.column_stack([coo.row, coo.col])


@dataclass(frozen=True)
class InterferenceSets:
    """Per-unit sorted lists of interfering units in CSR layout.

    ``clusters`` is carried along when the sets were built from cluster
    labels, so that cluster-block dependency graphs and cluster-robust
    variances can be formed later.
    """

    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    clusters: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        _freeze(self.indptr)
        _freeze(self.indices)
        n = self.n
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphError("interference set index outside [0, n)")
        owner = np.repeat(np.arange(n), np.diff(self.indptr))
        if np.any(owner == self.indices):
            raise GraphError("a unit may not belong to its own interference set")
        if self.clusters is not None:
            if len(self.clusters) != n:
                raise GraphError("cluster labels length does not match n")
            _freeze(self.clusters)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def as_lists(self) -> list[list[int]]:
        return [self[i].tolist() for i in range(self.n)]

    def membership(self) -> sp.csr_matrix:
        """0/1 matrix with row ``i`` marking ``S_i``."""
        n = self.n
        data = np.ones(self.indices.size, dtype=np.int8)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def subset(self, keep: np.ndarray) -> "InterferenceSets":
        """Restrict to units ``keep`` (in order), dropping members not kept."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        lists = []
        for i in keep:
            m = remap[self[i]]
            lists.append(np.sort(m[m >= 0]))
        clusters = None if self.clusters is None else self.clusters[keep]
        return InterferenceSets.from_lists(lists, clusters=clusters)

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]], clusters=None) -> "InterferenceSets":
        sizes = np.fromiter((len(s) for s in lists), dtype=np.int64, count=len(lists))
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(sizes, out=indptr[1:])
        if indptr[-1]:
            indices = np.concatenate([np.sort(np.asarray(s, dtype=np.int64)) for s in lists])
        else:
            indices = np.zeros(0, dtype=np.int64)
        return cls(indptr, indices, None if clusters is None else np.asarray(clusters))


@dataclass(frozen=True)
class DependencyGraph:
    """Symmetric 0/1 matrix with unit diagonal; ``W[i, j] = 1`` marks possible dependence."""

    w: sp.csr_matrix = field(repr=False)
    mode: str = "overlap"

    def __post_init__(self):
        w = self.w
        if w.shape[0] != w.shape[1]:
            raise GraphError("dependency graph must be square")
        if not np.all(w.diagonal() == 1):
            raise GraphError("dependency graph must have unit diagonal")
        if (w != w.T).nnz:
            raise GraphError("dependency graph must be symmetric")

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        """``|N_i|``, counting ``i`` itself."""
        return np.diff(self.w.indptr)

    def restrict(self, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
        return self.w[rows][:, cols]


def interference_from_network(net: Network) -> InterferenceSets:
    """``S_i`` is the set of network neighbours of ``i``."""
    a = net.adjacency
    return InterferenceSets(a.indptr.astype(np.int64).copy(), a.indices.astype(np.int64).copy())


def _group_codes(keys: Sequence[Sequence[Hashable]]) -> np.ndarray:
    codes: dict[tuple, int] = {}
    return np.array([codes.setdefault(tuple(k), len(codes)) for k in keys], dtype=np.int64)


def interference_from_clusters(labels: Sequence[Hashable], strata: Sequence | None = None) -> InterferenceSets:
    """Units sharing a cluster label (and the stratum key, if given) interfere.

    ``strata`` holds one key per unit; use tuples to intersect several
    stratum columns, e.g. ``[("grade3", "f"), ...]``.
    """
    labels = list(labels)
    n = len(labels)
    if strata is None:
        keys = [(lab,) for lab in labels]
    else:
        strata = list(strata)
        if len(strata) != n:
            raise GraphError("strata length does not match labels")
        keys = [(labels[i], strata[i]) for i in range(n)]
    codes = _group_codes(keys)
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    lists: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * n
    for grp in np.split(order, bounds):
        grp = np.sort(grp)
        for i in grp:
            lists[i] = grp[grp != i]
    return InterferenceSets.from_lists(lists, clusters=codes)


def _closed_neighborhood(sets: InterferenceSets) -> sp.csr_matrix:
    m = sets.membership().astype(np.int64)
    return (m + sp.identity(sets.n, dtype=np.int64, format="csr")).tocsr()


def _binarize(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.data = np.ones_like(m.data, dtype=np.int8)
    m.eliminate_zeros()
    m.sort_indices()
    return m.astype(np.int8)


def dependency_graph(sets: InterferenceSets, mode: str = "overlap", k: int = 2,
                     clusters: Sequence | None = None) -> DependencyGraph:
    """Build the dependency graph ``W`` from interference sets.

    Parameters
    ----------
    sets : InterferenceSets
    mode : {"overlap", "k_hop", "cluster_block", "identity"}
        ``overlap`` links ``i`` and ``j`` when ``{i} ∪ S_i`` and ``{j} ∪ S_j``
        intersect.  ``k_hop`` links units within graph distance ``k`` of the
        (symmetrised) interference graph.  ``cluster_block`` links units with
        the same cluster label.  ``identity`` assumes independence.
    k : int
        Hop count for ``k_hop``.
    clusters : sequence, optional
        Cluster labels for ``cluster_block``; defaults to ``sets.clusters``.
    """
    n = sets.n
    if mode == "identity":
        w = sp.identity(n, dtype=np.int8, format="csr")
    elif mode == "overlap":
        c = _closed_neighborhood(sets)
        w = c @ c.T
    elif mode == "k_hop":
        if k < 1:
            raise GraphError("k_hop requires k >= 1")
        a = sets.membership().astype(np.int64)
        step = _binarize(a + a.T + sp.identity(n, dtype=np.int64, format="csr")).astype(np.int64)
        w = step
        for _ in range(k - 1):
            w = _binarize(w @ step).astype(np.int64)
    elif mode == "cluster_block":
        labels = clusters if clusters is not None else sets.clusters
        if labels is None:
            raise GraphError("cluster_block mode requires cluster labels")
        codes = _group_codes([(x,) for x in labels])
        ind = sp.csr_matrix((np.ones(n, dtype=np.int64), (np.arange(n), codes)), shape=(n, codes.max() + 1 if n else 0))
        w = ind @ ind.T
    else:
        raise GraphError(f"unknown dependency-graph mode {mode!r}; expected one of {DEPENDENCY_MODES}")
    return DependencyGraph(_binarize(w), mode)


def degree_diagnostics(w: DependencyGraph) -> dict[str, float]:
    """Degree moments bounding the amount of dependence.

    Returns ``mean_degree`` (mean ``|N_i|``), ``third_moment``
    (``n⁻¹ Σ |N_i|³``) and ``mean_walks3`` (``n⁻¹ Σ_i Σ_{j≠i} (W³)_ij``).
    """
    m = w.w.astype(np.float64)
    n = w.n
    deg = w.degrees.astype(np.float64)
    ones = np.ones(n)
    row_w3 = m @ (m @ (m @ ones))
    w2 = m @ m
    diag_w3 = np.asarray(w2.multiply(m.T).sum(axis=1)).ravel()
    return {
        "mean_degree": float(deg.mean()),
        "third_moment": float(np.mean(deg ** 3)),
        "mean_walks3": float(np.sum(row_w3 - diag_w3) / n),
    }


def read_edge_list(path: str | Path, n: int | None = None, ids: Sequence | None = None) -> Network:
    """Read a whitespace-separated ``i j`` edge list.

    With ``ids`` given, tokens are matched against those unit ids (as strings)
    and mapped to their positions; otherwise tokens are 0-based integer
    indices below ``n``.  Errors name the offending line.
    """
    lookup = None if ids is None else {str(v): k for k, v in enumerate(ids)}
    if lookup is not None:
        n = len(lookup)
    if n is None:
        raise GraphError("either n or ids must be given")
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected two fields, got {len(parts)}")
            try:
                if lookup is not None:
                    i, j = lookup[parts[0]], lookup[parts[1]]
                else:
                    i, j = int(parts[0]), int(parts[1])
            except (KeyError, ValueError):
                raise GraphError(f"{path}:{lineno}: unknown unit id in edge {parts[0]!r} {parts[1]!r}") from None
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"{path}:{lineno}: edge ({i}, {j}) references an index outside [0, {n})")
            if i == j:
                raise GraphError(f"{path}:{lineno}: self-loop on unit {parts[0]!r}")
            edges.append((i, j))
    return Network.from_edges(n, edges)
