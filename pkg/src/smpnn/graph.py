"""Sparse graph storage, spectral operators, and synthetic generators.

Graphs are undirected, stored in canonical CSR form (sorted, duplicate-free
column indices per row, symmetric as a matrix). Degree-normalized adjacency,
normalized Laplacian, Dirichlet energy, subgraph induction, and multi-hop
neighbor sampling all operate on this representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import flops

__all__ = [
    "GraphError",
    "SparseGraph",
    "NormalizedAdjacency",
    "EnergyTrace",
    "build_graph",
    "normalize_adjacency",
    "normalized_laplacian",
    "dirichlet_energy",
    "spmm",
    "induced_subgraph",
    "neighbor_sample",
    "make_synthetic",
    "adjacency_eigenvalues",
    "laplacian_lambda_max",
    "num_components",
]

# Dense eigensolvers are only trustworthy (and affordable) at desk scale.
DENSE_SPECTRUM_CAP = 256


class GraphError(ValueError):
    """Structurally invalid graph input or operation."""


@dataclass(frozen=True)
class SparseGraph:
    """Immutable CSR matrix over ``num_nodes`` nodes.

    ``degrees[i]`` is the row sum of ``values`` at construction time; for a
    graph built by :func:`build_graph` this is the (weighted) degree of node
    ``i`` including any self loop. ``has_self_loops`` is True when at least
    one diagonal entry is stored.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    has_self_loops: bool
    degrees: np.ndarray

    def __post_init__(self):
        for arr in (self.row_offsets, self.col_indices, self.values, self.degrees):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    @cached_property
    def csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )
        return m

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def row_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(neighbor ids, edge values) of row ``i``."""
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def validate(self) -> None:
        """Raise GraphError if any CSR invariant is violated."""
        n, off, cols = self.num_nodes, self.row_offsets, self.col_indices
        if off.shape != (n + 1,) or off[0] != 0 or off[-1] != self.nnz:
            raise GraphError("row_offsets malformed")
        if np.any(np.diff(off) < 0):
            raise GraphError("row_offsets must be non-decreasing")
        if self.nnz and (cols.min() < 0 or cols.max() >= n):
            raise GraphError("column index out of range")
        for i in range(n):
            row = cols[off[i]:off[i + 1]]
            if row.size > 1 and np.any(np.diff(row) <= 0):
                raise GraphError(f"row {i} has unsorted or duplicate columns")
        if (self.csr != self.csr.T).nnz != 0:
            raise GraphError("matrix is not symmetric")
        row_sums = np.asarray(self.csr.sum(axis=1)).ravel()
        if not np.allclose(row_sums, self.degrees, rtol=0, atol=1e-12):
            raise GraphError("degrees do not match row sums")


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Adjacency rescaled entrywise to A_ij / sqrt(deg_i * deg_j).

    ``graph.degrees`` keeps the degrees of the source graph so the scaling
    remains auditable after the values are replaced.
    """

    graph: SparseGraph

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def nnz(self) -> int:
        return self.graph.nnz

    @property
    def csr(self) -> sp.csr_matrix:
        return self.graph.csr

    def to_dense(self) -> np.ndarray:
        return self.graph.to_dense()


@dataclass
class EnergyTrace:
    """Per-layer raw and normalized Dirichlet energy of a feature sequence."""

    per_layer_energy: np.ndarray
    per_layer_normalized: np.ndarray
    lambda_min: float
    lambda_max: float
    mode: str = ""
    classification: str = ""


def _from_csr(m: sp.csr_matrix, num_nodes: int) -> SparseGraph:
    m = m.copy()
    m.sum_duplicates()
    m.sort_indices()
    m.eliminate_zeros()
    degrees = np.asarray(m.sum(axis=1), dtype=np.float64).ravel()
    diag = m.diagonal()
    return SparseGraph(
        num_nodes=num_nodes,
        row_offsets=m.indptr.astype(np.int64),
        col_indices=m.indices.astype(np.int64),
        values=m.data.astype(np.float64),
        has_self_loops=bool(np.any(diag != 0.0)),
        degrees=degrees,
    )


def build_graph(edges, num_nodes: int, self_loop_policy: str = "add") -> SparseGraph:
    """Assemble a canonical undirected CSR graph from an edge list.

    ``edges`` is an iterable of (src, dst) or (src, dst, weight); each entry
    is symmetrized. ``self_loop_policy``:

    * ``"add"``: a unit self loop is ensured on every node (an explicit self
      loop with weight != 1 conflicts and raises).
    * ``"keep_as_given"``: only self loops present in the input are kept.

    Raises GraphError on out-of-range endpoints or on the same undirected
    edge appearing twice with different weights.
    """
    if self_loop_policy not in ("add", "keep_as_given"):
        raise GraphError(f"unknown self_loop_policy {self_loop_policy!r}")
    edges = list(edges)
    if edges:
        arr = np.asarray(edges, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] not in (2, 3):
            raise GraphError("edges must be (src, dst) or (src, dst, weight) tuples")
        src = arr[:, 0].astype(np.int64)
        dst = arr[:, 1].astype(np.int64)
        w = arr[:, 2] if arr.shape[1] == 3 else np.ones(len(arr))
        if not np.array_equal(arr[:, 0], src) or not np.array_equal(arr[:, 1], dst):
            raise GraphError("edge endpoints must be integers")
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    if len(src) and (src.min() < 0 or dst.min() < 0 or src.max() >= num_nodes or dst.max() >= num_nodes):
        bad = np.flatnonzero((src < 0) | (dst < 0) | (src >= num_nodes) | (dst >= num_nodes))[0]
        raise GraphError(f"edge {bad} has endpoint out of range [0, {num_nodes})")

    # Deduplicate undirected pairs; identical duplicates collapse, weight
    # conflicts are an error.
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    key = lo * num_nodes + hi
    order = np.argsort(key, kind="stable")
    key_s, w_s = key[order], w[order]
    uniq_key, start = np.unique(key_s, return_index=True)
    group_end = np.append(start[1:], len(key_s))
    for k, s, e in zip(uniq_key, start, group_end):
        if e - s > 1 and not np.all(w_s[s:e] == w_s[s]):
            i, j = divmod(int(k), num_nodes)
            raise GraphError(f"conflicting weights for undirected edge ({i}, {j})")
    u_lo = (uniq_key // num_nodes).astype(np.int64)
    u_hi = (uniq_key % num_nodes).astype(np.int64)
    u_w = w_s[start]

    is_loop = u_lo == u_hi
    if self_loop_policy == "add":
        if np.any(is_loop & (u_w != 1.0)):
            i = int(u_lo[np.flatnonzero(is_loop & (u_w != 1.0))[0]])
            raise GraphError(f"self loop on node {i} conflicts with policy 'add' (weight must be 1)")
        u_lo, u_hi, u_w = u_lo[~is_loop], u_hi[~is_loop], u_w[~is_loop]
        loop_ids = np.arange(num_nodes, dtype=np.int64)
        rows = np.concatenate([u_lo, u_hi, loop_ids])
        cols = np.concatenate([u_hi, u_lo, loop_ids])
        vals = np.concatenate([u_w, u_w, np.ones(num_nodes)])
    else:
        off_lo, off_hi, off_w = u_lo[~is_loop], u_hi[~is_loop], u_w[~is_loop]
        rows = np.concatenate([off_lo, off_hi, u_lo[is_loop]])
        cols = np.concatenate([off_hi, off_lo, u_lo[is_loop]])
        vals = np.concatenate([off_w, off_w, u_w[is_loop]])

    m = sp.csr_matrix((vals, (rows, cols)), shape=(num_nodes, num_nodes))
    return _from_csr(m, num_nodes)


def normalize_adjacency(g: SparseGraph) -> NormalizedAdjacency:
    """Rescale every entry to A_ij / sqrt(deg_i * deg_j).

    The source graph is left untouched. Raises GraphError naming the first
    node whose degree is not strictly positive.
    """
    bad = np.flatnonzero(g.degrees <= 0.0)
    if bad.size:
        raise GraphError(f"node {int(bad[0])} has degree {g.degrees[bad[0]]}; cannot normalize")
    dinv = 1.0 / np.sqrt(g.degrees)
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.row_offsets))
    new_values = g.values * dinv[rows] * dinv[g.col_indices]
    scaled = SparseGraph(
        num_nodes=g.num_nodes,
        row_offsets=g.row_offsets.copy(),
        col_indices=g.col_indices.copy(),
        values=new_values,
        has_self_loops=g.has_self_loops,
        degrees=g.degrees.copy(),
    )
    return NormalizedAdjacency(scaled)


def normalized_laplacian(g: SparseGraph) -> SparseGraph:
    """I - A_norm as a sparse symmetric matrix.

    The result is a generic CSR container: its ``degrees`` field holds the
    row sums of the Laplacian values, not node degrees.
    """
    a = normalize_adjacency(g)
    lap = (sp.identity(g.num_nodes, format="csr") - a.csr).tocsr()
    return _from_csr(lap, g.num_nodes)


def dirichlet_energy(g: SparseGraph, x: np.ndarray) -> float:
    """Half the weighted sum over ordered edge pairs of the squared
    degree-scaled feature difference.

    Each undirected edge contributes once per direction; self-loop terms are
    identically zero and skipped. Equals trace(X^T L_norm X) for the same
    graph.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != g.num_nodes:
        raise GraphError(f"feature rows {x.shape[0]} != num_nodes {g.num_nodes}")
    if g.nnz == 0:
        return 0.0
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.row_offsets))
    cols = g.col_indices
    mask = rows != cols
    rows, cols, vals = rows[mask], cols[mask], g.values[mask]
    touched = np.zeros(g.num_nodes, dtype=bool)
    touched[rows] = True
    if np.any(g.degrees[touched] <= 0.0):
        bad = int(np.flatnonzero(touched & (g.degrees <= 0.0))[0])
        raise GraphError(f"node {bad} has non-positive degree but incident edges")
    y = x / np.sqrt(np.where(g.degrees > 0.0, g.degrees, 1.0))[:, None]
    diffs = y[cols] - y[rows]
    return float(0.5 * np.sum(vals * np.einsum("ij,ij->i", diffs, diffs)))


def spmm(a: NormalizedAdjacency, x: np.ndarray) -> np.ndarray:
    """Exact sparse-dense product A_norm @ X; counts 2*nnz*D message FLOPs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != a.num_nodes:
        raise GraphError(f"feature rows {x.shape[0]} != num_nodes {a.num_nodes}")
    flops.add("spmm", 2 * a.nnz * x.shape[1])
    return a.csr @ x


def induced_subgraph(g: SparseGraph, nodes) -> tuple[SparseGraph, np.ndarray]:
    """Subgraph over ``nodes`` with compact ids 0..k-1.

    Keeps exactly the edges whose endpoints are both selected; degrees are
    recomputed on the subgraph. Returns (subgraph, original_ids) where
    ``original_ids[new_id]`` is the source node id.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.ndim != 1 or nodes.size == 0:
        raise GraphError("node list must be a non-empty 1-D sequence")
    if np.unique(nodes).size != nodes.size:
        raise GraphError("node list contains duplicates")
    if nodes.min() < 0 or nodes.max() >= g.num_nodes:
        raise GraphError("node id out of range")
    sub = g.csr[nodes][:, nodes].tocsr()
    return _from_csr(sub, len(nodes)), nodes.copy()


def neighbor_sample(
    g: SparseGraph, seeds, fanouts, rng_seed: int = 0
) -> tuple[SparseGraph, np.ndarray]:
    """Multi-hop uniform neighbor sampling around ``seeds``.

    At hop h every frontier node contributes min(fanout_h, #neighbors)
    distinct neighbors drawn uniformly without replacement (self loops are
    not sampling candidates). Returns the induced subgraph over the union of
    seeds and sampled nodes, plus the original node ids. Deterministic for a
    fixed ``rng_seed``.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.size == 0:
        raise GraphError("seed set must be non-empty")
    fanouts = list(fanouts)
    if not fanouts:
        raise GraphError("fanouts must be non-empty")
    rng = np.random.default_rng(rng_seed)
    selected = set(int(s) for s in seeds)
    frontier = sorted(selected)
    for fanout in fanouts:
        new_nodes: set[int] = set()
        for node in frontier:
            nbrs, _ = g.row_slice(node)
            nbrs = nbrs[nbrs != node]
            if nbrs.size == 0:
                continue
            k = min(int(fanout), nbrs.size)
            picked = rng.choice(nbrs, size=k, replace=False)
            for p in picked:
                p = int(p)
                if p not in selected:
                    new_nodes.add(p)
        selected.update(new_nodes)
        frontier = sorted(new_nodes)
        if not frontier:
            break
    nodes = np.array(sorted(selected), dtype=np.int64)
    return induced_subgraph(g, nodes)


# ---------------------------------------------------------------------------
# Synthetic graphs
# ---------------------------------------------------------------------------

def _complete_edges(n):
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1)


def _path_edges(n):
    i = np.arange(n - 1)
    return np.stack([i, i + 1], axis=1)


def _cycle_edges(n):
    i = np.arange(n)
    return np.stack([i, (i + 1) % n], axis=1)


def _er_edges(n, p, rng):
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"edge probability {p} outside [0, 1]")
    i, j = np.triu_indices(n, k=1)
    keep = rng.random(i.size) < p
    return np.stack([i[keep], j[keep]], axis=1)


def _gnm_edges(n, num_edges, rng):
    max_edges = n * (n - 1) // 2
    if num_edges > max_edges:
        raise GraphError(f"requested {num_edges} edges exceeds maximum {max_edges}")
    # Sample pair codes with a surplus, deduplicate, trim. Deterministic per
    # rng; retries only for pathological densities.
    want = num_edges
    codes = np.zeros(0, dtype=np.int64)
    while codes.size < want:
        draw = rng.integers(0, max_edges, size=int(1.2 * (want - codes.size)) + 16)
        codes = np.unique(np.concatenate([codes, draw]))
    codes = codes[rng.permutation(codes.size)[:want]]
    # Decode upper-triangle index: row r is the largest r with offset <= code.
    # offsets[r] = r*n - r*(r+1)/2 edges precede row r.
    r = np.arange(n, dtype=np.int64)
    offsets = r * n - r * (r + 1) // 2
    rows = np.searchsorted(offsets, codes, side="right") - 1
    cols = codes - offsets[rows] + rows + 1
    return np.stack([rows, cols], axis=1)


def _sbm_edges(blocks, block_size, p_in, p_out, rng):
    if not (0.0 <= p_out <= 1.0 and 0.0 < p_in <= 1.0):
        raise GraphError("SBM probabilities outside valid range")
    if p_in <= p_out:
        raise GraphError(f"SBM requires p_in > p_out, got {p_in} <= {p_out}")
    n = blocks * block_size
    labels = np.repeat(np.arange(blocks), block_size)
    i, j = np.triu_indices(n, k=1)
    same = labels[i] == labels[j]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(i.size) < prob
    return np.stack([i[keep], j[keep]], axis=1), labels


def make_synthetic(
    kind: str,
    *,
    num_nodes: int | None = None,
    seed: int = 0,
    self_loop_policy: str = "add",
    feature_dim: int = 8,
    blocks: int = 4,
    block_size: int | None = None,
    p_in: float = 0.05,
    p_out: float = 0.01,
    separation: float = 2.0,
    noise_scales=None,
    p: float | None = None,
    num_edges: int | None = None,
) -> tuple[SparseGraph, np.ndarray, np.ndarray]:
    """Seeded synthetic (graph, features, labels) triples.

    Kinds: ``complete``, ``path``, ``cycle``, ``erdos_renyi`` (either edge
    probability ``p`` or an exact ``num_edges``), ``sbm`` (planted blocks
    with Gaussian class-mean features; labels are block ids). SBM noise is
    unit by default; ``noise_scales`` gives each class its own noise std.
    For non-SBM kinds the features are standard normal and labels are all
    zero.
    """
    rng = np.random.default_rng(seed)
    if kind == "sbm":
        if block_size is None:
            if num_nodes is None:
                raise GraphError("sbm needs block_size or num_nodes")
            block_size = num_nodes // blocks
        if feature_dim < blocks:
            raise GraphError(f"feature_dim {feature_dim} < blocks {blocks}")
        edges, labels = _sbm_edges(blocks, block_size, p_in, p_out, rng)
        n = blocks * block_size
        means = np.zeros((blocks, feature_dim))
        means[np.arange(blocks), np.arange(blocks)] = separation
        if noise_scales is None:
            scales = np.ones(blocks)
        else:
            scales = np.asarray(noise_scales, dtype=np.float64)
            if scales.shape != (blocks,) or np.any(scales <= 0):
                raise GraphError("noise_scales must give one positive std per block")
        features = means[labels] + rng.standard_normal((n, feature_dim)) * scales[labels][:, None]
    else:
        if num_nodes is None:
            raise GraphError(f"{kind} needs num_nodes")
        n = num_nodes
        if kind == "complete":
            edges = _complete_edges(n)
        elif kind == "path":
            edges = _path_edges(n)
        elif kind == "cycle":
            edges = _cycle_edges(n)
        elif kind == "erdos_renyi":
            if num_edges is not None:
                edges = _gnm_edges(n, num_edges, rng)
            elif p is not None:
                edges = _er_edges(n, p, rng)
            else:
                raise GraphError("erdos_renyi needs p or num_edges")
        else:
            raise GraphError(f"unknown synthetic kind {kind!r}")
        labels = np.zeros(n, dtype=np.int64)
        features = rng.standard_normal((n, feature_dim))
    g = build_graph(edges, n, self_loop_policy=self_loop_policy)
    return g, features, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Spectral helpers
# ---------------------------------------------------------------------------

def adjacency_eigenvalues(a: NormalizedAdjacency | SparseGraph) -> np.ndarray:
    """Ascending eigenvalues via a dense symmetric solve (N <= 256 only)."""
    g = a.graph if isinstance(a, NormalizedAdjacency) else a
    if g.num_nodes > DENSE_SPECTRUM_CAP:
        raise GraphError(f"dense spectrum capped at N <= {DENSE_SPECTRUM_CAP}, got {g.num_nodes}")
    return np.linalg.eigvalsh(g.to_dense())


def laplacian_lambda_max(g: SparseGraph) -> float:
    """Largest eigenvalue of the normalized Laplacian."""
    lap = normalized_laplacian(g)
    if g.num_nodes <= DENSE_SPECTRUM_CAP:
        return float(np.linalg.eigvalsh(lap.to_dense())[-1])
    from scipy.sparse.linalg import eigsh

    val = eigsh(lap.csr, k=1, which="LA", return_eigenvectors=False)
    return float(val[0])


def num_components(g: SparseGraph) -> int:
    count, _ = connected_components(g.csr, directed=False)
    return int(count)
