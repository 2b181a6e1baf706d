"""k-nearest-neighbour manifold graph with Gaussian kernel weights.

Each node keeps its own ``k`` out-edges (no symmetrisation). The bandwidth is
the single global median over all ``N*k`` retained edge distances and the
weight of an edge at distance ``r`` is ``exp(-r**2 / (2 * sigma**2))``.
"""

import csv
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import EmbeddingMatrix

__all__ = [
    "ManifoldGraph",
    "BatchEdges",
    "pairwise_distances",
    "build_knn_graph",
    "neighbor_batch",
    "write_graph",
    "read_graph",
    "export_graph_csv",
    "GraphError",
]

_MAGIC = b"MRSGRAPH"
_VERSION = 1
_RECORD = np.dtype([("neighbor", "<u4"), ("weight", "<f8"), ("distance", "<f8")])
_BLOCK_ELEMS = 1 << 22


class GraphError(ValueError):
    pass


def _as_array(H):
    if isinstance(H, EmbeddingMatrix):
        return H.values
    return np.asarray(H, dtype=np.float64)


def _sq_dist_block(Xb, X, sq_b, sq):
    """Squared distances between rows of ``Xb`` and all rows of ``X``.

    Uses the Gram expansion, then recomputes directly any entry small enough
    relative to the operand norms for the expansion to lose precision.
    """
    D2 = sq_b[:, None] + sq[None, :] - 2.0 * (Xb @ X.T)
    np.maximum(D2, 0.0, out=D2)
    risky = D2 <= 1e-8 * (sq_b[:, None] + sq[None, :])
    if risky.any():
        ii, jj = np.nonzero(risky)
        diff = Xb[ii] - X[jj]
        D2[ii, jj] = np.einsum("ij,ij->i", diff, diff)
    return D2


def _row_blocks(n):
    step = max(1, min(n, _BLOCK_ELEMS // n))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _map_blocks(fn, n, threads):
    """Apply ``fn(a, b)`` to every row block; blocks depend only on ``n``, never on ``threads``."""
    blocks = list(_row_blocks(n))
    if threads <= 1 or len(blocks) == 1:
        return [fn(a, b) for a, b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), blocks))


def pairwise_distances(H, threads=1):
    """Full symmetric N x N Euclidean distance matrix with an exact zero diagonal."""
    X = _as_array(H)
    if X.ndim != 2 or X.shape[0] < 2:
        raise GraphError("pairwise_distances needs an N x d matrix with N >= 2")
    n, d = X.shape
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((n, n))

    def block(a, b):
        out[a:b] = np.sqrt(_sq_dist_block(X[a:b], X, sq[a:b], sq))

    _map_blocks(block, n, threads)
    out = np.minimum(out, out.T)  # enforce exact symmetry
    np.fill_diagonal(out, 0.0)
    return out


@dataclass(frozen=True, eq=False)
class ManifoldGraph:
    """Directed k-NN graph: row ``i`` of ``neighbors``/``weights``/``distances`` are node i's out-edges."""

    neighbors: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    sigma: float

    def __post_init__(self):
        for name in ("neighbors", "weights", "distances"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.sigma > 0:
            raise GraphError("sigma must be > 0")

    @property
    def n_nodes(self):
        return self.neighbors.shape[0]

    @property
    def k(self):
        return self.neighbors.shape[1]

    def edges(self, i):
        """Out-edges of node ``i`` as ``(neighbor, weight, distance)`` tuples."""
        return [(int(j), float(w), float(r)) for j, w, r in zip(self.neighbors[i], self.weights[i], self.distances[i])]

    def __eq__(self, other):
        if not isinstance(other, ManifoldGraph):
            return NotImplemented
        return (
            self.sigma == other.sigma
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.distances, other.distances)
        )


def gaussian_weights(dist, sigma):
    w = np.exp(-np.square(dist) / (2.0 * sigma * sigma))
    # keep weights strictly positive even when the kernel underflows
    return np.maximum(w, np.finfo(np.float64).tiny)


def _knn_rows(D2_block, Xb, X, offset, k):
    """k nearest rows per block row (self excluded), ties broken by smaller column index.

    The Gram-expansion distances only shortlist candidates; the shortlist is
    re-ranked on directly computed squared differences so that exactly tied
    distances compare equal.
    """
    rows = np.arange(D2_block.shape[0])
    D2_block[rows, offset + rows] = np.inf
    part = np.partition(D2_block, k - 1, axis=1)[:, k - 1]
    slack = 1e-9 * part + 1e-300
    nbrs = np.empty((D2_block.shape[0], k), dtype=np.int64)
    for r in range(D2_block.shape[0]):
        cand = np.flatnonzero(D2_block[r] <= part[r] + slack[r])
        diff = X[cand] - Xb[r]
        exact = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((cand, exact))
        nbrs[r] = cand[order[:k]]
    return nbrs


def build_knn_graph(H, k, threads=1):
    """Build the directed k-NN graph over the rows of ``H``.

    Parameters
    ----------
    H : EmbeddingMatrix or array_like, shape (N, d)
    k : int
        Neighbours per node, ``1 <= k <= N - 1``.
    threads : int
        Worker threads over row blocks; the graph is identical for any value.

    Raises
    ------
    GraphError
        If ``k`` is out of range or every retained edge has zero length
        (the bandwidth would be zero).
    """
    X = _as_array(H)
    n, d = X.shape
    k = int(k)
    if not 1 <= k <= n - 1:
        raise GraphError(f"k must satisfy 1 <= k <= N-1 = {n - 1}, got {k}")
    sq = np.einsum("ij,ij->i", X, X)
    nbrs = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))

    def block(a, b):
        nbrs[a:b] = _knn_rows(_sq_dist_block(X[a:b], X, sq[a:b], sq), X[a:b], X, a, k)
        # retained edge lengths recomputed directly from coordinate differences
        for j in range(k):
            diff = X[a:b] - X[nbrs[a:b, j]]
            dist[a:b, j] = np.sqrt(np.einsum("ij,ij->i", diff, diff))

    _map_blocks(block, n, threads)
    sigma = float(np.median(dist))
    if sigma == 0.0:
        dup = np.argwhere(dist == 0.0)[:5]
        pairs = ", ".join(f"({i},{nbrs[i, j]})" for i, j in dup)
        raise GraphError(f"median neighbour distance is 0; duplicate rows include {pairs}")
    return ManifoldGraph(nbrs, gaussian_weights(dist, sigma), dist, sigma)


class BatchEdges(NamedTuple):
    """Edges leaving a batch.

    ``source`` indexes into the batch, ``target`` into ``neighbor_index`` (the
    deduplicated dataset rows of all neighbours), ``weight`` is the kernel weight.
    """

    source: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    neighbor_index: np.ndarray


def neighbor_batch(graph, batch_indices, counter=None):
    """Restrict the graph to out-edges of ``batch_indices``.

    Exactly ``B*k`` edges are returned. If ``counter`` (a mutable mapping) is
    given, ``counter["edges"]`` is incremented by the number of edges touched.
    """
    idx = np.asarray(batch_indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= graph.n_nodes):
        raise IndexError(f"batch index out of range [0, {graph.n_nodes})")
    nb = graph.neighbors[idx]
    uniq, inverse = np.unique(nb, return_inverse=True)
    B, k = nb.shape
    if counter is not None:
        counter["edges"] = counter.get("edges", 0) + B * k
    return BatchEdges(
        source=np.repeat(np.arange(B), k),
        target=inverse.reshape(-1),
        weight=graph.weights[idx].reshape(-1),
        neighbor_index=uniq,
    )


def write_graph(graph, path, provenance=None):
    """Binary serialisation: magic, version, n, k, sigma, JSON provenance, then per-edge records."""
    meta = json.dumps({"provenance": provenance} if provenance else {}, sort_keys=True).encode()
    rec = np.empty(graph.n_nodes * graph.k, dtype=_RECORD)
    rec["neighbor"] = graph.neighbors.reshape(-1)
    rec["weight"] = graph.weights.reshape(-1)
    rec["distance"] = graph.distances.reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQId", _VERSION, graph.n_nodes, graph.k, graph.sigma))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(rec.tobytes())


def read_graph(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise GraphError(f"{path}: not a graph file")
        version, n, k, sigma = struct.unpack("<IQId", fh.read(struct.calcsize("<IQId")))
        if version != _VERSION:
            raise GraphError(f"{path}: unsupported graph version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        fh.read(meta_len)
        rec = np.frombuffer(fh.read(), dtype=_RECORD)
    if rec.size != n * k:
        raise GraphError(f"{path}: expected {n * k} edge records, found {rec.size}")
    return ManifoldGraph(
        rec["neighbor"].astype(np.int64).reshape(n, k),
        rec["weight"].reshape(n, k).copy(),
        rec["distance"].reshape(n, k).copy(),
        sigma,
    )


def export_graph_csv(graph, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "weight", "distance"])
        for i in range(graph.n_nodes):
            for j, wt, r in graph.edges(i):
                w.writerow([i, j, "%.17g" % wt, "%.17g" % r])
