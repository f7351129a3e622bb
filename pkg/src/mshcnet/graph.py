"""K-nearest-neighbour pixel graphs and their normalised Laplacians."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor

FEATURE_SPACES = ("spectral", "spectral_spatial")


@dataclass
class GraphConfig:
    k: int = 10
    feature_space: str = "spectral"
    # multiplier on (row, col) coordinates in spectral_spatial mode
    spatial_scale: float = 0.1
    distance: str = "euclidean"
    max_nodes: int = 65536

    def validate(self, n: int | None = None) -> None:
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.feature_space not in FEATURE_SPACES:
            raise ConfigurationError(f"feature_space must be one of {FEATURE_SPACES}")
        if self.distance != "euclidean":
            raise ConfigurationError("only euclidean distance is supported")
        if n is not None and n <= self.k:
            raise ConfigurationError(f"need more than k={self.k} nodes, got n={n}")


@dataclass
class KnnGraph:
    n: int
    k: int
    neighbor_lists: list[np.ndarray]
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    laplacian_sym: sp.csr_matrix
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def closed_neighborhoods(self) -> np.ndarray:
        """n x (max_degree + 1) index matrix of N(i) ∪ {i}, ascending per row.

        Short rows are padded by repeating their last index; duplicates do not
        change a max and never precede a lower index.
        """
        if "closed" not in self._cache:
            width = int(self.degrees.max()) + 1
            out = np.empty((self.n, width), dtype=np.intp)
            for i, nb in enumerate(self.neighbor_lists):
                row = np.sort(np.append(nb, i))
                out[i, : row.size] = row
                out[i, row.size:] = row[-1]
            self._cache["closed"] = out
        return self._cache["closed"]

    def closed_adjacency(self) -> sp.csr_matrix:
        """A + I, used for neighbourhood sums."""
        if "a_plus_i" not in self._cache:
            self._cache["a_plus_i"] = (self.adjacency + sp.identity(self.n, format="csr")).tocsr()
        return self._cache["a_plus_i"]

    def propagation(self, mode: str = "laplacian") -> sp.csr_matrix:
        if mode == "laplacian":
            return self.laplacian_sym
        if mode == "renorm_adjacency":
            if "renorm" not in self._cache:
                a = self.closed_adjacency()
                d = np.asarray(a.sum(axis=1)).reshape(-1)
                s = sp.diags(1.0 / np.sqrt(d))
                self._cache["renorm"] = (s @ a @ s).tocsr()
            return self._cache["renorm"]
        if mode == "identity":
            return sp.identity(self.n, format="csr")
        raise ConfigurationError(f"unknown propagation mode {mode!r}")


def _as_array(features) -> np.ndarray:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features)
    return np.asarray(arr, dtype=np.float64)


def knn_indices(x: np.ndarray, k: int, chunk: int = 1024, margin: int = 8) -> np.ndarray:
    """Directed k nearest distinct neighbours per row, ties to the lower index.

    Candidates come from the expanded squared-distance formula; the final
    order is decided on exactly recomputed distances, so rounding in the
    expansion cannot reorder near-equal neighbours.
    """
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    m = min(n - 1, k + margin)
    out = np.empty((n, k), dtype=np.intp)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        d = sq[rows, None] + sq[None, :] - 2.0 * (x[rows] @ x.T)
        d[np.arange(rows.size), rows] = np.inf
        cand = np.argpartition(d, m - 1, axis=1)[:, :m] if m < n else np.argsort(d, axis=1)[:, :m]
        for r, i in enumerate(rows):
            c = cand[r]
            exact = np.sum((x[c] - x[i]) ** 2, axis=1)
            if m < n - 1 and np.sum(exact <= np.sort(exact)[k - 1]) == m:
                # every candidate ties the k-th distance: fall back to the full row
                c = np.delete(np.arange(n), i)
                exact = np.sum((x[c] - x[i]) ** 2, axis=1)
            order = np.lexsort((c, exact))
            out[i] = c[order[:k]]
    return out


def build_knn_graph(features, cfg: GraphConfig | None = None, coords=None) -> KnnGraph:
    cfg = cfg or GraphConfig()
    x = _as_array(features)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"features must be n x d with d >= 1, got {x.shape}")
    n = x.shape[0]
    cfg.validate(n)
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise DataError(f"non-finite feature value at pixel {int(np.flatnonzero(bad)[0])}")
    if cfg.feature_space == "spectral_spatial":
        if coords is None:
            raise ConfigurationError("spectral_spatial graphs need pixel coordinates")
        x = np.hstack([x, cfg.spatial_scale * np.asarray(coords, dtype=np.float64)])

    nbr = knn_indices(x, cfg.k)
    rows = np.repeat(np.arange(n), cfg.k)
    directed = sp.csr_matrix((np.ones(rows.size), (rows, nbr.reshape(-1))), shape=(n, n))
    adj = directed.maximum(directed.T).tocsr()
    adj.data[:] = 1.0
    adj.sort_indices()
    degrees = np.asarray(adj.sum(axis=1)).reshape(-1)
    lists = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].copy() for i in range(n)]
    return KnnGraph(
        n=n,
        k=cfg.k,
        neighbor_lists=lists,
        adjacency=adj,
        degrees=degrees,
        laplacian_sym=sym_normalized_laplacian(adj),
    )


def graph_from_edges(n: int, edges, k: int = 1) -> KnnGraph:
    """Graph from an explicit undirected edge list (fixtures and tests)."""
    e = np.asarray(list(edges), dtype=np.intp).reshape(-1, 2)
    a = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    a = a.maximum(a.T).tocsr()
    a.data[:] = 1.0
    a.setdiag(0)
    a.eliminate_zeros()
    a.sort_indices()
    degrees = np.asarray(a.sum(axis=1)).reshape(-1)
    lists = [a.indices[a.indptr[i]:a.indptr[i + 1]].copy() for i in range(n)]
    return KnnGraph(n, k, lists, a, degrees, sym_normalized_laplacian(a))


def sym_normalized_laplacian(graph_or_adjacency) -> sp.csr_matrix:
    """I - D^-1/2 A D^-1/2 with an exactly unit diagonal."""
    a = graph_or_adjacency.adjacency if isinstance(graph_or_adjacency, KnnGraph) else graph_or_adjacency
    a = sp.csr_matrix(a, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    if np.any(deg <= 0):
        raise DataError(f"isolated node {int(np.flatnonzero(deg <= 0)[0])}: degree 0 cannot be normalised")
    s = sp.diags(1.0 / np.sqrt(deg))
    lap = (sp.identity(a.shape[0], format="csr") - s @ a @ s).tocsr()
    lap.setdiag(1.0)
    lap.sort_indices()
    return lap


def spmv(mat: sp.spmatrix, x) -> Tensor:
    """Sparse matrix times dense tensor, differentiable in ``x``."""
    x = T.as_tensor(x)
    if x.ndim not in (1, 2) or mat.shape[1] != x.shape[0]:
        raise DimensionError(f"spmv: matrix {mat.shape} incompatible with tensor {x.shape}")
    mat = sp.csr_matrix(mat)
    dt = x.data.dtype
    m = mat.astype(dt) if mat.dtype != dt else mat
    mt = m.T.tocsr()
    return T.record_op(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))
