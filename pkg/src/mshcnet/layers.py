"""Graph convolution, neighbour max-pooling, second-order pooling and the
convolutional block used by the raster streams."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .graph import KnnGraph, spmv
from .tensor import BatchNorm, Tensor

SQRT_EPS = 1e-4


@dataclass
class Linear:
    W: Tensor
    b: Tensor | None = None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.W)
        return y if self.b is None else T.add(y, self.b)


@dataclass
class GraphConvLayer:
    W: Tensor
    b: Tensor
    bn: BatchNorm | None = None


@dataclass
class ConvBlock:
    kernel: Tensor
    bias: Tensor
    bn: BatchNorm
    pool: bool = True
    activation: str = "relu"

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


@dataclass
class SecondOrderDescriptor:
    matrix: Tensor
    vectorized: Tensor


def _check_nodes(h: Tensor, graph: KnnGraph, opname: str) -> None:
    if h.ndim != 2 or h.shape[0] != graph.n:
        raise DimensionError(f"{opname}: features {h.shape} do not match graph with {graph.n} nodes")


def graph_conv_forward(
    h, layer: GraphConvLayer, graph: KnnGraph, training: bool = True, propagation: str = "laplacian"
) -> Tensor:
    """BN, propagate with the graph operator, then dense weights and a shared bias."""
    h = T.as_tensor(h)
    _check_nodes(h, graph, "graph_conv_forward")
    if layer.bn is not None:
        h = T.batch_norm(h, layer.bn, training=training)
    z = spmv(graph.propagation(propagation), h)
    return T.add(T.matmul(z, layer.W), layer.b)


def graph_neighbor_maxpool(h, graph: KnnGraph, rows=None) -> Tensor:
    """Per-node channelwise max over the closed neighbourhood N(i) ∪ {i}.

    Gradient goes to the lowest node index among tied maximisers.  With
    ``rows`` only those nodes are pooled (output has one row per entry).
    """
    h = T.as_tensor(h)
    _check_nodes(h, graph, "graph_neighbor_maxpool")
    idx = graph.closed_neighborhoods()
    if rows is not None:
        idx = idx[np.asarray(rows, dtype=np.intp)]
    cand = h.data[idx]  # r x width x c
    arg = np.argmax(cand, axis=1)
    src = np.take_along_axis(idx[:, :, None], arg[:, None, :], axis=1)[:, 0, :]
    out = np.take_along_axis(cand, arg[:, None, :], axis=1)[:, 0, :]
    cols = np.broadcast_to(np.arange(h.shape[1]), src.shape)

    def bw(g):
        full = np.zeros_like(h.data)
        np.add.at(full, (src, cols), g)
        return (full,)

    return T.record_op(out, (h,), bw)


def gram(h) -> Tensor:
    """Raw second-order product HᵀH."""
    h = T.as_tensor(h)
    return T.matmul(T.transpose(h), h)


def row_outer(h) -> Tensor:
    """n x f  ->  n x f² of per-row outer products h_i h_iᵀ (row-major)."""
    h = T.as_tensor(h)
    n, f = h.shape
    outer = T.mul(T.reshape(h, (n, f, 1)), T.reshape(h, (n, 1, f)))
    return T.reshape(outer, (n, f * f))


def sop(h_first) -> SecondOrderDescriptor:
    h_first = T.as_tensor(h_first)
    if h_first.ndim != 2 or h_first.shape[0] < 1:
        raise DimensionError(f"sop: need an m x c matrix with m >= 1, got {h_first.shape}")
    m, c = h_first.shape
    mat = T.signed_sqrt(T.div(gram(h_first), float(m)), SQRT_EPS)
    return SecondOrderDescriptor(mat, T.reshape(mat, (c * c,)))


def gsop(h_nodes, graph: KnnGraph, mode: str = "per_node", rows=None) -> Tensor:
    """Graph second-order pooling.

    ``global`` returns one f² vector for the whole graph; ``per_node`` returns
    an n x f² matrix whose row i pools the closed neighbourhood of node i
    (only the nodes in ``rows``, if given).
    """
    h = T.as_tensor(h_nodes)
    _check_nodes(h, graph, "gsop")
    if mode == "global":
        # canonical row order makes the sum bitwise independent of node numbering
        order = np.lexsort(h.data.T[::-1])
        return sop(T.take_rows(h, order)).vectorized
    if mode != "per_node":
        raise ConfigurationError(f"gsop mode must be 'global' or 'per_node', got {mode!r}")
    pool = graph.closed_adjacency()
    counts = graph.degrees + 1.0
    if rows is not None:
        rows = np.asarray(rows, dtype=np.intp)
        pool, counts = pool[rows], counts[rows]
    pooled = spmv(pool, row_outer(h))
    return T.signed_sqrt(T.div(pooled, counts.astype(h.data.dtype)[:, None]), SQRT_EPS)


@lru_cache(maxsize=16)
def patch_matrix(n_rows: int, n_cols: int, radius: int) -> sp.csr_matrix:
    """0/1 matrix whose row i marks the in-raster pixels of the square patch around pixel i."""
    r, c = np.divmod(np.arange(n_rows * n_cols), n_cols)
    src, dst = [], []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            rr, cc = r + dr, c + dc
            ok = (rr >= 0) & (rr < n_rows) & (cc >= 0) & (cc < n_cols)
            src.append(np.flatnonzero(ok))
            dst.append(rr[ok] * n_cols + cc[ok])
    src, dst = np.concatenate(src), np.concatenate(dst)
    n = n_rows * n_cols
    m = sp.csr_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
    m.sort_indices()
    return m


def patch_sop(raster, radius: int = 2, rows=None) -> Tensor:
    """Per-pixel SOP over the (2r+1)² spatial patch, restricted to in-raster pixels.

    H x W x f raster  ->  (H*W) x f² matrix, rows in row-major pixel order
    (or one row per entry of ``rows``).
    """
    x = T.as_tensor(raster)
    if x.ndim != 3:
        raise DimensionError(f"patch_sop: expected H x W x f, got {x.shape}")
    H, W, f = x.shape
    pool = patch_matrix(H, W, radius)
    if rows is not None:
        pool = pool[np.asarray(rows, dtype=np.intp)]
    counts = np.diff(pool.indptr).astype(x.data.dtype)[:, None]
    pooled = spmv(pool, row_outer(T.reshape(x, (H * W, f))))
    return T.signed_sqrt(T.div(pooled, counts), SQRT_EPS)


def conv_block_forward(x, block: ConvBlock, training: bool = True) -> Tensor:
    """conv (same) -> BN -> 2x2 stride-1 max-pool -> ReLU."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != block.kernel.shape[2]:
        raise DimensionError(
            f"conv_block_forward: input {x.shape} does not match kernel {block.kernel.shape}"
        )
    y = T.conv2d(x, block.kernel, block.bias)
    y = T.batch_norm(y, block.bn, training=training)
    if block.pool:
        y = T.maxpool2d_same(y)
    if block.activation == "relu":
        y = T.relu(y)
    elif block.activation == "leaky_relu":
        y = T.leaky_relu(y)
    return y
