"""kNN graph construction and the graph layer families.

Three layer types cover the whole network: EdgeConv (max-aggregated edge
messages), residual edge-conditioned blocks (mean-aggregated feature
differences with a skip connection), and self-attention graph pooling.
Graphs are cheap throwaway objects rebuilt in feature space before every
graph layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_to,
    concat,
    index_select,
    leaky_relu,
    matmul,
    max_reduce,
    mean_reduce,
    multiply,
    reshape,
    subtract,
    tanh,
)

# above this many distance-matrix cells the direct difference expansion is
# replaced by the x^2 + y^2 - 2xy identity (the N^2 x D intermediate is the
# cost driver, not the flops)
_DIRECT_DIST_BUDGET = 1 << 18


@dataclass
class NeighborGraph:
    """Fixed-degree kNN table; row i lists the k nearest nodes to node i,
    sorted by ascending squared distance with ties broken by ascending index.
    Self-loops are excluded."""

    num_nodes: int
    k: int
    neighbors: np.ndarray  # [num_nodes, k] int indices


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """Dense squared-Euclidean distance matrix."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n, d = pts.shape
    if n * n * d <= _DIRECT_DIST_BUDGET:
        diff = pts[:, None, :] - pts[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    dists = pts @ (-2.0 * pts.T)
    sq = np.einsum("ij,ij->i", pts, pts)
    dists += sq[:, None]
    dists += sq[None, :]
    np.maximum(dists, 0.0, out=dists)
    return dists


def knn_graph(points_or_features, k: int) -> NeighborGraph:
    """Exhaustive kNN over rows, excluding self, deterministic tie-break by
    smaller index. Works on raw coordinates or any feature matrix."""
    pts = points_or_features.values if isinstance(points_or_features, Tensor) \
        else np.asarray(points_or_features, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"knn_graph: expected N x D input, got shape {pts.shape}")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("knn_graph: k must be >= 1")
    if n <= k:
        raise ValueError(f"knn_graph: need more nodes than neighbors (N={n}, k={k})")
    if not np.all(np.isfinite(pts)):
        raise ValueError("knn_graph: input rows must be finite")

    d = pairwise_sq_dists(pts)
    np.fill_diagonal(d, np.inf)

    if n <= 128:
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    else:
        cand = np.argpartition(d, k - 1, axis=1)[:, :k]
        candv = np.take_along_axis(d, cand, axis=1)
        order = np.lexsort((cand, candv), axis=1)
        nbrs = np.take_along_axis(cand, order, axis=1)
        vals = np.take_along_axis(candv, order, axis=1)
        # a tie across the selection boundary can demand a smaller index
        # from outside the partition; redo those rows exactly
        boundary = vals[:, -1]
        eq_total = (d == boundary[:, None]).sum(axis=1)
        eq_kept = (vals == boundary[:, None]).sum(axis=1)
        for i in np.nonzero(eq_total > eq_kept)[0]:
            nbrs[i] = np.argsort(d[i], kind="stable")[:k]
    return NeighborGraph(num_nodes=n, k=k, neighbors=np.ascontiguousarray(nbrs))


@dataclass
class EdgeConvParams:
    weight: Parameter  # [2*c_in, c_out]
    bias: Parameter  # [c_out]


@dataclass
class EcConvParams:
    """Edge-conditioned linear map: self term plus mean neighbor-difference
    term. Also serves as SAG-pool scorer (c_out=1) and coordinate heads."""

    w_self: Parameter  # [c_in, c_out]
    w_nbr: Parameter  # [c_in, c_out]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_edge_conv(rng, c_in: int, c_out: int, name: str) -> EdgeConvParams:
    w = glorot_uniform(rng, 2 * c_in, c_out, (2 * c_in, c_out))
    return EdgeConvParams(
        weight=Parameter(f"{name}.weight", Tensor(w, requires_grad=True)),
        bias=Parameter(f"{name}.bias", Tensor(np.zeros(c_out), requires_grad=True)),
    )


def init_ec_conv(rng, c_in: int, c_out: int, name: str) -> EcConvParams:
    return EcConvParams(
        w_self=Parameter(f"{name}.w_self", Tensor(
            glorot_uniform(rng, c_in, c_out, (c_in, c_out)), requires_grad=True)),
        w_nbr=Parameter(f"{name}.w_nbr", Tensor(
            glorot_uniform(rng, c_in, c_out, (c_in, c_out)), requires_grad=True)),
    )


def _as_feature_tensor(features) -> Tensor:
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.values.ndim != 2:
        raise ShapeMismatchError(f"graph layer: expected N x C features, got {f.shape}")
    return f


def _gather_endpoints(features: Tensor, graph: NeighborGraph):
    """Per-edge anchor and neighbor feature rows, both [N*k, C]. The anchor
    side is a broadcast (k consecutive copies per node) so its backward is a
    plain axis sum rather than a scatter."""
    n, c = features.shape
    k = graph.k
    anchors = reshape(
        broadcast_to(reshape(features, (n, 1, c)), (n, k, c)), (n * k, c))
    nbrs = index_select(features, 0, graph.neighbors.reshape(-1))
    return anchors, nbrs


def edge_conv(features, graph: NeighborGraph, params: EdgeConvParams) -> Tensor:
    """EdgeConv: message per edge = leaky_relu(W [x_i, x_j - x_i] + b),
    aggregated by channel-wise max over each node's neighbors."""
    f = _as_feature_tensor(features)
    n, c = f.shape
    if graph.num_nodes != n:
        raise ShapeMismatchError(
            f"edge_conv: graph has {graph.num_nodes} nodes, features {n}")
    w = params.weight.tensor
    if w.shape[0] != 2 * c:
        raise ShapeMismatchError(
            f"edge_conv: features have {c} channels, weight expects {w.shape[0] // 2}")
    c_out = w.shape[1]
    x_i, x_j = _gather_endpoints(f, graph)
    msg_in = concat([x_i, subtract(x_j, x_i)], axis=1)
    msgs = add(matmul(msg_in, w),
               broadcast_to(reshape(params.bias.tensor, (1, c_out)),
                            (n * graph.k, c_out)))
    msgs = leaky_relu(msgs, 0.2)
    return max_reduce(reshape(msgs, (n, graph.k, c_out)), axis=1)


def ec_conv(features, graph: NeighborGraph, params: EcConvParams) -> Tensor:
    """Linear edge-conditioned map: W_self x_i + W_nbr mean_j(x_j - x_i)."""
    f = _as_feature_tensor(features)
    n, c = f.shape
    if graph.num_nodes != n:
        raise ShapeMismatchError(
            f"ec_conv: graph has {graph.num_nodes} nodes, features {n}")
    if params.w_self.tensor.shape[0] != c:
        raise ShapeMismatchError(
            f"ec_conv: features have {c} channels, weights expect "
            f"{params.w_self.tensor.shape[0]}")
    x_i, x_j = _gather_endpoints(f, graph)
    diff = subtract(x_j, x_i)
    mean_diff = mean_reduce(reshape(diff, (n, graph.k, c)), axis=1)
    return add(matmul(f, params.w_self.tensor),
               matmul(mean_diff, params.w_nbr.tensor))


def residual_denoise_block(features, graph: NeighborGraph,
                           params: EcConvParams) -> Tensor:
    """out_i = x_i + leaky_relu(W_self x_i + (1/k) sum_j W_nbr (x_j - x_i));
    width-preserving so the residual addition is well typed."""
    f = _as_feature_tensor(features)
    if params.w_self.tensor.shape[0] != params.w_self.tensor.shape[1]:
        raise ShapeMismatchError("residual_denoise_block: weights must be square")
    return add(f, leaky_relu(ec_conv(f, graph, params), 0.2))


def sag_pool(features, graph: NeighborGraph, target_count: int,
             params: EcConvParams):
    """Self-attention graph pooling: score nodes with a single-channel
    edge-conditioned projection, keep the top ``target_count`` (ties by
    ascending index), gate kept features by tanh(score).

    Returns (pooled [target x C], kept_indices ascending, scores [N]).
    """
    f = _as_feature_tensor(features)
    n, c = f.shape
    if target_count > n:
        raise ValueError(
            f"sag_pool: target_count {target_count} exceeds node count {n}")
    if target_count < 1:
        raise ValueError("sag_pool: target_count must be >= 1")
    scores = reshape(ec_conv(f, graph, params), (n,))
    order = np.argsort(-scores.values, kind="stable")
    kept = np.sort(order[:target_count])
    gate = reshape(tanh(index_select(scores, 0, kept)), (target_count, 1))
    pooled = multiply(index_select(f, 0, kept),
                      broadcast_to(gate, (target_count, c)))
    return pooled, kept, scores
