"""Graph structures: the pre-defined sensor graph, learned node embeddings,
the adaptive adjacency they induce, and graph convolution with node-adaptive
parameters.

Spectral utilities (normalized Laplacian, Chebyshev polynomials) are kept as
plain-numpy reference code; the forward pass only ever uses the adaptive
adjacency.
"""

from __future__ import annotations

import csv

import numpy as np

from .tensor import Tensor, TensorError, matmul, node_matmul, relu, softmax, transpose, reshape


class GraphSpec:
    """Node count, optional pre-defined adjacency, and learnable embeddings.

    The adjacency is stored with a zero diagonal; self-loops are contributed
    by ops (the identity support, the attention mask), never baked in.
    """

    def __init__(self, n_nodes: int, embed_dim: int,
                 adjacency: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        if n_nodes < 1:
            raise TensorError("graph needs at least one node")
        if not 1 <= embed_dim < max(n_nodes, 2):
            raise TensorError(f"embed_dim must satisfy 1 <= d < N, got d={embed_dim}, N={n_nodes}")
        self.n_nodes = n_nodes
        self.embed_dim = embed_dim
        if adjacency is not None:
            adjacency = np.asarray(adjacency, dtype=np.float64)
            if adjacency.shape != (n_nodes, n_nodes):
                raise TensorError(f"adjacency shape {adjacency.shape} != ({n_nodes}, {n_nodes})")
            if np.any(adjacency < 0):
                raise TensorError("adjacency must be nonnegative")
            adjacency = adjacency.copy()
            np.fill_diagonal(adjacency, 0.0)
        self.predefined_adjacency = adjacency
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(embed_dim)
        self.node_embeddings = Tensor(
            rng.uniform(-bound, bound, size=(n_nodes, embed_dim)), requires_grad=True)


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """L = I - D^{-1/2} A D^{-1/2}, with isolated nodes getting L_ii = 1."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise TensorError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise TensorError("adjacency must be nonnegative")
    deg = a.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(a.shape[0]) - dinv[:, None] * a * dinv[None, :]


def chebyshev_supports(lap: np.ndarray, k: int, lambda_max: float = 2.0) -> list[np.ndarray]:
    """First k Chebyshev polynomials of the rescaled Laplacian (test oracle)."""
    if k < 1:
        raise TensorError("chebyshev order must be >= 1")
    if lambda_max <= 0:
        raise TensorError("lambda_max must be positive")
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    scaled = (2.0 / lambda_max) * lap - np.eye(n)
    supports = [np.eye(n)]
    if k >= 2:
        supports.append(scaled)
    for _ in range(2, k):
        supports.append(2.0 * scaled @ supports[-1] - supports[-2])
    return supports


def gaussian_kernel_adjacency(edges: list[tuple[int, int, float]], n_nodes: int,
                              sigma: float, threshold: float = 0.0) -> np.ndarray:
    """Distance edge list -> weighted adjacency via exp(-dist^2 / sigma^2).

    Weights below the threshold are dropped; the diagonal stays zero.
    """
    if sigma <= 0:
        raise TensorError("sigma must be positive")
    a = np.zeros((n_nodes, n_nodes))
    for i, j, dist in edges:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise TensorError(f"edge ({i}, {j}) out of range for {n_nodes} nodes")
        if dist < 0:
            raise TensorError("distances must be nonnegative")
        if i == j:
            continue
        w = float(np.exp(-(dist * dist) / (sigma * sigma)))
        if w >= threshold:
            a[i, j] = w
    return a


def load_adjacency_csv(path) -> list[tuple[int, int, float]]:
    """Read `from,to,cost` rows; each undirected edge is mirrored on load."""
    edges: list[tuple[int, int, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "cost"]:
            raise TensorError(f"adjacency file {path} must start with header from,to,cost")
        for row in reader:
            if not row:
                continue
            i, j, cost = int(row[0]), int(row[1]), float(row[2])
            edges.append((i, j, cost))
            edges.append((j, i, cost))
    return edges


def build_adjacency(path, n_nodes: int, sigma: float | None = None,
                    threshold: float = 0.1) -> np.ndarray:
    """Load an edge CSV and apply the Gaussian kernel (sigma defaults to the
    standard deviation of all costs)."""
    edges = load_adjacency_csv(path)
    if not edges:
        return np.zeros((n_nodes, n_nodes))
    if sigma is None:
        costs = np.array([e[2] for e in edges])
        sigma = float(costs.std())
        if sigma < 1e-12:
            sigma = 1.0
    return gaussian_kernel_adjacency(edges, n_nodes, sigma, threshold)


def save_matrix_csv(path, matrix: np.ndarray) -> None:
    """Plain N x M comma-separated values, LF line endings, '.' decimals."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="\n") as fh:
        for row in matrix:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def adaptive_adjacency(embeddings: Tensor) -> Tensor:
    """Row-stochastic similarity matrix: row-softmax(relu(E E^T))."""
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise TensorError(f"embeddings must be (N, d), got {embeddings.shape}")
    scores = relu(matmul(embeddings, transpose(embeddings)))
    return softmax(scores, axis=-1)


class NodeAdaptivePool:
    """Shared low-rank pools that expand into per-node conv weights.

    ``w_pool`` holds one (d, C_in, C_out) block per graph support, stored
    contiguously along the input axis as (d, K * C_in, C_out); multiplying by
    the node embeddings yields each node's own weight matrix. ``b_pool``
    expands to per-node biases the same way.
    """

    def __init__(self, embed_dim: int, in_channels: int, out_channels: int,
                 k_order: int, rng: np.random.Generator):
        if k_order < 1:
            raise TensorError("k_order must be >= 1")
        self.embed_dim = embed_dim
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k_order = k_order
        limit = np.sqrt(6.0 / (in_channels + out_channels))
        self.w_pool = Tensor(
            rng.uniform(-limit, limit, size=(embed_dim, k_order * in_channels, out_channels)),
            requires_grad=True)
        self.b_pool = Tensor(np.zeros((embed_dim, out_channels)), requires_grad=True)

    def named_parameters(self):
        return [("w_pool", self.w_pool), ("b_pool", self.b_pool)]


def graph_mixed_features(x: Tensor, adaptive: Tensor, k_order: int) -> Tensor:
    """Concatenate the support-mixed signals [X, A~X, A~^2 X, ...] on channels."""
    mixed = [x]
    cur = x
    for _ in range(1, k_order):
        cur = matmul(adaptive, cur)
        mixed.append(cur)
    return mixed[0] if k_order == 1 else _concat_last(mixed)


def _concat_last(tensors):
    from .tensor import concat
    return concat(tensors, axis=-1)


def dynamic_graph_conv(x: Tensor, graph: GraphSpec, pool: NodeAdaptivePool,
                       adaptive: Tensor | None = None) -> Tensor:
    """Graph convolution over {I, A~, A~^2, ...} with per-node weights.

    x is (N, C_in) or (B, N, C_in). Per-node weights W = E_G . w_pool and
    biases b = E_G . b_pool are generated from the embeddings, so the result
    is differentiable w.r.t. x, the embeddings, and both pools.
    """
    if x.shape[-1] != pool.in_channels:
        raise TensorError(f"dynamic_graph_conv: input channels {x.shape[-1]} != pool C_in {pool.in_channels}")
    if x.shape[-2] != graph.n_nodes:
        raise TensorError(f"dynamic_graph_conv: node axis {x.shape[-2]} != graph N {graph.n_nodes}")
    e_g = graph.node_embeddings
    if adaptive is None:
        adaptive = adaptive_adjacency(e_g)
    n, d = e_g.shape
    kc = pool.k_order * pool.in_channels
    f = pool.out_channels

    if x.ndim not in (2, 3):
        raise TensorError(f"dynamic_graph_conv expects 2-d or 3-d input, got {x.shape}")
    feats = graph_mixed_features(x, adaptive, pool.k_order)           # (..., N, K*C)
    weights = reshape(matmul(e_g, reshape(pool.w_pool, (d, kc * f))), (n, kc, f))
    bias = matmul(e_g, pool.b_pool)                                   # (N, F)
    return node_matmul(feats, weights, bias)
