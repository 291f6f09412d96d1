"""Architecture blocks: feature augmentation, the graph-conv GRU, temporal
and graph attention, and the multi-step prediction head.

Layers hold their parameters as tape tensors and expose ``named_parameters``
for the optimizer, the checkpoint writer, and gradient checks. Batched inputs
carry a leading sample axis; shapes are annotated inline.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphSpec, NodeAdaptivePool, adaptive_adjacency, graph_mixed_features
from .tensor import (
    Tensor,
    TensorError,
    attention_block,
    concat,
    conv_temporal,
    dropout,
    elu,
    gated_blend,
    layer_norm,
    leaky_relu,
    masked_softmax,
    matmul,
    narrow,
    node_matmul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class FeatureAugmentation:
    """Serial squeeze-excitation gates: channel importance, then the
    importance of each position in the input window."""

    def __init__(self, in_channels: int, kernel: int, reduction: int,
                 rng: np.random.Generator):
        if kernel % 2 == 0:
            raise TensorError(f"temporal gate kernel must be odd, got {kernel}")
        c = in_channels
        hidden = max(1, c // reduction)
        self.in_channels = c
        self.w1 = xavier_uniform(rng, (c, hidden), c, hidden)
        self.b1 = zeros_param((hidden,))
        self.w2 = xavier_uniform(rng, (hidden, c), hidden, c)
        self.b2 = zeros_param((c,))
        self.theta1 = xavier_uniform(rng, (kernel, c, c), kernel * c, c)
        self.theta2 = xavier_uniform(rng, (kernel, c, c), kernel * c, c)

    def channel_calibration(self, x: Tensor) -> Tensor:
        # x: (B, T, N, C); squeeze over (T, N), gate each channel
        b, _, _, c = x.shape
        desc = x.mean(axis=(1, 2))                                   # (B, C)
        s = sigmoid(matmul(relu(matmul(desc, self.w1) + self.b1), self.w2) + self.b2)
        return x * reshape(s, (b, 1, 1, c))

    def temporal_calibration(self, x: Tensor) -> Tensor:
        # two same-padded passes along the window axis
        s = sigmoid(conv_temporal(relu(conv_temporal(x, self.theta1)), self.theta2))
        return x * s

    def forward(self, x: Tensor) -> Tensor:
        return self.temporal_calibration(self.channel_calibration(x))

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2),
                ("theta1", self.theta1), ("theta2", self.theta2)]


def _apply_node_conv(x: Tensor, adaptive: Tensor, k_order: int,
                     weights: Tensor, bias: Tensor) -> Tensor:
    """Support-mix x, then apply per-node weights (N, K*C, F) and bias (N, F)."""
    feats = graph_mixed_features(x, adaptive, k_order)
    return node_matmul(feats, weights, bias)


class DGCGRUCell:
    """GRU cell whose gate transforms are dynamic graph convolutions."""

    def __init__(self, graph: GraphSpec, in_channels: int, hidden_dim: int,
                 k_order: int, rng: np.random.Generator):
        self.graph = graph
        self.in_channels = in_channels
        self.hidden_dim = hidden_dim
        self.k_order = k_order
        width = in_channels + hidden_dim
        # update and reset gates share one conv with stacked output channels
        self.gate_pool = NodeAdaptivePool(graph.embed_dim, width, 2 * hidden_dim, k_order, rng)
        self.cand_pool = NodeAdaptivePool(graph.embed_dim, width, hidden_dim, k_order, rng)

    def _expand(self, pool: NodeAdaptivePool):
        e_g = self.graph.node_embeddings
        n, d = e_g.shape
        kc = pool.k_order * pool.in_channels
        f = pool.out_channels
        weights = reshape(matmul(e_g, reshape(pool.w_pool, (d, kc * f))), (n, kc, f))
        bias = matmul(e_g, pool.b_pool)
        return weights, bias

    def step(self, x_t: Tensor, h_prev: Tensor, adaptive: Tensor | None = None,
             expanded=None) -> Tensor:
        # x_t: (..., N, C), h_prev: (..., N, D) -> (..., N, D)
        if adaptive is None:
            adaptive = adaptive_adjacency(self.graph.node_embeddings)
        if expanded is None:
            expanded = (self._expand(self.gate_pool), self._expand(self.cand_pool))
        (gate_w, gate_b), (cand_w, cand_b) = expanded
        d = self.hidden_dim
        zr = sigmoid(_apply_node_conv(concat([x_t, h_prev], axis=-1), adaptive,
                                      self.k_order, gate_w, gate_b))
        z = narrow(zr, -1, 0, d)
        r = narrow(zr, -1, d, d)
        h_tilde = tanh(_apply_node_conv(concat([x_t, r * h_prev], axis=-1), adaptive,
                                        self.k_order, cand_w, cand_b))
        return gated_blend(z, h_prev, h_tilde)

    def named_parameters(self):
        return ([("gate." + k, v) for k, v in self.gate_pool.named_parameters()]
                + [("cand." + k, v) for k, v in self.cand_pool.named_parameters()])


class DGCGRU:
    """Unrolls the cell over the window, emitting every hidden state."""

    def __init__(self, graph: GraphSpec, in_channels: int, hidden_dim: int,
                 k_order: int, rng: np.random.Generator):
        self.cell = DGCGRUCell(graph, in_channels, hidden_dim, k_order, rng)
        self.graph = graph
        self.hidden_dim = hidden_dim

    def forward(self, x: Tensor, h0: Tensor | None = None):
        # x: (B, T, N, C) or (T, N, C) -> (stacked hidden states, last state)
        if x.ndim == 4:
            b, t, n, c = x.shape
            time_axis = 1
            h_shape = (b, n, self.hidden_dim)
        elif x.ndim == 3:
            t, n, c = x.shape
            time_axis = 0
            h_shape = (n, self.hidden_dim)
        else:
            raise TensorError(f"dgcgru input must be 3-d or 4-d, got {x.shape}")
        if t < 1:
            raise TensorError("dgcgru needs at least one step")
        h = h0 if h0 is not None else Tensor(np.zeros(h_shape))
        adaptive = adaptive_adjacency(self.graph.node_embeddings)
        expanded = (self.cell._expand(self.cell.gate_pool),
                    self.cell._expand(self.cell.cand_pool))
        states = []
        for step in range(t):
            x_t = reshape(narrow(x, time_axis, step, 1),
                          x.shape[:time_axis] + x.shape[time_axis + 1:])
            h = self.cell.step(x_t, h, adaptive, expanded)
            states.append(h)
        return stack(states, axis=time_axis), h

    def named_parameters(self):
        return self.cell.named_parameters()


def positional_encoding(t_len: int, dim: int, variant: str = "time-parity") -> np.ndarray:
    """Position tokens (t_len, dim).

    time-parity: whole rows are sin(t / 10000^{2i/D}) for even t and
    cos(t / 10000^{2i/D}) for odd t. dimension-parity: the usual
    sin/cos alternation over the feature index.
    """
    if dim < 1:
        raise TensorError("positional encoding needs dim >= 1")
    i = np.arange(dim)
    pe = np.zeros((t_len, dim))
    if variant == "time-parity":
        denom = 10000.0 ** (2.0 * i / dim)
        for t in range(t_len):
            pe[t] = np.sin(t / denom) if t % 2 == 0 else np.cos(t / denom)
    elif variant == "dimension-parity":
        denom = 10000.0 ** (2.0 * (i // 2) / dim)
        for t in range(t_len):
            ang = t / denom
            pe[t] = np.where(i % 2 == 0, np.sin(ang), np.cos(ang))
    else:
        raise TensorError(f"unknown pe variant: {variant}")
    return pe


class TemporalAttention:
    """Per-node multi-head self-attention over the hidden-state sequence,
    with position tokens, followed by one post-norm residual/FFN block."""

    def __init__(self, hidden_dim: int, n_heads: int, ffn_expansion: int,
                 dropout_rate: float, pe_variant: str, rng: np.random.Generator):
        if hidden_dim % n_heads != 0:
            raise TensorError(f"hidden_dim {hidden_dim} not divisible by heads {n_heads}")
        d = hidden_dim
        self.hidden_dim = d
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.dropout_rate = dropout_rate
        self.pe_variant = pe_variant
        self.w_q = xavier_uniform(rng, (d, d), d, d)
        self.w_k = xavier_uniform(rng, (d, d), d, d)
        self.w_v = xavier_uniform(rng, (d, d), d, d)
        self.w_o = xavier_uniform(rng, (d, d), d, d)
        self.ln1_gamma = Tensor(np.ones(d), requires_grad=True)
        self.ln1_beta = zeros_param((d,))
        wide = ffn_expansion * d
        self.ffn_w1 = xavier_uniform(rng, (d, wide), d, wide)
        self.ffn_b1 = zeros_param((wide,))
        self.ffn_w2 = xavier_uniform(rng, (wide, d), wide, d)
        self.ffn_b2 = zeros_param((d,))
        self.ln2_gamma = Tensor(np.ones(d), requires_grad=True)
        self.ln2_beta = zeros_param((d,))
        self._pe_cache: dict[int, np.ndarray] = {}

    def _pe(self, t_len: int) -> np.ndarray:
        if t_len not in self._pe_cache:
            self._pe_cache[t_len] = positional_encoding(t_len, self.hidden_dim, self.pe_variant)
        return self._pe_cache[t_len]

    def forward(self, h: Tensor, training: bool = False,
                rng: np.random.Generator | None = None, return_weights: bool = False):
        # h: (B, T, N, D) -> (B, T, N, D)
        if h.ndim != 4:
            raise TensorError(f"temporal attention expects (B, T, N, D), got {h.shape}")
        b, t, n, d = h.shape
        heads, dk = self.n_heads, self.head_dim
        x = h + Tensor(self._pe(t)[None, :, None, :])
        x = transpose(x, (0, 2, 1, 3))                                # (B, N, T, D)

        if not return_weights:
            mask = None
            if training and self.dropout_rate > 0.0:
                mask = ((rng.random((b, n, heads, t, t)) >= self.dropout_rate)
                        / (1.0 - self.dropout_rate)).astype(x.data.dtype)
            out = attention_block(x, self.w_q, self.w_k, self.w_v, self.w_o,
                                  self.ln1_gamma, self.ln1_beta,
                                  self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
                                  self.ln2_gamma, self.ln2_beta,
                                  n_heads=heads, drop_mask=mask)
            return transpose(out, (0, 2, 1, 3))

        # composed path, exposing the attention distribution for inspection
        def split_heads(m):
            return transpose(reshape(m, (b, n, t, heads, dk)), (0, 1, 3, 2, 4))

        q = split_heads(matmul(x, self.w_q))                          # (B, N, h, T, dk)
        k = split_heads(matmul(x, self.w_k))
        v = split_heads(matmul(x, self.w_v))
        scores = scale(matmul(q, transpose(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dk))
        attn = softmax(scores, axis=-1)                               # (B, N, h, T, T)
        ctx = matmul(dropout(attn, self.dropout_rate, rng, training), v)
        merged = reshape(transpose(ctx, (0, 1, 3, 2, 4)), (b, n, t, d))
        res1 = layer_norm(matmul(merged, self.w_o) + x, self.ln1_gamma, self.ln1_beta)
        ffn = matmul(relu(matmul(res1, self.ffn_w1) + self.ffn_b1), self.ffn_w2) + self.ffn_b2
        res2 = layer_norm(ffn + res1, self.ln2_gamma, self.ln2_beta)
        out = transpose(res2, (0, 2, 1, 3))
        return out, attn

    def named_parameters(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o),
                ("ln1_gamma", self.ln1_gamma), ("ln1_beta", self.ln1_beta),
                ("ffn_w1", self.ffn_w1), ("ffn_b1", self.ffn_b1),
                ("ffn_w2", self.ffn_w2), ("ffn_b2", self.ffn_b2),
                ("ln2_gamma", self.ln2_gamma), ("ln2_beta", self.ln2_beta)]


class GraphAttention:
    """Single-head attention over each node's masked neighborhood of the
    final hidden states; scores come from a concat-then-linear form."""

    def __init__(self, hidden_dim: int, dropout_rate: float,
                 rng: np.random.Generator, slope: float = 0.2):
        d = hidden_dim
        self.hidden_dim = d
        self.slope = slope
        self.dropout_rate = dropout_rate
        self.w = xavier_uniform(rng, (d, d), d, d)
        # concat score a^T [Wh_i || Wh_j] split into source/target halves
        self.a_src = xavier_uniform(rng, (d, 1), 2 * d, 1)
        self.a_dst = xavier_uniform(rng, (d, 1), 2 * d, 1)

    def forward(self, h: Tensor, mask: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None, return_weights: bool = False):
        # h: (B, N, D) or (N, D); mask: (N, N) with self-loops
        wh = matmul(h, self.w)
        s_src = matmul(wh, self.a_src)                                # (..., N, 1)
        s_dst = matmul(wh, self.a_dst)
        if h.ndim == 2:
            e = leaky_relu(s_src + transpose(s_dst), self.slope)      # (N, N)
        elif h.ndim == 3:
            e = leaky_relu(s_src + transpose(s_dst, (0, 2, 1)), self.slope)
        else:
            raise TensorError(f"graph attention expects (N, D) or (B, N, D), got {h.shape}")
        alpha = masked_softmax(e, mask, axis=-1)
        out = elu(matmul(dropout(alpha, self.dropout_rate, rng, training), wh))
        return (out, alpha) if return_weights else out

    def named_parameters(self):
        return [("w", self.w), ("a_src", self.a_src), ("a_dst", self.a_dst)]


class PredictionHead:
    """Broadcast-sum fusion of the two branches, then a pointwise channel
    projection and a window-to-horizon projection over the time axis."""

    def __init__(self, hidden_dim: int, history: int, horizon: int,
                 out_channels: int, rng: np.random.Generator):
        self.history = history
        self.horizon = horizon
        self.out_channels = out_channels
        self.w_ch = xavier_uniform(rng, (hidden_dim, out_channels), hidden_dim, out_channels)
        self.b_ch = zeros_param((out_channels,))
        self.w_time = xavier_uniform(rng, (history, horizon), history, horizon)
        self.b_time = zeros_param((horizon,))

    def forward(self, h_seq: Tensor, h_spatial: Tensor | None = None) -> Tensor:
        # h_seq: (B, T, N, D), h_spatial: (B, N, D) -> (B, Q, N, C_out)
        if h_seq.ndim != 4:
            raise TensorError(f"prediction head expects (B, T, N, D), got {h_seq.shape}")
        b, t, n, d = h_seq.shape
        if t != self.history:
            raise TensorError(f"prediction head built for window {self.history}, got {t}")
        fused = h_seq if h_spatial is None else h_seq + reshape(h_spatial, (b, 1, n, d))
        y = matmul(fused, self.w_ch) + self.b_ch                      # (B, T, N, C_out)
        y = transpose(y, (0, 2, 3, 1))                                # (B, N, C_out, T)
        y = matmul(y, self.w_time) + self.b_time                      # (B, N, C_out, Q)
        return transpose(y, (0, 3, 1, 2))

    def named_parameters(self):
        return [("w_ch", self.w_ch), ("b_ch", self.b_ch),
                ("w_time", self.w_time), ("b_time", self.b_time)]
