"""The assembled forecasting model and its configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .graph import GraphSpec, adaptive_adjacency
from .layers import DGCGRU, FeatureAugmentation, GraphAttention, PredictionHead, TemporalAttention
from .tensor import Tensor, TensorError, no_grad, reshape

PE_VARIANTS = ("time-parity", "dimension-parity")


@dataclass
class ModelConfig:
    """Architectural hyperparameters with their standard defaults."""

    n_nodes: int
    in_channels: int = 1
    out_channels: int = 1
    hidden_dim: int = 64
    embed_dim: int = 8
    k_order: int = 2
    n_heads: int = 4
    horizon: int = 12
    history: int = 12
    fal_kernel: int = 3
    fal_reduction: int = 2
    ffn_expansion: int = 4
    attention_dropout: float = 0.1
    pe_variant: str = "time-parity"
    use_fal: bool = True
    use_temporal_attention: bool = True
    use_gat: bool = True

    def validate(self) -> None:
        counts = dict(n_nodes=self.n_nodes, in_channels=self.in_channels,
                      out_channels=self.out_channels, hidden_dim=self.hidden_dim,
                      embed_dim=self.embed_dim, k_order=self.k_order,
                      n_heads=self.n_heads, horizon=self.horizon, history=self.history,
                      fal_kernel=self.fal_kernel, fal_reduction=self.fal_reduction,
                      ffn_expansion=self.ffn_expansion)
        for name, value in counts.items():
            if value < 1:
                raise TensorError(f"config {name} must be >= 1, got {value}")
        if self.hidden_dim % self.n_heads != 0:
            raise TensorError(
                f"hidden_dim {self.hidden_dim} must be divisible by n_heads {self.n_heads}")
        if self.fal_kernel % 2 == 0:
            raise TensorError(f"fal_kernel must be odd, got {self.fal_kernel}")
        if self.pe_variant not in PE_VARIANTS:
            raise TensorError(f"pe_variant must be one of {PE_VARIANTS}, got {self.pe_variant!r}")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise TensorError("attention_dropout must lie in [0, 1)")


class AFDGCN:
    """Feature augmentation -> graph-conv GRU -> temporal attention and graph
    attention branches -> prediction head. Each branch is switchable for
    ablation runs."""

    def __init__(self, config: ModelConfig, adjacency: np.ndarray | None = None,
                 seed: int = 0):
        config.validate()
        if config.use_gat and adjacency is None:
            raise TensorError("use_gat requires a pre-defined adjacency matrix")
        self.config = config
        rng = np.random.default_rng(seed)
        self.graph = GraphSpec(config.n_nodes, config.embed_dim, adjacency, rng)
        self.fal = (FeatureAugmentation(config.in_channels, config.fal_kernel,
                                        config.fal_reduction, rng)
                    if config.use_fal else None)
        self.gru = DGCGRU(self.graph, config.in_channels, config.hidden_dim,
                          config.k_order, rng)
        self.temporal_attention = (TemporalAttention(config.hidden_dim, config.n_heads,
                                                     config.ffn_expansion,
                                                     config.attention_dropout,
                                                     config.pe_variant, rng)
                                   if config.use_temporal_attention else None)
        if config.use_gat:
            self.graph_attention = GraphAttention(config.hidden_dim,
                                                  config.attention_dropout, rng)
            mask = (self.graph.predefined_adjacency > 0).astype(np.float64)
            np.fill_diagonal(mask, 1.0)
            self.gat_mask = mask
        else:
            self.graph_attention = None
            self.gat_mask = None
        self.head = PredictionHead(config.hidden_dim, config.history, config.horizon,
                                   config.out_channels, rng)

    def forward(self, x: Tensor | np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """(B, P, N, C) or (P, N, C) -> (B, Q, N, C_out) or (Q, N, C_out)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise TensorError(f"model input must be (B, P, N, C) or (P, N, C), got {x.shape}")
        cfg = self.config
        b, p, n, c = x.shape
        if (p, n, c) != (cfg.history, cfg.n_nodes, cfg.in_channels):
            raise TensorError(
                f"model input {(p, n, c)} does not match config "
                f"(P={cfg.history}, N={cfg.n_nodes}, C={cfg.in_channels})")
        if self.fal is not None:
            x = self.fal.forward(x)
        h_seq, h_last = self.gru.forward(x)
        if self.temporal_attention is not None:
            h_seq = self.temporal_attention.forward(h_seq, training=training, rng=rng)
        h_spatial = None
        if self.graph_attention is not None:
            h_spatial = self.graph_attention.forward(h_last, self.gat_mask,
                                                     training=training, rng=rng)
        out = self.head.forward(h_seq, h_spatial)
        return reshape(out, out.shape[1:]) if squeeze else out

    def learned_adjacency(self) -> np.ndarray:
        """Current adaptive adjacency as a plain array (no taping)."""
        with no_grad():
            return adaptive_adjacency(self.graph.node_embeddings).data

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        groups: list[tuple[str, Tensor]] = [("graph.node_embeddings", self.graph.node_embeddings)]
        if self.fal is not None:
            groups += [("fal." + k, v) for k, v in self.fal.named_parameters()]
        groups += [("gru." + k, v) for k, v in self.gru.named_parameters()]
        if self.temporal_attention is not None:
            groups += [("temporal_attention." + k, v)
                       for k, v in self.temporal_attention.named_parameters()]
        if self.graph_attention is not None:
            groups += [("graph_attention." + k, v)
                       for k, v in self.graph_attention.named_parameters()]
        groups += [("head." + k, v) for k, v in self.head.named_parameters()]
        return groups

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> tuple[int, dict[str, int]]:
        """Total trainable element count and a per-module breakdown."""
        breakdown: dict[str, int] = {}
        for name, t in self.named_parameters():
            module = name.split(".", 1)[0]
            breakdown[module] = breakdown.get(module, 0) + t.size
        return sum(breakdown.values()), breakdown


def config_to_dict(config: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
    return out


def config_from_dict(values: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = _parse_bool(raw)
        else:
            kwargs[f.name] = raw
    if "n_nodes" not in kwargs:
        raise TensorError("model config needs n_nodes")
    return ModelConfig(**kwargs)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise TensorError(f"cannot parse boolean value {raw!r}")
