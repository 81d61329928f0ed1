"""Conditional patch encoder and graph encoder.

The patch encoder fuses a 3D conv feature stack with the patch's normalized
atlas coordinates through a small dense head. The graph encoder applies one
graph-convolution layer (symmetric normalization with self-loops), mean-pools
nodes, and projects through a dense head used only by the contrastive loss;
the pooled features are the downstream representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

__all__ = [
    "EncoderConfig",
    "PatchFeatureNet",
    "PatchEncoder",
    "GraphEncoder",
    "EmbeddingSet",
    "normalize_adjacency",
    "cnn_features",
    "encode_patch",
    "gcn_forward",
    "pooled_features",
    "graph_embed",
]


@dataclass
class EncoderConfig:
    """Architecture hyperparameters; the last block width is the feature dim."""

    patch_size: tuple = (16, 16, 16)
    block_channels: tuple = (4, 8, 16, 32)
    convs_per_block: tuple = (2, 2, 2, 2)

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.convs_per_block = tuple(int(c) for c in self.convs_per_block)
        if len(self.block_channels) != len(self.convs_per_block):
            raise ValueError("block_channels and convs_per_block must align")
        if any(c < 1 for c in self.convs_per_block):
            raise ValueError("each block needs at least one conv")
        factor = 2 ** len(self.block_channels)
        if any(p != factor for p in self.patch_size):
            raise ValueError(
                f"patch_size {self.patch_size} must be 2^n_blocks = {factor} per axis "
                "(each block halves the spatial extent once)"
            )

    @property
    def feature_dim(self):
        return self.block_channels[-1]

    @classmethod
    def paper(cls):
        """Full-scale configuration: 32^3 patches -> 128 features."""
        return cls(
            patch_size=(32, 32, 32),
            block_channels=(8, 16, 32, 64, 128),
            convs_per_block=(2, 3, 3, 3, 2),
        )


def _he_init(module):
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class PatchFeatureNet(nn.Module):
    """Conv stack mapping one patch to a flat feature vector.

    Each block is a run of 3x3x3 convs (stride 1, the first widening the
    channels) ending in a stride-2 conv; every conv is followed by
    BatchNorm3d + ELU. After n_blocks the spatial extent is 1^3.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 1
        for out_ch, n_convs in zip(config.block_channels, config.convs_per_block):
            for i in range(n_convs):
                stride = 2 if i == n_convs - 1 else 1
                layers.append(nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1))
                layers.append(nn.BatchNorm3d(out_ch))
                layers.append(nn.ELU())
                in_ch = out_ch
        self.stack = nn.Sequential(*layers)
        self.apply(_he_init)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.dim() == 4:
            patches = patches[:, None]
        if tuple(patches.shape[2:]) != self.config.patch_size:
            raise ValueError(
                f"patch shape {tuple(patches.shape[2:])} != configured {self.config.patch_size}"
            )
        out = self.stack(patches)
        return out.reshape(out.shape[0], self.config.feature_dim)


class PatchEncoder(nn.Module):
    """Conditional encoder: dense fusion of conv features with the patch's
    normalized atlas coordinates (3-vector in [0,1]^3)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.features = PatchFeatureNet(config)
        width = config.feature_dim + 3
        self.fusion = nn.Sequential(
            nn.Linear(width, width),
            nn.ReLU(),
            nn.Linear(width, width),
            nn.ReLU(),
            nn.Linear(width, config.feature_dim),
        )
        self.fusion.apply(_he_init)

    def forward(self, patches: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        feats = self.features(patches)
        if coords.dim() == 1:
            coords = coords[None].expand(feats.shape[0], -1)
        if coords.shape != (feats.shape[0], 3):
            raise ValueError(f"coords must be (batch, 3), got {tuple(coords.shape)}")
        return self.fusion(torch.cat([feats, coords.to(feats.dtype)], dim=1))


def normalize_adjacency(adj: torch.Tensor) -> torch.Tensor:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    if adj.shape[-1] != adj.shape[-2]:
        raise ValueError(f"adjacency must be square, got {tuple(adj.shape)}")
    adj = adj.to(torch.float32)
    if not torch.equal(adj, adj.transpose(-1, -2)):
        raise ValueError("adjacency must be symmetric")
    eye = torch.eye(adj.shape[-1], dtype=adj.dtype, device=adj.device)
    with_loops = adj + eye
    inv_sqrt_deg = with_loops.sum(-1).clamp(min=1e-12).rsqrt()
    return with_loops * inv_sqrt_deg[..., :, None] * inv_sqrt_deg[..., None, :]


class GraphEncoder(nn.Module):
    """One graph-convolution layer, mean pooling, and a projection head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        f = config.feature_dim
        self.node_weight = nn.Linear(f, f, bias=False)
        self.node_norm = nn.BatchNorm1d(f)
        self.node_act = nn.ELU()
        self.projection = nn.Sequential(
            nn.Linear(f, f), nn.ReLU(), nn.Linear(f, f), nn.ReLU(), nn.Linear(f, f)
        )
        self.apply(_he_init)

    def propagate(self, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        """Update node features along the graph: ELU(BN(Ahat H W)).

        Accepts (N, F) with (N, N) adjacency or batched (B, N, F) / (B, N, N).
        BatchNorm runs over (batch x nodes) per feature channel.
        """
        squeeze = node_features.dim() == 2
        h = node_features[None] if squeeze else node_features
        adj = adjacency[None] if adjacency.dim() == 2 else adjacency
        if h.shape[-1] != self.config.feature_dim:
            raise ValueError(f"feature width {h.shape[-1]} != {self.config.feature_dim}")
        if adj.shape[-1] != h.shape[-2] or adj.shape[0] != h.shape[0]:
            raise ValueError(
                f"adjacency {tuple(adj.shape)} inconsistent with features {tuple(h.shape)}"
            )
        ahat = normalize_adjacency(adj)
        mixed = self.node_weight(torch.bmm(ahat, h))
        b, n, f = mixed.shape
        out = self.node_act(self.node_norm(mixed.reshape(b * n, f)).reshape(b, n, f))
        return out[0] if squeeze else out

    def pooled(self, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        """Downstream subject features: mean over nodes, projection discarded."""
        return pooled_features(self.propagate(node_features, adjacency))

    def forward(self, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return self.projection(self.pooled(node_features, adjacency))


def pooled_features(updated_nodes: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over the node axis: (..., N, F) -> (..., F)."""
    if updated_nodes.shape[-2] < 1:
        raise ValueError("cannot pool an empty graph")
    return updated_nodes.mean(dim=-2)


def cnn_features(encoder: PatchEncoder, patches: torch.Tensor) -> torch.Tensor:
    return encoder.features(patches)


def encode_patch(encoder: PatchEncoder, patches: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    return encoder(patches, coords)


def gcn_forward(encoder: GraphEncoder, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
    return encoder.propagate(node_features, adjacency)


def graph_embed(encoder: GraphEncoder, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
    return encoder(node_features, adjacency)


@dataclass
class EmbeddingSet:
    """Per-subject embeddings at every stage of the graph path."""

    node_features: np.ndarray  # (N, F) patch embeddings
    updated_nodes: np.ndarray  # (N, F) after graph propagation
    pooled: np.ndarray  # (F,) downstream subject features
    projected: np.ndarray  # (F,) contrastive-space embedding

    def __post_init__(self):
        for arr in (self.node_features, self.updated_nodes, self.pooled, self.projected):
            if not np.all(np.isfinite(arr)):
                raise ValueError("embeddings must be finite")
        if self.node_features.shape != self.updated_nodes.shape:
            raise ValueError("node feature stages disagree in shape")
        f = self.node_features.shape[-1]
        if self.pooled.shape != (f,) or self.projected.shape != (f,):
            raise ValueError("pooled/projected width inconsistent with node features")
