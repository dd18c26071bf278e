"""Permutation-invariant point encoder with a node-attention stage."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn


class NumericError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    point_mlp_widths: tuple = (64, 128, 256)
    embed_dim: int = 256
    attention_nodes: int = 4
    pooling: str = "max"
    # project the embedding onto a sphere of this radius (0 disables); keeps
    # the adversarial game bounded when the domain head is linear
    feature_scale: float = 4.0

    def __post_init__(self):
        self.point_mlp_widths = tuple(int(w) for w in self.point_mlp_widths)
        if not self.point_mlp_widths or min(self.point_mlp_widths) <= 0:
            raise ValueError("point_mlp_widths must be a nonempty list of positive integers")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.attention_nodes < 0:
            raise ValueError("attention_nodes must be >= 0")
        if self.pooling != "max":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.feature_scale < 0:
            raise ValueError("feature_scale must be >= 0")

    def to_dict(self) -> dict:
        return {"point_mlp_widths": list(self.point_mlp_widths), "embed_dim": self.embed_dim,
                "attention_nodes": self.attention_nodes, "pooling": self.pooling,
                "feature_scale": self.feature_scale}


@dataclass
class FeatureBatch:
    features: torch.Tensor
    domain_ids: torch.Tensor
    class_ids: torch.Tensor

    def __len__(self):
        return self.features.shape[0]


class NodeAttention(nn.Module):
    """Learned query nodes attend over the points of a cloud.

    Each node pools a convex combination of per-point features (softmax over
    points); every point then reads the nodes back through a softmax over
    nodes and adds the result residually. Queries and the read-out map start
    at zero, so a fresh module is the identity.
    """

    def __init__(self, channels: int, nodes: int):
        super().__init__()
        self.channels = channels
        self.queries = nn.Parameter(torch.zeros(nodes, channels))
        self.readout = nn.Linear(channels, channels, bias=False)
        nn.init.zeros_(self.readout.weight)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.queries.t() / math.sqrt(self.channels)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, J) attention of each node over points; sums to 1 over N."""
        return torch.softmax(self.scores(x), dim=-2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.scores(x)
        nodes = torch.softmax(s, dim=-2).transpose(-1, -2) @ x
        assign = torch.softmax(s, dim=-1)
        return x + assign @ self.readout(nodes)


def node_attention(local_features, module: NodeAttention) -> torch.Tensor:
    """Apply ``module`` to an (N, c) or (B, N, c) feature array."""
    x = torch.as_tensor(local_features, dtype=module.queries.dtype)
    return module(x)


class PointEncoder(nn.Module):
    """Shared per-point MLP, node attention before the last point layer,
    max pooling, then a linear map to the embedding size.

    With ``feature_scale > 0`` the embedding is rescaled to that norm.
    """

    def __init__(self, cfg: EncoderConfig | None = None, check_finite: bool = True):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.check_finite = check_finite
        widths = (3,) + self.cfg.point_mlp_widths
        self.point_layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        attn_channels = widths[-2] if len(widths) > 2 else widths[-1]
        self.attention = NodeAttention(attn_channels, self.cfg.attention_nodes) if self.cfg.attention_nodes else None
        self.project = nn.Linear(widths[-1], self.cfg.embed_dim)

    def _layers(self, points: torch.Tensor, check: bool) -> torch.Tensor:
        x = points
        last = len(self.point_layers) - 1
        for i, layer in enumerate(self.point_layers):
            if i == last and self.attention is not None and last > 0:
                x = self.attention(x)
                _check(x, "attention", check)
            x = torch.relu(layer(x))
            _check(x, f"point_layers.{i}", check)
        if self.attention is not None and last == 0:
            x = self.attention(x)
            _check(x, "attention", check)
        pooled = x.max(dim=-2).values
        out = self.project(pooled)
        _check(out, "project", check)
        if self.cfg.feature_scale:
            out = self.cfg.feature_scale * out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return out

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        out = self._layers(points, check=False)
        if self.check_finite and not torch.isfinite(out).all():
            # rerun with per-layer checks to name the first offending layer
            with torch.no_grad():
                self._layers(points, check=True)
            raise NumericError("non-finite encoder output")
        return out


def _check(x, name, enabled):
    if enabled and not torch.isfinite(x).all():
        raise NumericError(f"non-finite values after encoder layer '{name}'")


def encode(batch: Sequence, encoder: PointEncoder) -> FeatureBatch:
    """Embed a list of :class:`~mensa.data.PointCloud` (all with N points)."""
    dtype = encoder.project.weight.dtype
    if len(batch) == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return FeatureBatch(torch.zeros(0, encoder.cfg.embed_dim, dtype=dtype), empty, empty)
    sizes = {len(pc.points) for pc in batch}
    if len(sizes) != 1:
        raise ValueError(f"all clouds must share the point count, got {sorted(sizes)}")
    pts = torch.as_tensor(np.stack([pc.points for pc in batch]), dtype=dtype)
    feats = encoder(pts)
    return FeatureBatch(feats,
                        torch.tensor([pc.domain_id for pc in batch], dtype=torch.long),
                        torch.tensor([pc.class_id for pc in batch], dtype=torch.long))
