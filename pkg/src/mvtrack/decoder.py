"""Offset decoder and heatmap decoder: the two parallel output branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import EncodedGround, TrackQuerySet, _check_positions
from .errors import ShapeMismatch
from .layers import FFN, Conv2d, MLPHead, MSDeformAttn
from .ops import MsdaConfig, upsample_nearest

HEATMAP_PRIOR_BIAS = -2.19  # sigmoid ~ 0.1


@dataclass
class OffsetPrediction:
    offsets: torch.Tensor  # [K, 2] ground cells (dx, dy)
    track_ids: list


@dataclass
class GroundHeatmap:
    values: torch.Tensor  # [cells_y, cells_x] in (0, 1)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: MsdaConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.msda = MSDeformAttn(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FFN(cfg.embed_dim)

    def forward(self, q, reference, value_maps):
        q = q + self.msda(self.norm1(q), reference, value_maps, residual=False)
        return q + self.ffn(self.norm2(q), residual=False)


class OffsetDecoder(nn.Module):
    def __init__(self, cfg: MsdaConfig, num_layers: int = 2):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(num_layers)])
        self.head = MLPHead(cfg.embed_dim, 2)


def offset_decode(track: TrackQuerySet, current: EncodedGround, decoder: OffsetDecoder) -> OffsetPrediction:
    """Refine track queries against the current frame and regress (dx, dy) in cells.

    Reference points are the previous positions, normalized by the finest grid,
    and stay fixed across layers.
    """
    H, W = current.shapes[0]
    if len(track) == 0:
        return OffsetPrediction(track.queries.new_zeros((0, 2)), [])
    pos = _check_positions(track.positions, W, H)
    reference = torch.from_numpy((pos + 0.5) / np.array([W, H], dtype=np.float64)).to(track.queries.dtype)
    q = track.queries
    for layer in decoder.layers:
        q = layer(q, reference, current.per_scale)
    return OffsetPrediction(decoder.head(q), list(track.track_ids))


class HeatmapDecoder(nn.Module):
    def __init__(self, dim: int, num_levels: int):
        super().__init__()
        self.lateral = nn.ModuleList([Conv2d(dim, dim, 1) for _ in range(num_levels)])
        self.smooth = Conv2d(dim, dim, 3)
        self.head = Conv2d(dim, 1, 3)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.fill_(HEATMAP_PRIOR_BIAS)


def heatmap_fpn(current: EncodedGround, decoder: HeatmapDecoder) -> torch.Tensor:
    """Top-down fusion of all scales into the finest one, [H_0, W_0, D]."""
    maps = current.per_scale
    if len(maps) != len(decoder.lateral):
        raise ShapeMismatch(f"heatmap decoder expects {len(decoder.lateral)} scales, got {len(maps)}")
    p = decoder.lateral[-1](maps[-1])
    for lvl in range(len(maps) - 2, -1, -1):
        lat = decoder.lateral[lvl](maps[lvl])
        p = lat + upsample_nearest(p, lat.shape[:2])
    return torch.relu(decoder.smooth(p))


def heatmap_decode(current: EncodedGround, decoder: HeatmapDecoder) -> GroundHeatmap:
    fused = heatmap_fpn(current, decoder)
    return GroundHeatmap(torch.sigmoid(decoder.head(fused)[..., 0]))


class CoordinateDecoder(nn.Module):
    """Sparse-query replacement for the heatmap head (coordinate-regression ablation).

    A fixed set of learned queries attends into the current encoded ground and
    regresses a normalized (x, y) plus an objectness logit each.
    """

    def __init__(self, cfg: MsdaConfig, num_queries: int = 16, num_layers: int = 2):
        super().__init__()
        D = cfg.embed_dim
        self.query_embed = nn.Parameter(torch.randn(num_queries, D) * 0.1)
        self.reference_logits = nn.Parameter(torch.randn(num_queries, 2))
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(num_layers)])
        self.position_head = MLPHead(D, 2)
        self.score_head = nn.Linear(D, 1)
        with torch.no_grad():
            self.score_head.bias.fill_(HEATMAP_PRIOR_BIAS)


def coordinate_decode(current: EncodedGround, decoder: CoordinateDecoder):
    """Returns (positions [Q, 2] in finest-grid cells, scores [Q] in (0, 1))."""
    H, W = current.shapes[0]
    dtype = current.per_scale[0].dtype
    reference = torch.sigmoid(decoder.reference_logits).to(dtype)
    q = decoder.query_embed.to(dtype)
    for layer in decoder.layers:
        q = layer(q, reference, current.per_scale)
    norm = torch.sigmoid(torch.logit(reference, eps=1e-6) + decoder.position_head(q))
    scale = torch.tensor([W, H], dtype=dtype)
    positions = norm * scale - 0.5
    scores = torch.sigmoid(decoder.score_head(q)[:, 0])
    return positions, scores
