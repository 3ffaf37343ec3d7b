"""Deformable ground encoder, track/view query sampling and view-ground interaction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import GroundFeaturePack
from .errors import PositionOutOfGrid, ShapeMismatch, ValidationError
from .geometry import GroundGrid, project_points, sample_points
from .layers import FFN, CrossAttention, MSDeformAttn
from .ops import MsdaConfig

INTERACTION_MODES = ("cross", "self", "off")


@dataclass
class EncodedGround:
    per_scale: list  # L tensors [H_l, W_l, D]

    @property
    def shapes(self):
        return [tuple(t.shape[:2]) for t in self.per_scale]

    @property
    def flattened(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1, t.shape[-1]) for t in self.per_scale], 0)

    @property
    def level_index(self) -> torch.Tensor:
        return torch.cat([torch.full((h * w,), lvl, dtype=torch.long) for lvl, (h, w) in enumerate(self.shapes)])

    @classmethod
    def from_flat(cls, flat: torch.Tensor, shapes) -> "EncodedGround":
        sizes = [h * w for h, w in shapes]
        if flat.shape[0] != sum(sizes):
            raise ShapeMismatch(f"flattened length {flat.shape[0]} != {sum(sizes)}")
        parts = flat.split(sizes, 0)
        return cls([p.reshape(h, w, -1) for p, (h, w) in zip(parts, shapes)])


@dataclass
class TrackQuerySet:
    queries: torch.Tensor  # [K, D]
    positions: np.ndarray  # [K, 2] ground cells (x, y) at the previous frame
    track_ids: list

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.track_ids = list(self.track_ids)
        if len(set(self.track_ids)) != len(self.track_ids):
            raise ValidationError("track ids must be unique")
        if not (self.queries.shape[0] == len(self.positions) == len(self.track_ids)):
            raise ShapeMismatch("queries, positions and ids disagree on track count")

    def __len__(self):
        return len(self.track_ids)

    def with_queries(self, queries) -> "TrackQuerySet":
        return TrackQuerySet(queries, self.positions, self.track_ids)


@dataclass
class ViewQuerySet:
    queries: torch.Tensor  # [K, n, D]
    valid: np.ndarray  # [K, n] bool


def normalized_cell_centers(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """[h*w, 2] normalized (x, y) of each cell center, row-major."""
    ys, xs = torch.meshgrid(
        (torch.arange(h, dtype=dtype) + 0.5) / h, (torch.arange(w, dtype=dtype) + 0.5) / w, indexing="ij"
    )
    return torch.stack([xs, ys], -1).reshape(-1, 2)


def sine_position_encoding(h: int, w: int, dim: int, dtype=torch.float32, temperature: float = 10000.0):
    """Fixed 2-D sinusoidal encoding over normalized coordinates, [h*w, dim]."""
    if dim % 4:
        raise ShapeMismatch("positional encoding needs dim divisible by 4")
    coords = normalized_cell_centers(h, w, dtype) * 2 * math.pi
    quarter = dim // 4
    freq = temperature ** (torch.arange(quarter, dtype=dtype) / quarter)
    parts = []
    for axis in (1, 0):  # y first, then x
        a = coords[:, axis : axis + 1] / freq
        parts += [a.sin(), a.cos()]
    return torch.cat(parts, -1)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: MsdaConfig, ffn_hidden: int | None = None):
        super().__init__()
        D = cfg.embed_dim
        self.norm1 = nn.LayerNorm(D)
        self.msda = MSDeformAttn(cfg)
        self.norm2 = nn.LayerNorm(D)
        self.ffn = FFN(D, ffn_hidden)

    def forward(self, x, pos, reference, shapes):
        h = self.norm1(x)
        sizes = [a * b for a, b in shapes]
        value_maps = [p.reshape(a, b, -1) for p, (a, b) in zip(h.split(sizes, 0), shapes)]
        x = x + self.msda(h + pos, reference, value_maps, residual=False)
        return x + self.ffn(self.norm2(x), residual=False)


class GroundEncoder(nn.Module):
    def __init__(self, cfg: MsdaConfig, num_layers: int = 2):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList([EncoderLayer(cfg) for _ in range(num_layers)])
        self.level_embed = nn.Parameter(torch.randn(cfg.num_levels, cfg.embed_dim) * 0.02)

    def forward(self, features: GroundFeaturePack) -> EncodedGround:
        return encode_ground(features, self)


def encode_ground(features: GroundFeaturePack, encoder: GroundEncoder) -> EncodedGround:
    shapes = features.shapes
    if len(shapes) != encoder.cfg.num_levels:
        raise ShapeMismatch(f"encoder expects {encoder.cfg.num_levels} scales, got {len(shapes)}")
    x = torch.cat([t.reshape(-1, t.shape[-1]) for t in features.per_scale], 0)
    dtype = x.dtype
    D = encoder.cfg.embed_dim
    pos = torch.cat(
        [sine_position_encoding(h, w, D, dtype) + encoder.level_embed[lvl].to(dtype) for lvl, (h, w) in enumerate(shapes)]
    )
    reference = torch.cat([normalized_cell_centers(h, w, dtype) for h, w in shapes])
    for layer in encoder.layers:
        x = layer(x, pos, reference, shapes)
    return EncodedGround.from_flat(x, shapes)


def _check_positions(positions: np.ndarray, width: int, height: int):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if positions.size and not np.all(np.isfinite(positions)):
        raise PositionOutOfGrid("non-finite track position")
    inside = (
        (positions[:, 0] >= -0.5)
        & (positions[:, 0] <= width - 0.5)
        & (positions[:, 1] >= -0.5)
        & (positions[:, 1] <= height - 0.5)
    )
    if not inside.all():
        bad = positions[~inside][0]
        raise PositionOutOfGrid(f"position ({bad[0]:.3f}, {bad[1]:.3f}) outside {width}x{height} grid")
    # border half-cells sample the edge cell
    out = positions.copy()
    out[:, 0] = np.clip(out[:, 0], 0, width - 1)
    out[:, 1] = np.clip(out[:, 1], 0, height - 1)
    return out


def sample_track_queries(encoded: EncodedGround, positions, ids) -> TrackQuerySet:
    """Bilinearly sample the finest encoded map at ground-cell positions (x, y)."""
    fine = encoded.per_scale[0]
    H, W, D = fine.shape
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    clipped = _check_positions(positions, W, H)
    if len(positions) == 0:
        return TrackQuerySet(fine.new_zeros((0, D)), positions, list(ids))
    queries, _ = sample_points(fine, clipped[:, 0], clipped[:, 1])
    return TrackQuerySet(queries, positions, list(ids))


def sample_view_queries(
    view_features,
    calibs,
    positions,
    grid: GroundGrid,
    sample_height: float = 0.9,
    feature_stride: float = 4.0,
) -> ViewQuerySet:
    """Sample each camera's fused view map at the projection of (x, y, sample_height).

    view_features: stacked [n, H_f, W_f, D] or a list of [H_f, W_f, D] maps.
    Projections behind a camera or outside its map are invalid and zero.
    """
    if len(view_features) != len(calibs):
        raise ShapeMismatch(f"{len(calibs)} calibrations but {len(view_features)} view maps")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    K, n = len(positions), len(calibs)
    D = view_features[0].shape[-1]
    if K == 0:
        return ViewQuerySet(view_features[0].new_zeros((0, n, D)), np.zeros((0, n), dtype=bool))
    wx, wy = grid.cell_to_world(positions[:, 0], positions[:, 1])
    pts = np.stack([wx, wy, np.full(K, float(sample_height))], 1)
    cols, valid = [], np.zeros((K, n), dtype=bool)
    for i, calib in enumerate(calibs):
        uv, _ = project_points(calib, pts)
        q, ok = sample_points(view_features[i], uv[:, 0] / feature_stride, uv[:, 1] / feature_stride)
        cols.append(q)
        valid[:, i] = ok
    return ViewQuerySet(torch.stack(cols, 1), valid)


class ViewGroundInteraction(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.track_ffn = FFN(dim)
        self.view_ffn = FFN(dim)
        self.attn = CrossAttention(dim, num_heads)


def view_ground_interaction(
    track: TrackQuerySet, view: ViewQuerySet, module: ViewGroundInteraction, mode: str = "cross"
) -> TrackQuerySet:
    """Refine track queries with their own per-camera view queries.

    cross: each track query attends over its n valid view queries.
    self:  attention over {track query} + its valid view queries, track token kept.
    off:   identity.
    Tracks without any valid view pass through unchanged in every mode.
    """
    if mode not in INTERACTION_MODES:
        raise ValidationError(f"interaction mode must be one of {INTERACTION_MODES}, got {mode!r}")
    K = len(track)
    if view.queries.shape[0] != K:
        raise ShapeMismatch(f"{K} track queries but {view.queries.shape[0]} view-query rows")
    if mode == "off" or K == 0:
        return track
    q_track = module.track_ffn(track.queries)  # [K, D]
    q_view = module.view_ffn(view.queries)  # [K, n, D]
    valid = torch.as_tensor(view.valid, dtype=torch.bool)
    if mode == "cross":
        keys, mask = q_view, valid.unsqueeze(1)
    else:
        keys = torch.cat([q_track.unsqueeze(1), q_view], 1)
        mask = torch.cat([torch.ones(K, 1, dtype=torch.bool), valid], 1).unsqueeze(1)
    delta = module.attn(q_track.unsqueeze(1), keys, mask, residual=False)[:, 0]
    seen = valid.any(1, keepdim=True).to(delta.dtype)
    return track.with_queries(track.queries + delta * seen)
