"""Per-view feature extraction and post-lift ground fusion.

The view backbone is a small stand-in for the first three ResNet stages:
strides 4, 8 and 16 with (16, 32, 64) channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeMismatch
from .layers import Conv2d
from .ops import upsample_nearest

STAGE_CHANNELS = (16, 32, 64)
VIEW_STRIDE = 4


@dataclass
class ViewFeaturePack:
    per_scale: list  # L tensors [..., H/s, W/s, C_l] for s = 4, 8, 16
    fused: torch.Tensor  # [..., H/4, W/4, D]
    view_heatmap: torch.Tensor  # [..., H/4, W/4], sigmoid output

    def view(self, i: int) -> "ViewFeaturePack":
        """Slice camera ``i`` out of a batched pack."""
        return ViewFeaturePack([s[i] for s in self.per_scale], self.fused[i], self.view_heatmap[i])


@dataclass
class GroundFeaturePack:
    per_scale: list  # L tensors [cells_y / 2^l, cells_x / 2^l, D]

    @property
    def shapes(self):
        return [tuple(t.shape[:2]) for t in self.per_scale]


class ViewBackbone(nn.Module):
    def __init__(self, channels=STAGE_CHANNELS):
        super().__init__()
        c1, c2, c3 = channels
        # first stage downsamples twice so the pyramid starts at stride 4
        self.stages = nn.ModuleList(
            [
                nn.ModuleList([Conv2d(3, c1, 3, 2), Conv2d(c1, c1, 3, 2)]),
                nn.ModuleList([Conv2d(c1, c2, 3, 2), Conv2d(c2, c2, 3, 1)]),
                nn.ModuleList([Conv2d(c2, c3, 3, 2), Conv2d(c3, c3, 3, 1)]),
            ]
        )

    def forward(self, images):
        feats = []
        x = images
        for stage in self.stages:
            for conv in stage:
                x = torch.relu(conv(x))
            feats.append(x)
        return feats


class ViewFPN(nn.Module):
    """Top-down pyramid to a single stride-4 map, plus the per-view center heatmap head."""

    def __init__(self, in_channels=STAGE_CHANNELS, dim: int = 64):
        super().__init__()
        self.lateral = nn.ModuleList([Conv2d(c, dim, 1) for c in in_channels])
        self.smooth = Conv2d(dim, dim, 3)
        self.heatmap_head = Conv2d(dim, 1, 1)
        with torch.no_grad():
            self.heatmap_head.bias.fill_(-2.19)

    def forward(self, per_scale):
        p = self.lateral[-1](per_scale[-1])
        for lvl in range(len(per_scale) - 2, -1, -1):
            lat = self.lateral[lvl](per_scale[lvl])
            p = lat + upsample_nearest(p, lat.shape[-3:-1])
        fused = self.smooth(p)
        heat = torch.sigmoid(self.heatmap_head(fused)[..., 0])
        return fused, heat


def extract_view_features(images: torch.Tensor, backbone: ViewBackbone, fpn: ViewFPN) -> ViewFeaturePack:
    """images: [H, W, 3] or [B, H, W, 3] floats; H and W must be divisible by 16."""
    H, W = images.shape[-3], images.shape[-2]
    if images.shape[-1] != 3 or H % 16 or W % 16:
        raise ShapeMismatch(f"image must be [H, W, 3] with H, W divisible by 16, got {tuple(images.shape)}")
    per_scale = backbone(images)
    fused, heat = fpn(per_scale)
    return ViewFeaturePack(per_scale, fused, heat)


class GroundFusion(nn.Module):
    """One 3x3 conv per ground scale mapping heights*C channels to D."""

    def __init__(self, in_channels: int, dim: int, num_levels: int):
        super().__init__()
        self.convs = nn.ModuleList([Conv2d(in_channels, dim, 3) for _ in range(num_levels)])

    def forward(self, collapsed):
        return fuse_ground(collapsed, self)


def fuse_ground(collapsed, fusion: GroundFusion) -> GroundFeaturePack:
    if len(collapsed) != len(fusion.convs):
        raise ShapeMismatch(f"expected {len(fusion.convs)} collapsed scales, got {len(collapsed)}")
    return GroundFeaturePack([conv(x) for conv, x in zip(fusion.convs, collapsed)])
