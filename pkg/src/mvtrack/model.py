"""The full network: view backbone -> lift -> ground fusion -> encoder -> decoders."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import VIEW_STRIDE, GroundFeaturePack, GroundFusion, ViewBackbone, ViewFPN, extract_view_features
from .decoder import (
    CoordinateDecoder,
    HeatmapDecoder,
    OffsetDecoder,
    coordinate_decode,
    heatmap_decode,
    offset_decode,
)
from .encoder import (
    INTERACTION_MODES,
    GroundEncoder,
    ViewGroundInteraction,
    encode_ground,
    sample_track_queries,
    sample_view_queries,
    view_ground_interaction,
)
from .errors import ConfigInvalid
from .geometry import DEFAULT_HEIGHTS, GroundGrid, VoxelGrid, collapse_height, lift_to_voxels
from .ops import MsdaConfig

SUPERVISION_MODES = ("heatmap", "coordinate")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_heads: int = 4
    num_points: int = 4
    num_levels: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 2
    heights: tuple = DEFAULT_HEIGHTS
    ground_cell_m: float = 0.4
    view_query_height: float = 0.9
    interaction_mode: str = "cross"
    supervision: str = "heatmap"
    num_coordinate_queries: int = 16
    heatmap_sigma: float = 1.5  # ground cells
    view_heatmap_sigma: float = 2.0  # view feature cells
    ground_weight: float = 10.0

    def __post_init__(self):
        self.heights = tuple(float(h) for h in self.heights)
        if self.interaction_mode not in INTERACTION_MODES:
            raise ConfigInvalid(f"interaction mode must be one of {INTERACTION_MODES}")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigInvalid(f"supervision must be one of {SUPERVISION_MODES}")
        if self.ground_cell_m <= 0 or self.heatmap_sigma <= 0 or self.view_heatmap_sigma <= 0:
            raise ConfigInvalid("ground_cell_m and heatmap sigmas must be positive")
        if min(self.encoder_layers, self.decoder_layers) < 1:
            raise ConfigInvalid("encoder_layers and decoder_layers must be >= 1")
        if self.embed_dim % 4:
            raise ConfigInvalid("embed_dim must be divisible by 4")
        try:
            self.msda
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @property
    def msda(self) -> MsdaConfig:
        return MsdaConfig(self.num_heads, self.num_points, self.num_levels, self.embed_dim)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heights"] = list(self.heights)
        return d


def model_grid(scene_grid: GroundGrid, cell_m: float) -> GroundGrid:
    """Grid over the same area as ``scene_grid`` at the model's resolution."""
    x0, y0, x1, y1 = scene_grid.extent
    return GroundGrid.from_extent(x1 - x0, y1 - y0, cell_m, x0, y0)


def image_to_tensor(images) -> torch.Tensor:
    """uint8 [..., H, W, 3] -> float32 in [-0.5, 0.5]."""
    arr = np.asarray(images)
    return torch.from_numpy(arr.astype(np.float32) / 255.0 - 0.5)


@dataclass
class FrameEncoding:
    views: object  # ViewFeaturePack batched over cameras
    ground: GroundFeaturePack
    encoded: object  # EncodedGround


@dataclass
class StepOutput:
    heatmap: torch.Tensor | None
    offsets: torch.Tensor
    track_ids: list
    prev: FrameEncoding
    cur: FrameEncoding
    coordinates: tuple | None = None
    extras: dict = field(default_factory=dict)


class MVTrackModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        D, L = config.embed_dim, config.num_levels
        self.backbone = ViewBackbone()
        self.viewfpn = ViewFPN(dim=D)
        self.groundfuse = GroundFusion(len(config.heights) * D, D, L)
        self.encoder = GroundEncoder(config.msda, config.encoder_layers)
        self.interaction = ViewGroundInteraction(D, config.num_heads)
        self.offset_decoder = OffsetDecoder(config.msda, config.decoder_layers)
        if config.supervision == "heatmap":
            self.heatmap_decoder = HeatmapDecoder(D, L)
        else:
            self.coordinate_decoder = CoordinateDecoder(config.msda, config.num_coordinate_queries, config.decoder_layers)
        self.loss = nn.Module()
        self.loss.sigma_c = nn.Parameter(torch.zeros(()))
        self.loss.sigma_t = nn.Parameter(torch.zeros(()))
        self._scene = None

    def set_scene(self, calibs, scene_grid: GroundGrid):
        """Bind camera calibrations and the ground area the model reasons over."""
        grid = model_grid(scene_grid, self.config.ground_cell_m)
        self._scene = (list(calibs), grid, [grid.coarsen(2**lvl) for lvl in range(self.config.num_levels)])
        return self

    @property
    def calibs(self):
        return self._scene[0]

    @property
    def grid(self) -> GroundGrid:
        return self._scene[1]

    def encode_frame(self, images: torch.Tensor) -> FrameEncoding:
        """images: [n, H, W, 3] float tensor, one per camera."""
        calibs, _, scales = self._scene
        views = extract_view_features(images, self.backbone, self.viewfpn)
        collapsed = []
        for g in scales:
            vox = lift_to_voxels(views.fused, calibs, VoxelGrid(g, self.config.heights), VIEW_STRIDE)
            collapsed.append(collapse_height(vox))
        ground = self.groundfuse(collapsed)
        return FrameEncoding(views, ground, encode_ground(ground, self.encoder))

    def encode_pair(self, prev_images, cur_images):
        """Run both frames through the shared backbone in one batch."""
        n = len(self.calibs)
        both = torch.cat([prev_images, cur_images], 0)
        calibs, _, scales = self._scene
        views = extract_view_features(both, self.backbone, self.viewfpn)
        out = []
        for k in range(2):
            sl = slice(k * n, (k + 1) * n)
            vpack = type(views)([s[sl] for s in views.per_scale], views.fused[sl], views.view_heatmap[sl])
            collapsed = [
                collapse_height(lift_to_voxels(vpack.fused, calibs, VoxelGrid(g, self.config.heights), VIEW_STRIDE))
                for g in scales
            ]
            ground = self.groundfuse(collapsed)
            out.append(FrameEncoding(vpack, ground, encode_ground(ground, self.encoder)))
        return out[0], out[1]

    def track_step(self, prev: FrameEncoding, cur: FrameEncoding, positions, track_ids) -> StepOutput:
        """Offsets for tracks at ``positions`` (model-grid cells at t0-1) plus current detections map."""
        track = sample_track_queries(prev.encoded, positions, track_ids)
        view = sample_view_queries(
            prev.views.fused, self.calibs, track.positions, self.grid, self.config.view_query_height, VIEW_STRIDE
        )
        track = view_ground_interaction(track, view, self.interaction, self.config.interaction_mode)
        offsets = offset_decode(track, cur.encoded, self.offset_decoder)
        if self.config.supervision == "heatmap":
            return StepOutput(heatmap_decode(cur.encoded, self.heatmap_decoder).values, offsets.offsets, offsets.track_ids, prev, cur)
        coords = coordinate_decode(cur.encoded, self.coordinate_decoder)
        return StepOutput(None, offsets.offsets, offsets.track_ids, prev, cur, coordinates=coords)

    def detect(self, enc: FrameEncoding):
        """Current-frame detection output: heatmap [H, W] or (positions, scores)."""
        if self.config.supervision == "heatmap":
            return heatmap_decode(enc.encoded, self.heatmap_decoder).values
        return coordinate_decode(enc.encoded, self.coordinate_decoder)
