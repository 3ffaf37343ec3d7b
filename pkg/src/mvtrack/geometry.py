"""Pinhole camera math and lifting of per-view features onto the ground grid.

World frame: x, y span the ground plane (meters), z points up.
Camera frame: x right, y down, z forward (OpenCV convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import DepthNonPositive, FormatError, ShapeMismatch, ValidationError

MIN_DEPTH = 1e-9
DEFAULT_HEIGHTS = (0.0, 0.6, 1.2, 1.8)


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        if K[2, 2] != 1.0 or K[2, 0] != 0.0 or K[2, 1] != 0.0:
            raise ValidationError("intrinsics must have last row (0, 0, 1)")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValidationError("rotation is not orthonormal")
        if int(self.image_width) <= 0 or int(self.image_height) <= 0:
            raise ValidationError("image size must be positive")

    @property
    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix K[R|T]."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def __eq__(self, other):
        if not isinstance(other, CameraCalibration):
            return NotImplemented
        return (
            np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.image_width == other.image_width
            and self.image_height == other.image_height
        )

    __hash__ = None

    @classmethod
    def look_at(cls, position, target, focal, image_width, image_height, up=(0.0, 0.0, 1.0)):
        """Build a camera at ``position`` whose optical axis passes through ``target``."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        K = np.array(
            [[focal, 0.0, image_width / 2.0], [0.0, focal, image_height / 2.0], [0.0, 0.0, 1.0]]
        )
        return cls(K, R, -R @ position, int(image_width), int(image_height))


def project_world_to_image(calib: CameraCalibration, point) -> tuple[float, float, float]:
    """Project one world point; returns (u, v, depth).

    Raises DepthNonPositive when the point is not in front of the camera.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    cam = calib.rotation @ p + calib.translation
    depth = float(cam[2])
    if depth <= MIN_DEPTH:
        raise DepthNonPositive(f"camera-frame depth {depth:g} <= {MIN_DEPTH:g}")
    uvw = calib.intrinsics @ cam
    return float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]), depth


def project_points(calib: CameraCalibration, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of [N, 3] world points.

    Returns (uv [N, 2], depth [N]). Entries with depth <= MIN_DEPTH get NaN pixels
    instead of raising.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ calib.rotation.T + calib.translation
    depth = cam[:, 2]
    uvw = cam @ calib.intrinsics.T
    front = depth > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / uvw[:, 2:3]
    uv[~front] = np.nan
    return uv, depth


@dataclass(frozen=True)
class GroundGrid:
    """Discretized ground plane. Cell (i, j) has its center at origin + (i, j) * meters_per_cell."""

    cells_x: int
    cells_y: int
    meters_per_cell: float = 0.1
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.meters_per_cell <= 0:
            raise ValidationError("meters_per_cell must be positive")
        if self.cells_x <= 0 or self.cells_y <= 0:
            raise ValidationError("grid must have at least one cell per axis")

    @classmethod
    def from_extent(cls, width_m, height_m, meters_per_cell=0.1, x0=0.0, y0=0.0):
        """Grid covering the rectangle [x0, x0+width_m] x [y0, y0+height_m]."""
        nx = max(1, int(math.ceil(width_m / meters_per_cell - 1e-9)))
        ny = max(1, int(math.ceil(height_m / meters_per_cell - 1e-9)))
        half = meters_per_cell / 2.0
        return cls(nx, ny, meters_per_cell, x0 + half, y0 + half)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells_y, self.cells_x

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the covered area in meters."""
        half = self.meters_per_cell / 2.0
        return (
            self.origin_x - half,
            self.origin_y - half,
            self.origin_x - half + self.cells_x * self.meters_per_cell,
            self.origin_y - half + self.cells_y * self.meters_per_cell,
        )

    def cell_to_world(self, cx, cy):
        return (
            self.origin_x + np.asarray(cx, dtype=np.float64) * self.meters_per_cell,
            self.origin_y + np.asarray(cy, dtype=np.float64) * self.meters_per_cell,
        )

    def world_to_cell(self, x, y):
        # values within 1e-9 of an integer snap to it so cell centers round-trip exactly
        out = []
        for w, o in ((x, self.origin_x), (y, self.origin_y)):
            c = (np.asarray(w, dtype=np.float64) - o) / self.meters_per_cell
            r = np.rint(c)
            out.append(np.where(np.abs(c - r) <= 1e-9 * np.maximum(1.0, np.abs(c)), r, c))
        if np.ndim(out[0]) == 0:
            return float(out[0]), float(out[1])
        return out[0], out[1]

    def contains(self, cx, cy) -> np.ndarray:
        """True where a cell coordinate lies inside the covered area."""
        cx = np.asarray(cx, dtype=np.float64)
        cy = np.asarray(cy, dtype=np.float64)
        return (cx >= -0.5) & (cx <= self.cells_x - 0.5) & (cy >= -0.5) & (cy <= self.cells_y - 0.5)

    def coarsen(self, factor: int) -> "GroundGrid":
        """Grid over the same area with cells ``factor`` times larger (sizes rounded up)."""
        if factor == 1:
            return self
        x_min, y_min, _, _ = self.extent
        mpc = self.meters_per_cell * factor
        return GroundGrid(
            -(-self.cells_x // factor),
            -(-self.cells_y // factor),
            mpc,
            x_min + mpc / 2.0,
            y_min + mpc / 2.0,
        )

    def cell_centers(self) -> np.ndarray:
        """World (x, y) of every cell center, shape [cells_y, cells_x, 2]."""
        xs, ys = self.cell_to_world(np.arange(self.cells_x), np.arange(self.cells_y))
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass
class VoxelGrid:
    ground: GroundGrid
    heights: tuple = DEFAULT_HEIGHTS
    values: torch.Tensor | None = None
    counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.heights = tuple(float(h) for h in self.heights)
        if not self.heights:
            raise ValidationError("need at least one sample height")
        if any(h < 0 for h in self.heights):
            raise ValidationError("heights must be non-negative")
        if any(b <= a for a, b in zip(self.heights, self.heights[1:])):
            raise ValidationError("heights must be strictly increasing")
        if self.values is not None:
            expect = (len(self.heights), self.ground.cells_y, self.ground.cells_x)
            if tuple(self.values.shape[:3]) != expect:
                raise ShapeMismatch(f"voxel values {tuple(self.values.shape)} do not match {expect}")

    def centers(self) -> np.ndarray:
        """World coordinates of voxel centers, shape [Z, cells_y, cells_x, 3]."""
        ground = self.ground.cell_centers()
        out = np.empty((len(self.heights),) + ground.shape[:2] + (3,))
        out[..., :2] = ground[None]
        out[..., 2] = np.asarray(self.heights)[:, None, None]
        return out


def bilinear_sample(fmap, u: float, v: float):
    """Bilinearly sample an [H, W, C] map at continuous (u=x, v=y).

    Returns (feature, valid). Locations outside [0, W-1] x [0, H-1] give a zero
    vector and valid=False. Works on numpy arrays and torch tensors alike.
    """
    H, W = fmap.shape[0], fmap.shape[1]
    if H == 0 or W == 0:
        raise ShapeMismatch("cannot sample an empty map")
    if not (0.0 <= u <= W - 1 and 0.0 <= v <= H - 1):
        return fmap[0, 0] * 0, False
    x0, y0 = int(math.floor(u)), int(math.floor(v))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    out = (
        fmap[y0, x0] * ((1 - fx) * (1 - fy))
        + fmap[y0, x1] * (fx * (1 - fy))
        + fmap[y1, x0] * ((1 - fx) * fy)
        + fmap[y1, x1] * (fx * fy)
    )
    return out, True


def bilinear_weights(u, v, width: int, height: int):
    """Corner indices/weights for batched bilinear sampling with hard validity.

    Returns (index [N, 4] into the flattened map, weight [N, 4], valid [N]).
    Invalid points get all-zero weights.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    valid = np.isfinite(u) & np.isfinite(v)
    valid &= (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    x0 = np.floor(uu).astype(np.int64)
    y0 = np.floor(vv).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = uu - x0, vv - y0
    index = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    weight[~valid] = 0.0
    return index, weight, valid


def sample_points(fmap: torch.Tensor, u, v) -> tuple[torch.Tensor, np.ndarray]:
    """Differentiable batched counterpart of bilinear_sample for a torch [H, W, C] map."""
    H, W, C = fmap.shape
    index, weight, valid = bilinear_weights(u, v, W, H)
    flat = fmap.reshape(H * W, C)
    idx = torch.from_numpy(index.reshape(-1))
    w = torch.from_numpy(weight).to(fmap.dtype)
    gathered = flat.index_select(0, idx).view(-1, 4, C)
    return (gathered * w.unsqueeze(-1)).sum(1), valid


@dataclass(frozen=True, eq=False)
class LiftPlan:
    """Precomputed sampling pattern for lifting n views onto a voxel grid."""

    index: torch.Tensor  # [V, n*4] into the stacked, flattened view maps
    weight: np.ndarray  # [V, n*4], already divided by the valid-view count
    counts: np.ndarray  # [V] number of views with a valid projection
    num_views: int
    feature_shape: tuple


_PLAN_CACHE: dict = {}


def _plan_key(calibs, voxels, feature_shape, stride):
    parts = [voxels.ground, voxels.heights, tuple(feature_shape), float(stride)]
    for c in calibs:
        parts.append(
            (c.intrinsics.tobytes(), c.rotation.tobytes(), c.translation.tobytes(), c.image_width, c.image_height)
        )
    return tuple(parts)


def build_lift_plan(calibs, voxels: VoxelGrid, feature_shape, feature_stride: float) -> LiftPlan:
    """Project every voxel center into every camera and record bilinear taps."""
    key = _plan_key(calibs, voxels, feature_shape, feature_stride)
    plan = _PLAN_CACHE.get(key)
    if plan is not None:
        return plan
    Hf, Wf = feature_shape
    pts = voxels.centers().reshape(-1, 3)
    V, n = pts.shape[0], len(calibs)
    index = np.zeros((V, n, 4), dtype=np.int64)
    weight = np.zeros((V, n, 4))
    valid = np.zeros((V, n), dtype=bool)
    for i, calib in enumerate(calibs):
        uv, _ = project_points(calib, pts)
        idx, w, ok = bilinear_weights(uv[:, 0] / feature_stride, uv[:, 1] / feature_stride, Wf, Hf)
        index[:, i] = idx + i * Hf * Wf
        weight[:, i] = w
        valid[:, i] = ok
    counts = valid.sum(1)
    weight /= np.maximum(counts, 1)[:, None, None]
    plan = LiftPlan(
        torch.from_numpy(index.reshape(V, n * 4)), weight.reshape(V, n * 4), counts, n, (Hf, Wf)
    )
    if len(_PLAN_CACHE) > 64:
        _PLAN_CACHE.clear()
    _PLAN_CACHE[key] = plan
    return plan


def lift_to_voxels(
    view_features: Sequence[torch.Tensor],
    calibs: Sequence[CameraCalibration],
    voxels: VoxelGrid,
    feature_stride: float,
) -> VoxelGrid:
    """Fill ``voxels`` by averaging bilinear samples over the views that see each voxel center.

    ``view_features`` may be a list of [H_f, W_f, C] maps or one stacked [n, H_f, W_f, C]
    tensor. Voxels visible in no view are zero.
    """
    if len(view_features) != len(calibs):
        raise ShapeMismatch(f"{len(calibs)} calibrations but {len(view_features)} feature maps")
    if not isinstance(view_features, torch.Tensor):
        view_features = torch.stack([torch.as_tensor(f) for f in view_features])
    n, Hf, Wf, C = view_features.shape
    plan = build_lift_plan(calibs, voxels, (Hf, Wf), feature_stride)
    flat = view_features.reshape(n * Hf * Wf, C)
    w = torch.from_numpy(plan.weight).to(flat.dtype)
    V = plan.index.shape[0]
    gathered = flat.index_select(0, plan.index.reshape(-1)).view(V, n * 4, C)
    values = (gathered * w.unsqueeze(-1)).sum(1)
    g = voxels.ground
    values = values.view(len(voxels.heights), g.cells_y, g.cells_x, C)
    return VoxelGrid(g, voxels.heights, values, plan.counts.reshape(len(voxels.heights), g.cells_y, g.cells_x))


def collapse_height(voxels: VoxelGrid) -> torch.Tensor:
    """[Z, Hy, Wx, C] -> [Hy, Wx, Z*C], height-0 channels first."""
    if voxels.values is None:
        raise ValidationError("voxel grid has not been filled")
    Z, Hy, Wx, C = voxels.values.shape
    return voxels.values.permute(1, 2, 0, 3).reshape(Hy, Wx, Z * C)


# --- calibration text format -------------------------------------------------

_CALIB_FIELDS = {"K": 9, "R": 9, "T": 3, "SIZE": 2}


def format_calibrations(calibs: Sequence[CameraCalibration]) -> str:
    blocks = []
    for c in calibs:
        lines = [
            "K " + " ".join(repr(float(x)) for x in c.intrinsics.reshape(-1)),
            "R " + " ".join(repr(float(x)) for x in c.rotation.reshape(-1)),
            "T " + " ".join(repr(float(x)) for x in c.translation.reshape(-1)),
            f"SIZE {int(c.image_width)} {int(c.image_height)}",
        ]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def parse_calibrations(text: str, path=None) -> list[CameraCalibration]:
    calibs = []
    block: dict = {}
    start = None

    def flush(line_no):
        if not block:
            return
        missing = [k for k in _CALIB_FIELDS if k not in block]
        if missing:
            raise FormatError(f"camera block missing {', '.join(missing)}", path, start)
        try:
            calibs.append(
                CameraCalibration(block["K"], block["R"], block["T"], int(block["SIZE"][0]), int(block["SIZE"][1]))
            )
        except ValidationError as exc:
            raise FormatError(str(exc), path, start) from exc
        block.clear()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            flush(line_no)
            continue
        tag, values = parts[0], parts[1:]
        if tag not in _CALIB_FIELDS:
            raise FormatError(f"unknown calibration tag {tag!r}", path, line_no)
        if len(values) != _CALIB_FIELDS[tag]:
            raise FormatError(f"{tag} needs {_CALIB_FIELDS[tag]} values, got {len(values)}", path, line_no)
        if tag in block:
            raise FormatError(f"duplicate {tag} in camera block", path, line_no)
        if not block:
            start = line_no
        try:
            block[tag] = [int(x) for x in values] if tag == "SIZE" else [float(x) for x in values]
        except ValueError as exc:
            raise FormatError(f"non-numeric value in {tag} line", path, line_no) from exc
    flush(None)
    if not calibs:
        raise FormatError("no camera blocks found", path)
    return calibs
