"""Target construction and the uncertainty-weighted training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NaNDetected, PositionOutOfGrid, ShapeMismatch

PROB_EPS = 1e-6
DEFAULT_GROUND_WEIGHT = 10.0


@dataclass
class LossBreakdown:
    l_ground: float
    l_track: float
    l_img: float
    sigma_c: float
    sigma_t: float
    total: float

    def recombine(self, ground_weight: float = DEFAULT_GROUND_WEIGHT) -> float:
        return (
            ground_weight * math.exp(-self.sigma_c) * self.l_ground
            + math.exp(-self.sigma_t) * self.l_track
            + self.l_img
            + self.sigma_c
            + self.sigma_t
        )


def build_gt_heatmap(centers, shape, sigma: float):
    """Gaussian target H* and center mask C* on an (H, W) grid.

    centers: iterable of (x, y) cells; non-integer centers are rounded to the
    nearest cell. Overlapping Gaussians combine by max, so H* = 1 exactly at
    every center cell.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    H, W = shape
    heat = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    for cx, cy in np.asarray(list(centers), dtype=np.float64).reshape(-1, 2):
        ix, iy = int(np.rint(cx)), int(np.rint(cy))
        if not (0 <= ix < W and 0 <= iy < H):
            raise PositionOutOfGrid(f"center ({cx:.3f}, {cy:.3f}) outside {W}x{H} grid")
        g = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat, g, out=heat)
        mask[iy, ix] = True
    heat[mask] = 1.0
    return heat, mask


def focal_loss(pred: torch.Tensor, target, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss for Gaussian targets.

    Positives are cells where target == 1; the sum is normalized by
    max(1, number of positives).
    """
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if not torch.isfinite(pred).all():
        raise NaNDetected("non-finite heatmap prediction")
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = target == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - target) ** beta * p**alpha * torch.log(1 - p)
    total = -(torch.where(pos, pos_term, neg_term)).sum()
    return total / max(1, int(pos.sum()))


def offset_l1_loss(pred: torch.Tensor, target, valid) -> torch.Tensor:
    """Mean over valid rows of |dx - dx*| + |dy - dy*|; zero when no row is valid."""
    target = torch.as_tensor(target, dtype=pred.dtype)
    valid = torch.as_tensor(np.asarray(valid, dtype=bool).reshape(-1))
    if pred.shape != target.shape or pred.shape[0] != valid.shape[0]:
        raise ShapeMismatch(f"offsets {tuple(pred.shape)}, targets {tuple(target.shape)}, mask {tuple(valid.shape)}")
    k = int(valid.sum())
    if k == 0:
        return pred.sum() * 0.0
    return (pred[valid] - target[valid]).abs().sum() / k


def total_loss(l_ground, l_track, l_img, sigma_c, sigma_t, ground_weight: float = DEFAULT_GROUND_WEIGHT):
    """ground_weight*exp(-sigma_c)*l_ground + exp(-sigma_t)*l_track + l_img + sigma_c + sigma_t."""
    total = (
        ground_weight * torch.exp(-sigma_c) * l_ground + torch.exp(-sigma_t) * l_track + l_img + sigma_c + sigma_t
    )
    if not torch.isfinite(torch.as_tensor(total)).all():
        raise NaNDetected("non-finite total loss")
    return total


def build_offset_targets(prev_positions: dict, current_positions: dict, track_ids):
    """O* = position_t0 - position_t0-1 per track id; ids gone at t0 are invalid.

    Positions are dicts id -> (x, y) in cells.
    """
    track_ids = list(track_ids)
    targets = np.zeros((len(track_ids), 2))
    valid = np.zeros(len(track_ids), dtype=bool)
    for row, tid in enumerate(track_ids):
        if tid in current_positions and tid in prev_positions:
            targets[row] = np.subtract(current_positions[tid], prev_positions[tid])
            valid[row] = True
    return targets, valid
