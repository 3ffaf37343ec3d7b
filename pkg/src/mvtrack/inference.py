"""Frame-by-frame tracking with a trained model, and the ground-truth oracle path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import GroundGrid
from .losses import build_gt_heatmap, build_offset_targets
from .model import MVTrackModel, image_to_tensor
from .simulator import Sequence
from .tracker import Detection, Tracker, extract_peaks, trajectory_rows


@dataclass
class TrackerParams:
    detection_threshold: float = 0.4
    gate_m: float = 1.0
    max_misses: int = 1
    max_detections: int = 100

    def __post_init__(self):
        if not 0 < self.detection_threshold < 1:
            raise ValueError("detection_threshold must lie in (0, 1)")
        if self.gate_m <= 0 or self.max_misses < 0 or self.max_detections < 1:
            raise ValueError("gate_m must be positive, max_misses >= 0, max_detections >= 1")


def coordinate_detections(positions, scores, grid: GroundGrid, threshold: float) -> list:
    pos = positions.detach().numpy()
    sc = scores.detach().numpy()
    best: dict = {}
    for (x, y), s in zip(pos, sc):
        if s < threshold:
            continue
        cell = (int(np.clip(np.rint(x), 0, grid.cells_x - 1)), int(np.clip(np.rint(y), 0, grid.cells_y - 1)))
        if s > best.get(cell, -1.0):
            best[cell] = float(s)
    dets = [Detection(cx, cy, s) for (cx, cy), s in best.items()]
    return sorted(dets, key=lambda d: (-d.score, d.y, d.x))


@torch.no_grad()
def track_sequence(model: MVTrackModel, seq: Sequence, params: TrackerParams | None = None) -> list:
    """Run detection + offset-guided association over ``seq``; returns (frame, id, x_m, y_m) rows."""
    params = params or TrackerParams()
    model.eval()
    if model._scene is None:
        model.set_scene(seq.calibs, seq.grid)
    grid = model.grid
    tracker = Tracker(grid, gate=params.gate_m / grid.meters_per_cell, max_misses=params.max_misses)
    model.last_track_source = "tracker"
    prev = None
    for frame in seq.frames:
        enc = model.encode_frame(image_to_tensor(np.stack(frame.images)))
        offsets = np.zeros((0, 2))
        if prev is not None and tracker.tracks:
            out = model.track_step(prev, enc, tracker.positions, tracker.track_ids)
            offsets = out.offsets.numpy()
        det_out = model.detect(enc)
        if model.config.supervision == "heatmap":
            dets = extract_peaks(det_out, params.detection_threshold, params.max_detections)
        else:
            dets = coordinate_detections(det_out[0], det_out[1], grid, params.detection_threshold)[: params.max_detections]
        tracker.step(offsets, dets, frame.index)
        prev = enc
    model.train()
    return trajectory_rows(tracker.trajectories())


def oracle_track(seq: Sequence, sigma: float = 3.0, params: TrackerParams | None = None, grid: GroundGrid | None = None):
    """Track with ground-truth heatmaps and ground-truth offsets in place of the network."""
    params = params or TrackerParams()
    grid = grid or seq.grid
    tracker = Tracker(grid, gate=params.gate_m / grid.meters_per_cell, max_misses=params.max_misses)
    prev_cells = None
    for frame in seq.frames:
        cells = {p.person_id: grid.world_to_cell(p.x, p.y) for p in frame.annotation.persons}
        centers = np.array([np.clip(np.rint(c), 0, [grid.cells_x - 1, grid.cells_y - 1]) for c in cells.values()])
        heat, _ = build_gt_heatmap(centers.reshape(-1, 2), grid.shape, sigma)
        offsets = np.zeros((len(tracker.tracks), 2))
        if prev_cells and tracker.tracks:
            # each track follows the person nearest to it at the previous frame
            pids = list(prev_cells)
            prev_arr = np.array([prev_cells[p] for p in pids])
            owners = [pids[int(np.argmin(np.linalg.norm(prev_arr - pos, axis=1)))] for pos in tracker.positions]
            rows = list(range(len(owners)))
            targets, valid = build_offset_targets(
                {r: prev_cells[o] for r, o in zip(rows, owners)},
                {r: cells[o] for r, o in zip(rows, owners) if o in cells},
                rows,
            )
            offsets = np.where(valid[:, None], targets, 0.0)
        dets = extract_peaks(heat, params.detection_threshold, params.max_detections)
        tracker.step(offsets, dets, frame.index)
        prev_cells = cells
    return trajectory_rows(tracker.trajectories())
