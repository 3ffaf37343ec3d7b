"""Heatmap peak extraction, gated optimal association and track lifecycle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeMismatch
from .geometry import GroundGrid


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    score: float

    @property
    def cell(self):
        return (self.x, self.y)


@dataclass
class TrackState:
    track_id: int
    position: np.ndarray  # ground cells (x, y)
    miss_count: int = 0
    history: list = field(default_factory=list)  # (frame, (x, y))
    pending: list = field(default_factory=list)  # coasted (frame, (x, y)) not yet confirmed


@dataclass
class Trajectory:
    track_id: int
    points: list  # (frame, x_m, y_m)


def extract_peaks(heatmap, threshold: float = 0.4, max_detections: int = 100) -> list:
    """Cells >= threshold that strictly exceed all 8 neighbours, best scores first.

    Equal scores are ordered by row-major index.
    """
    h = np.asarray(heatmap.detach().cpu().numpy() if hasattr(heatmap, "detach") else heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeMismatch(f"heatmap must be 2-D, got shape {h.shape}")
    H, W = h.shape
    padded = np.full((H + 2, W + 2), -np.inf)
    padded[1:-1, 1:-1] = h
    peak = h >= threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            peak &= h > padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
    ys, xs = np.nonzero(peak)
    scores = h[ys, xs]
    order = np.lexsort((ys * W + xs, -scores))[:max_detections]
    return [Detection(int(xs[i]), int(ys[i]), float(scores[i])) for i in order]


def associate(predicted, track_ids, detections, gate: float):
    """Gated min-cost matching between predicted track cells and detection cells.

    Maximizes the number of matched pairs within ``gate`` and, among those,
    minimizes total Euclidean distance. Returns (matches as (track_row, det_row),
    unmatched track rows, unmatched detection rows).
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    dets = np.array([d.cell if isinstance(d, Detection) else d for d in detections], dtype=np.float64).reshape(-1, 2)
    K, N = len(predicted), len(dets)
    if K == 0 or N == 0:
        return [], list(range(K)), list(range(N))
    # rows ordered by track id for deterministic tie-breaking
    row_order = sorted(range(K), key=lambda i: (track_ids[i], i))
    dist = np.linalg.norm(predicted[row_order][:, None, :] - dets[None, :, :], axis=-1)
    allowed = dist <= gate
    big = gate * (min(K, N) + 1)
    cost = np.where(allowed, dist - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    matches = sorted((row_order[r], int(c)) for r, c in zip(rows, cols) if allowed[r, c])
    mt = {m[0] for m in matches}
    md = {m[1] for m in matches}
    return matches, [i for i in range(K) if i not in mt], [j for j in range(N) if j not in md]


class Tracker:
    """Offset-propagated tracking-by-detection on ground cells."""

    def __init__(self, grid: GroundGrid, gate: float = 10.0, max_misses: int = 1):
        self.grid = grid
        self.gate = gate
        self.max_misses = max_misses
        self.tracks: list[TrackState] = []
        self.finished: list[Trajectory] = []
        self.next_id = 0

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position for t in self.tracks], dtype=np.float64).reshape(-1, 2)

    @property
    def track_ids(self) -> list:
        return [t.track_id for t in self.tracks]

    def _to_trajectory(self, track: TrackState) -> Trajectory:
        pts = []
        for frame, (cx, cy) in track.history:
            x, y = self.grid.cell_to_world(cx, cy)
            pts.append((frame, float(x), float(y)))
        return Trajectory(track.track_id, pts)

    def _clip(self, pos):
        return np.clip(pos, [0.0, 0.0], [self.grid.cells_x - 1, self.grid.cells_y - 1])

    def step(self, offsets, detections, frame: int) -> list:
        """Advance one frame; returns trajectories retired during this step."""
        offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
        if len(offsets) != len(self.tracks):
            raise ShapeMismatch(f"{len(offsets)} offsets for {len(self.tracks)} tracks")
        predicted = self.positions + offsets
        matches, lost, new = associate(predicted, self.track_ids, detections, self.gate)
        for ti, di in matches:
            track = self.tracks[ti]
            cell = np.asarray(detections[di].cell if isinstance(detections[di], Detection) else detections[di], float)
            track.history.extend(track.pending)
            track.pending = []
            track.position = cell
            track.history.append((frame, (float(cell[0]), float(cell[1]))))
            track.miss_count = 0
        retired = []
        for ti in lost:
            track = self.tracks[ti]
            track.position = self._clip(predicted[ti])
            track.miss_count += 1
            track.pending.append((frame, (float(track.position[0]), float(track.position[1]))))
        alive = []
        for track in self.tracks:
            if track.miss_count > self.max_misses:
                retired.append(self._to_trajectory(track))
            else:
                alive.append(track)
        self.tracks = alive
        for di in new:
            d = detections[di]
            cell = np.asarray(d.cell if isinstance(d, Detection) else d, dtype=np.float64)
            self.tracks.append(TrackState(self.next_id, cell, 0, [(frame, (float(cell[0]), float(cell[1])))]))
            self.next_id += 1
        self.finished.extend(retired)
        return retired

    def trajectories(self) -> list:
        """Retired plus live trajectories, sorted by id."""
        out = self.finished + [self._to_trajectory(t) for t in self.tracks]
        return sorted(out, key=lambda t: t.track_id)


def step_tracks(tracker: Tracker, offsets, detections, frame: int) -> list:
    return tracker.step(offsets, detections, frame)


def trajectory_rows(trajectories) -> list:
    """Flatten to (frame, track_id, x_m, y_m) rows sorted by frame then id."""
    rows = [(f, t.track_id, x, y) for t in trajectories for f, x, y in t.points]
    return sorted(rows, key=lambda r: (r[0], r[1]))
