"""Deterministic synthetic multi-camera scenes with exact ground truth."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid
from .geometry import CameraCalibration, GroundGrid, project_points


@dataclass
class SceneConfig:
    world_width: float = 12.0
    world_height: float = 8.0
    num_cameras: int = 2
    camera_placement: str = "corners"  # "corners" | "ring" | "explicit"
    ring_radius: float = 8.0
    camera_height: float = 3.0
    camera_tilt_deg: float = 30.0
    hfov_deg: float = 90.0
    camera_poses: list = field(default_factory=list)  # [{"position": [x,y,z], "target": [x,y,z]}]
    num_agents: int = 3
    speed_min: float = 0.1
    speed_max: float = 0.3
    waypoints: int = 4
    frames: int = 200
    image_width: int = 64
    image_height: int = 32
    meters_per_cell: float = 0.1
    agent_radius: float = 0.25
    agent_height: float = 1.7
    seed: int = 7

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.world_width <= 0 or self.world_height <= 0:
            raise ConfigInvalid("world extents must be positive")
        if self.frames < 2:
            raise ConfigInvalid("frames must be >= 2")
        if self.num_agents < 0:
            raise ConfigInvalid("num_agents must be >= 0")
        if self.num_cameras < 1:
            raise ConfigInvalid("need at least one camera")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigInvalid("speed range must satisfy 0 <= speed_min <= speed_max")
        if self.waypoints < 1:
            raise ConfigInvalid("waypoints must be >= 1")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigInvalid("image size must be positive")
        if self.camera_placement not in ("corners", "ring", "explicit"):
            raise ConfigInvalid(f"unknown camera_placement {self.camera_placement!r}")
        if self.camera_placement == "explicit" and len(self.camera_poses) != self.num_cameras:
            raise ConfigInvalid("explicit placement needs one pose per camera")
        if not 0 < self.camera_tilt_deg < 89:
            raise ConfigInvalid("camera_tilt_deg must lie in (0, 89)")
        if not 0 < self.hfov_deg < 179:
            raise ConfigInvalid("hfov_deg must lie in (0, 179)")
        if self.meters_per_cell <= 0 or self.agent_radius <= 0 or self.agent_height <= 2 * self.agent_radius:
            raise ConfigInvalid("meters_per_cell, agent_radius must be positive and height > 2*radius")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"unknown scene config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def grid(self) -> GroundGrid:
        return GroundGrid.from_extent(self.world_width, self.world_height, self.meters_per_cell)


@dataclass
class PersonAnnotation:
    person_id: int
    x: float
    y: float
    views: list  # per camera (u, v, visible)


@dataclass
class AnnotationFrame:
    frame: int
    persons: list

    def positions(self) -> dict:
        return {p.person_id: (p.x, p.y) for p in self.persons}


@dataclass
class Frame:
    index: int
    images: list  # per camera uint8 [H, W, 3]
    annotation: AnnotationFrame


@dataclass
class Sequence:
    calibs: list
    grid: GroundGrid
    frames: list
    config: SceneConfig | None = None

    def __len__(self):
        return len(self.frames)

    def slice(self, start, stop=None) -> "Sequence":
        return Sequence(self.calibs, self.grid, self.frames[start:stop], self.config)

    @property
    def num_cameras(self):
        return len(self.calibs)

    def trajectories(self) -> list:
        """Ground-truth rows (frame, person_id, x_m, y_m)."""
        return [(f.index, p.person_id, p.x, p.y) for f in self.frames for p in f.annotation.persons]


def make_cameras(config: SceneConfig) -> list:
    W, H, h = config.world_width, config.world_height, config.camera_height
    center = np.array([W / 2.0, H / 2.0, 0.0])
    if config.camera_placement == "explicit":
        positions = [np.asarray(p["position"], dtype=float) for p in config.camera_poses]
        targets = [np.asarray(p["target"], dtype=float) for p in config.camera_poses]
    else:
        if config.camera_placement == "corners" and config.num_cameras <= 4:
            corners = [(0.0, 0.0), (W, H), (W, 0.0), (0.0, H)]
            positions = [np.array([x, y, h]) for x, y in corners[: config.num_cameras]]
        else:
            positions = []
            for i in range(config.num_cameras):
                a = 2 * math.pi * i / config.num_cameras + math.pi / 4
                positions.append(center + np.array([config.ring_radius * math.cos(a), config.ring_radius * math.sin(a), h]))
        tilt = math.radians(config.camera_tilt_deg)
        targets = []
        for p in positions:
            d = center[:2] - p[:2]
            d /= np.linalg.norm(d)
            targets.append(p + np.array([d[0] * math.cos(tilt), d[1] * math.cos(tilt), -math.sin(tilt)]))
    focal = config.image_width / 2.0 / math.tan(math.radians(config.hfov_deg) / 2.0)
    return [
        CameraCalibration.look_at(p, t, focal, config.image_width, config.image_height) for p, t in zip(positions, targets)
    ]


def agent_color(person_id: int) -> np.ndarray:
    digest = hashlib.sha256(f"agent-{person_id}".encode()).digest()
    return np.array([64 + b % 192 for b in digest[:3]], dtype=np.uint8)


BACKGROUND = np.array([40, 40, 40], dtype=np.uint8)


def render_view(
    agents,
    calib: CameraCalibration,
    image_size=None,
    radius: float = 0.25,
    height: float = 1.7,
    background=BACKGROUND,
) -> np.ndarray:
    """Ray-cast vertical capsules into a flat background, far to near.

    agents: iterable of (person_id, x, y). Pixel (col, row) samples the ray
    through image point (u=col, v=row). Returns uint8 [H, W, 3].
    """
    W, H = image_size if image_size is not None else (calib.image_width, calib.image_height)
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = background
    agents = list(agents)
    if not agents:
        return img
    cols, rows = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    pix = np.stack([cols.ravel(), rows.ravel(), np.ones(W * H)], 1)
    dirs = pix @ np.linalg.inv(calib.intrinsics).T @ calib.rotation  # world-frame ray directions
    origin = calib.center
    feet = np.array([[x, y, 0.0] for _, x, y in agents])
    depth = feet @ calib.rotation[2] + calib.translation[2]
    order = np.argsort(-depth, kind="stable")
    seg = np.array([0.0, 0.0, height - 2 * radius])
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ seg
    c = seg @ seg
    flat = img.reshape(-1, 3)
    for k in order:
        if depth[k] <= 0:
            continue
        pid, x, y = agents[k]
        A = np.array([x, y, radius])
        w0 = origin - A
        dd = dirs @ w0
        ee = seg @ w0
        denom = a * c - b * b
        s = np.clip(np.where(denom > 1e-12, (a * ee - b * dd) / np.where(denom > 1e-12, denom, 1.0), 0.0), 0.0, 1.0)
        t = np.maximum((b * s - dd) / a, 0.0)
        s = np.clip((ee + t * b) / c, 0.0, 1.0)
        closest = origin + t[:, None] * dirs - (A + s[:, None] * seg)
        hit = (np.einsum("ij,ij->i", closest, closest) <= radius * radius) & (t > 0)
        flat[hit] = agent_color(pid)
    return img


def _advance(pos, targets, k, speed, bounds):
    """Move ``speed`` meters along the waypoint loop; returns (pos, next waypoint index)."""
    remaining = speed
    for _ in range(4 * len(targets) + 4):
        goal = targets[k]
        d = goal - pos
        dist = float(np.hypot(d[0], d[1]))
        if dist > remaining:
            pos = pos + d * (remaining / dist)
            break
        pos = goal.copy()
        remaining -= dist
        k = (k + 1) % len(targets)
        if remaining <= 0:
            break
    # reflect back into the world rectangle
    for axis in (0, 1):
        lo, hi = 0.0, bounds[axis]
        if pos[axis] < lo:
            pos[axis] = 2 * lo - pos[axis]
        elif pos[axis] > hi:
            pos[axis] = 2 * hi - pos[axis]
    return pos, k


def simulate_trajectories(config: SceneConfig) -> np.ndarray:
    """Agent positions [frames, agents, 2] in meters."""
    rng = np.random.default_rng(config.seed)
    bounds = (config.world_width, config.world_height)
    margin = min(0.5, 0.25 * min(bounds))
    out = np.zeros((config.frames, config.num_agents, 2))
    for j in range(config.num_agents):
        lo = np.array([margin, margin])
        hi = np.array(bounds) - margin
        pos = rng.uniform(lo, hi)
        targets = [rng.uniform(lo, hi) for _ in range(config.waypoints)]
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        k = 0
        out[0, j] = pos
        for t in range(1, config.frames):
            if speed > 0:
                pos, k = _advance(pos, targets, k, speed, bounds)
            out[t, j] = pos
    return out


def annotate(frame: int, positions: np.ndarray, calibs, ids=None) -> AnnotationFrame:
    ids = list(range(len(positions))) if ids is None else list(ids)
    persons = []
    views_uv = []
    for calib in calibs:
        feet = np.column_stack([positions, np.zeros(len(positions))]) if len(positions) else np.zeros((0, 3))
        uv, depth = project_points(calib, feet)
        vis = (
            (depth > 1e-9)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= calib.image_width - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= calib.image_height - 1)
        )
        views_uv.append((uv, vis))
    for j, pid in enumerate(ids):
        views = [(float(uv[j, 0]), float(uv[j, 1]), bool(vis[j])) for uv, vis in views_uv]
        persons.append(PersonAnnotation(int(pid), float(positions[j, 0]), float(positions[j, 1]), views))
    return AnnotationFrame(frame, persons)


def simulate_sequence(config: SceneConfig) -> Sequence:
    config.validate()
    calibs = make_cameras(config)
    traj = simulate_trajectories(config)
    frames = []
    for t in range(config.frames):
        pos = traj[t]
        ann = annotate(t, pos, calibs)
        agents = [(p.person_id, p.x, p.y) for p in ann.persons]
        images = [render_view(agents, c, radius=config.agent_radius, height=config.agent_height) for c in calibs]
        frames.append(Frame(t, images, ann))
    return Sequence(calibs, config.grid(), frames, config)
