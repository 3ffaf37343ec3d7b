"""Training loop: simulator frames -> model -> losses -> Adam, with resumable checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import io as mio
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ChecksumMismatch, ConfigInvalid, FormatError, NaNDetected
from .losses import LossBreakdown, build_gt_heatmap, build_offset_targets, focal_loss, offset_l1_loss, total_loss
from .model import ModelConfig, MVTrackModel, image_to_tensor
from .ops import backward
from .simulator import Frame, Sequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 7
    log_path: str | None = None
    checkpoint_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigInvalid("epochs must be an integer >= 1")
        if not self.lr > 0:
            raise ConfigInvalid("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigInvalid("optimizer must be 'adam' or 'sgd'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = dict(data.pop("model", {}) or {})
        # nested switches, e.g. {"interaction": {"mode": "self"}}
        interaction = data.pop("interaction", None)
        if interaction is not None:
            if not isinstance(interaction, dict) or set(interaction) - {"mode"}:
                raise ConfigInvalid("interaction must be an object with a single 'mode' key")
            model["interaction_mode"] = interaction["mode"]
        if "supervision" in data:
            model["supervision"] = data.pop("supervision")
        known = {f.name for f in dataclasses.fields(cls)} - {"model"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigInvalid(f"unknown train config keys: {', '.join(unknown)}")
        return cls(model=ModelConfig.from_dict(model), **data)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d


def build_model(config: ModelConfig, seq: Sequence, seed: int) -> MVTrackModel:
    torch.manual_seed(seed)
    return MVTrackModel(config).set_scene(seq.calibs, seq.grid)


def make_optimizer(model, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=0.9)


def frame_cells(model: MVTrackModel, frame: Frame) -> dict:
    """person id -> (x, y) in model-grid cells."""
    out = {}
    for p in frame.annotation.persons:
        out[p.person_id] = model.grid.world_to_cell(p.x, p.y)
    return out


def _clipped_centers(cells, width, height):
    c = np.asarray(list(cells), dtype=np.float64).reshape(-1, 2)
    return np.column_stack([np.clip(np.rint(c[:, 0]), 0, width - 1), np.clip(np.rint(c[:, 1]), 0, height - 1)])


def view_targets(model: MVTrackModel, frame: Frame, shape) -> list:
    Hf, Wf = shape
    stride = 4.0
    out = []
    for cam in range(len(model.calibs)):
        centers = [(p.views[cam][0] / stride, p.views[cam][1] / stride) for p in frame.annotation.persons if p.views[cam][2]]
        heat, _ = build_gt_heatmap(_clipped_centers(centers, Wf, Hf), (Hf, Wf), model.config.view_heatmap_sigma)
        out.append(heat)
    return out


def coordinate_loss(positions, scores, gt_cells, grid_size):
    """L1 on Hungarian-matched normalized positions + binary cross-entropy on objectness."""
    W, H = grid_size
    scale = torch.tensor([W, H], dtype=positions.dtype)
    target_obj = torch.zeros_like(scores)
    l1 = positions.sum() * 0.0
    gt = np.asarray(gt_cells, dtype=np.float64).reshape(-1, 2)
    if len(gt):
        pred_np = positions.detach().numpy()
        cost = np.abs(pred_np[:, None, :] - gt[None, :, :]).sum(-1)
        rows, cols = linear_sum_assignment(cost)
        target = torch.from_numpy(gt[cols]).to(positions.dtype)
        l1 = ((positions[rows] - target) / scale).abs().sum() / len(rows)
        target_obj[rows] = 1.0
    bce = torch.nn.functional.binary_cross_entropy(scores.clamp(1e-6, 1 - 1e-6), target_obj)
    return l1 + bce


def train_step(model: MVTrackModel, optimizer, pair, config: TrainConfig, step: int | None = None) -> LossBreakdown:
    """Forward both frames, compute the three losses, backprop and update."""
    prev, cur = pair
    mc = model.config
    prev_img = image_to_tensor(np.stack(prev.images))
    cur_img = image_to_tensor(np.stack(cur.images))
    penc, cenc = model.encode_pair(prev_img, cur_img)
    prev_cells = frame_cells(model, prev)
    cur_cells = frame_cells(model, cur)
    ids = sorted(prev_cells)
    positions = np.array([prev_cells[i] for i in ids], dtype=np.float64).reshape(-1, 2)
    W, H = model.grid.cells_x, model.grid.cells_y
    positions = np.column_stack([np.clip(positions[:, 0], -0.5, W - 0.5), np.clip(positions[:, 1], -0.5, H - 0.5)])
    model.last_track_source = "ground_truth"
    out = model.track_step(penc, cenc, positions, ids)

    if mc.supervision == "heatmap":
        target, _ = build_gt_heatmap(_clipped_centers(cur_cells.values(), W, H), (H, W), mc.heatmap_sigma)
        l_ground = focal_loss(out.heatmap, target)
    else:
        gt = _clipped_centers(cur_cells.values(), W, H)
        l_ground = coordinate_loss(out.coordinates[0], out.coordinates[1], gt, (W, H))

    offsets_target, valid = build_offset_targets(prev_cells, cur_cells, ids)
    l_track = offset_l1_loss(out.offsets, offsets_target, valid)

    img_terms = []
    for enc, frame in ((penc, prev), (cenc, cur)):
        heat = enc.views.view_heatmap
        for cam, target in enumerate(view_targets(model, frame, tuple(heat.shape[-2:]))):
            img_terms.append(focal_loss(heat[cam], target))
    l_img = torch.stack(img_terms).mean()

    # combined in float64 so the logged total equals the recombined components to 1e-6
    terms = [t.double() for t in (l_ground, l_track, l_img, model.loss.sigma_c, model.loss.sigma_t)]
    try:
        total = total_loss(*terms, mc.ground_weight)
    except NaNDetected as exc:
        raise NaNDetected(str(exc), step) from exc
    values = [t.detach().item() for t in (l_ground, l_track, l_img, model.loss.sigma_c, model.loss.sigma_t, total)]
    breakdown = LossBreakdown(*values)
    optimizer.zero_grad(set_to_none=True)
    backward(total)
    optimizer.step()
    return breakdown


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class TrainResult:
    model: MVTrackModel
    losses: list  # per step [step, l_ground, l_track, l_img, sigma_c, sigma_t, total]
    checkpoint_path: str | None = None

    def epoch_means(self, steps_per_epoch: int) -> list:
        totals = [row[-1] for row in self.losses]
        return [float(np.mean(totals[i : i + steps_per_epoch])) for i in range(0, len(totals), steps_per_epoch)]


def state_path(ckpt) -> Path:
    return Path(str(ckpt) + ".state")


def config_path(ckpt) -> Path:
    return Path(str(ckpt) + ".json")


def save_training_state(model, optimizer, config: TrainConfig, ckpt, epochs_done: int, step: int):
    save_checkpoint(model, ckpt)
    mio.dump_json(config_path(ckpt), config.to_dict())
    torch.save(
        {
            "epochs_done": epochs_done,
            "global_step": step,
            "optimizer": optimizer.state_dict(),
            "checkpoint_sha256": _sha256(ckpt),
        },
        state_path(ckpt),
    )


def train_run(data, config: TrainConfig, resume: bool = False, stop_after_epoch: int | None = None) -> TrainResult:
    """Train on consecutive frame pairs of a dataset directory or in-memory Sequence.

    Each epoch visits every pair once in an order shuffled from (seed, epoch).
    When ``checkpoint_path`` is set, the checkpoint and optimizer state are saved
    after every epoch and ``resume=True`` continues from them.
    """
    seq = data if isinstance(data, Sequence) else mio.load_dataset(data)
    if len(seq) < 2:
        raise FormatError("need at least two frames to train")
    model = build_model(config.model, seq, config.seed)
    optimizer = make_optimizer(model, config)
    start_epoch, step = 0, 0
    losses: list = []
    ckpt = config.checkpoint_path
    if resume:
        if ckpt is None or not state_path(ckpt).exists():
            raise FormatError("nothing to resume: checkpoint state not found", ckpt)
        state = torch.load(state_path(ckpt), weights_only=False)
        if _sha256(ckpt) != state["checkpoint_sha256"]:
            raise ChecksumMismatch(f"{ckpt} does not match its saved training state")
        load_checkpoint(model, ckpt)
        optimizer.load_state_dict(state["optimizer"])
        start_epoch, step = state["epochs_done"], state["global_step"]
        if config.log_path and Path(config.log_path).exists():
            losses = mio.read_loss_log(config.log_path)[:step]
    if config.log_path:
        Path(config.log_path).write_text("")
        mio.append_loss_log(config.log_path, losses, header=True)
    pairs = np.arange(1, len(seq))
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch):
        order = np.random.default_rng([config.seed, epoch]).permutation(pairs)
        rows = []
        for t in order:
            b = train_step(model, optimizer, (seq.frames[t - 1], seq.frames[t]), config, step)
            rows.append([step, b.l_ground, b.l_track, b.l_img, b.sigma_c, b.sigma_t, b.total])
            step += 1
        losses.extend(rows)
        if config.log_path:
            mio.append_loss_log(config.log_path, rows, header=False)
        if ckpt:
            save_training_state(model, optimizer, config, ckpt, epoch + 1, step)
        log.info("epoch %d: mean total loss %.4f", epoch, float(np.mean([r[-1] for r in rows])))
    return TrainResult(model, losses, ckpt)
