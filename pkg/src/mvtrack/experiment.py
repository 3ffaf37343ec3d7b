"""The desk-scale toy experiment: simulate, train, track a held-out continuation, evaluate."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .inference import TrackerParams, track_sequence
from .metrics import EvalResult, evaluate
from .simulator import SceneConfig, simulate_sequence
from .trainer import TrainConfig, TrainResult, train_run

# sized so that 30 epochs over 199 frame pairs fit in the one-core time budget
TOY_MODEL = {"embed_dim": 32, "num_points": 2}
TRAIN_FRAMES = 200
HELDOUT_FRAMES = 50


@dataclass
class ToyResult:
    train: TrainResult
    eval: EvalResult
    predictions: list
    seconds: float
    steps_per_epoch: int = TRAIN_FRAMES - 1

    @property
    def epoch_means(self) -> list:
        return self.train.epoch_means(self.steps_per_epoch)


def toy_config(epochs: int = 30, **model_overrides) -> TrainConfig:
    return TrainConfig.from_dict({"epochs": epochs, "model": {**TOY_MODEL, **model_overrides}})


def run_toy(
    config: TrainConfig | None = None,
    scene: SceneConfig | None = None,
    train_frames: int = TRAIN_FRAMES,
    heldout_frames: int = HELDOUT_FRAMES,
    r: float = 1.0,
    tracker: TrackerParams | None = None,
) -> ToyResult:
    """Train on the first ``train_frames`` frames, then track and score the next ``heldout_frames``."""
    start = time.perf_counter()
    config = config or toy_config()
    scene = scene or SceneConfig()
    full = simulate_sequence(SceneConfig.from_dict({**scene.to_dict(), "frames": train_frames + heldout_frames}))
    train_seq, test_seq = full.slice(0, train_frames), full.slice(train_frames)
    result = train_run(train_seq, config)
    pred = track_sequence(result.model, test_seq, tracker)
    scores = evaluate(test_seq.trajectories(), pred, r=r)
    return ToyResult(result, scores, pred, time.perf_counter() - start, train_frames - 1)
