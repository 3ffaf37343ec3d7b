"""scikit-learn style wrapper: fit on a sequence, predict trajectories, score by MOTA."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import TrackerParams, track_sequence
from .metrics import evaluate
from .model import ModelConfig
from .trainer import TrainConfig, train_run
from .validation import check_rows, check_sequence


class MultiViewTracker(BaseEstimator):
    """End-to-end multi-view tracker.

    ``fit`` trains on consecutive frame pairs of a Sequence (or dataset
    directory). ``predict`` returns (frame, track_id, x_m, y_m) rows for
    another sequence seen by the same cameras. ``score`` is MOTA at
    ``score_radius`` meters against the sequence's own annotations.
    """

    def __init__(
        self,
        epochs=30,
        lr=1e-3,
        optimizer="adam",
        seed=7,
        embed_dim=32,
        num_heads=4,
        num_points=2,
        num_levels=3,
        encoder_layers=2,
        decoder_layers=2,
        interaction_mode="cross",
        supervision="heatmap",
        detection_threshold=0.4,
        gate_m=1.0,
        max_misses=1,
        score_radius=1.0,
    ):
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.seed = seed
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_points = num_points
        self.num_levels = num_levels
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.interaction_mode = interaction_mode
        self.supervision = supervision
        self.detection_threshold = detection_threshold
        self.gate_m = gate_m
        self.max_misses = max_misses
        self.score_radius = score_radius

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_points=self.num_points,
            num_levels=self.num_levels,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            interaction_mode=self.interaction_mode,
            supervision=self.supervision,
        )
        return TrainConfig(epochs=self.epochs, lr=self.lr, optimizer=self.optimizer, seed=self.seed, model=model)

    def _tracker_params(self) -> TrackerParams:
        return TrackerParams(self.detection_threshold, self.gate_m, self.max_misses)

    def fit(self, X, y=None):
        seq = check_sequence(X, min_frames=2)
        config = self._train_config()
        self._tracker_params()
        result = train_run(seq, config)
        self.model_ = result.model
        self.loss_history_ = result.losses
        self.n_cameras_ = seq.num_cameras
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        seq = check_sequence(X)
        if seq.num_cameras != self.n_cameras_:
            raise ValueError(f"fitted on {self.n_cameras_} cameras, got {seq.num_cameras}")
        self.model_.set_scene(seq.calibs, seq.grid)
        return track_sequence(self.model_, seq, self._tracker_params())

    def score(self, X, y=None):
        """MOTA (percent) of ``predict(X)`` against ``y`` or X's annotations."""
        seq = check_sequence(X)
        gt = check_rows(y, "gt") if y is not None else seq.trajectories()
        return evaluate(gt, self.predict(seq), r=self.score_radius).mota
