"""scikit-learn style wrapper around training and online tracking."""
from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import EvalBox, MetricsReport, evaluate
from .pipeline import TrackerParams, TrackRecord, Timing, gt_eval_boxes, run_pipeline
from .train import TrainConfig, train
from .validation import check_dataset, check_positive, check_unit_interval


class MinkowskiTracker(BaseEstimator):
    """Joint 4D detector and learned-association tracker.

    ``fit`` takes a :class:`~minktrack.sim.SceneDataset` (ground truth lives
    inside it, so ``y`` is ignored); ``predict`` returns track records and
    ``score`` the AMOTA against the dataset's own annotations.
    """

    def __init__(self, n_frames: int = 3, steps: int = 1000, lr: float = 1e-3,
                 weight_decay: float = 1e-2, schedule: str = "constant", lambda_track: float = 1.0,
                 lambda_d: float = 0.5, lambda_s: float = 0.2, score_thresh: float = 0.2,
                 voxel_xy: float = 0.25, stage_channels=(16, 32, 64), stage_strides=(1, 2, 2),
                 c_out: int = 32, roi_bins: int = 5, random_state: int = 0):
        self.n_frames = n_frames
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.lambda_track = lambda_track
        self.lambda_d = lambda_d
        self.lambda_s = lambda_s
        self.score_thresh = score_thresh
        self.voxel_xy = voxel_xy
        self.stage_channels = stage_channels
        self.stage_strides = stage_strides
        self.c_out = c_out
        self.roi_bins = roi_bins
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        check_positive("lr", self.lr)
        check_positive("lambda_track", self.lambda_track, strict=False)
        return TrainConfig(steps=int(self.steps), lr=float(self.lr), weight_decay=float(self.weight_decay),
                           schedule=self.schedule, lambda_track=float(self.lambda_track),
                           seed=int(self.random_state), log_every=0, n_frames=int(self.n_frames),
                           voxel_xy=float(self.voxel_xy), stage_channels=tuple(self.stage_channels),
                           stage_strides=tuple(self.stage_strides), c_out=int(self.c_out),
                           roi_bins=int(self.roi_bins))

    def _tracker_params(self) -> TrackerParams:
        return TrackerParams(check_unit_interval("lambda_d", self.lambda_d),
                             check_unit_interval("lambda_s", self.lambda_s), int(self.n_frames),
                             check_unit_interval("score_thresh", self.score_thresh))

    def fit(self, X, y=None):
        X = check_dataset(X, require_frames=True)
        self.net_, self.history_ = train(X, self._train_config())
        self.class_names_ = tuple(X.class_names)
        return self

    def predict(self, X, timing: Optional[Timing] = None) -> list[TrackRecord]:
        check_is_fitted(self, "net_")
        X = check_dataset(X)
        tracks, _ = run_pipeline(X, self.net_, self._tracker_params(), timing=timing)
        return tracks

    def evaluate(self, X) -> MetricsReport:
        tracks = self.predict(X)
        pred = [EvalBox(r.scene, r.frame, r.track_id, r.box.cls, r.box.u, r.box.v, r.confidence)
                for r in tracks]
        return evaluate(gt_eval_boxes(X), pred, X.class_names)

    def score(self, X, y=None) -> float:
        rep = self.evaluate(X)
        return 0.0 if rep.amota is None else rep.amota
