"""Detection-to-track matching: hard-negative pair mining, the match
classifier on pooled ROI features, and the joint loss."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classes import DEFAULT_CLASSES, GatingTable
from .detect import Detection
from .nn import MLP, ConfigurationError, FocalLossConfig, ParamStore, binary_focal_loss, sigmoid


@dataclass
class Track:
    """An identity-carrying sequence of boxes.

    ``boxes`` maps absolute frame index to the box recorded that frame and
    only keeps the most recent ``window`` entries; the score histories cover
    the whole life of the track (``None`` match score on the birth frame)."""
    id: int
    cls: int
    boxes: dict[int, Detection] = field(default_factory=dict)
    det_scores: list[float] = field(default_factory=list)
    match_scores: list[Optional[float]] = field(default_factory=list)
    misses: int = 0
    window: int = 2

    def add(self, frame: int, box: Detection, s_det: float, match_score: Optional[float]) -> None:
        if box.cls != self.cls:
            raise ConfigurationError("a track cannot change class")
        self.boxes[frame] = box
        for f in sorted(self.boxes)[:-self.window] if self.window > 0 else list(self.boxes):
            del self.boxes[f]
        self.det_scores.append(float(s_det))
        self.match_scores.append(None if match_score is None else float(match_score))
        self.misses = 0

    @property
    def last_frame(self) -> int:
        return max(self.boxes)

    @property
    def last_box(self) -> Detection:
        return self.boxes[self.last_frame]

    def history(self, frame: int) -> dict[int, Detection]:
        """Stored boxes keyed by relative temporal index w.r.t. ``frame``
        (the previous frame is t = 2)."""
        return {frame - f + 1: b for f, b in self.boxes.items() if f < frame}


def bev_distance(a: Detection, b: Detection) -> float:
    return math.hypot(a.u - b.u, a.v - b.v)


def heuristic_filter(box: Detection, track_box: Detection, gating: GatingTable) -> bool:
    """Same class and BEV center distance strictly below the class gate."""
    if box.cls != track_box.cls:
        return False
    return bev_distance(box, track_box) < gating[box.cls]


def track_filter(det: Detection, track: Track, gating: GatingTable) -> bool:
    return track.cls == det.cls and heuristic_filter(det, track.last_box, gating)


@dataclass
class GTTrackWindow:
    """One ground-truth object across a window: relative t -> box."""
    id: int
    cls: int
    boxes: dict[int, Detection]


@dataclass
class TrainingPair:
    i: int  # index of the current-frame object
    j: int  # index of the object providing the history
    current: Detection
    history: dict[int, Detection]
    label: bool


@dataclass
class PairSet:
    pairs: list[TrainingPair]
    n_filtered: int
    ratio: dict[int, float]  # per class positives / negatives after filtering (inf if no negatives)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=bool)


def gen_training_pairs(gt_tracks: Sequence[GTTrackWindow], gating: GatingTable) -> PairSet:
    """All (current box of i, history of j) combinations; i == j is positive.
    Negatives failing the class/gating filter on the two objects' current
    boxes are dropped (an object without a current box uses its latest)."""
    current = [(k, g) for k, g in enumerate(gt_tracks) if 1 in g.boxes]
    with_hist = [(k, g) for k, g in enumerate(gt_tracks) if any(t >= 2 for t in g.boxes)]
    pairs, dropped = [], 0
    pos_count, neg_count = defaultdict(int), defaultdict(int)
    for i, gi in current:
        for j, gj in with_hist:
            hist = {t: b for t, b in gj.boxes.items() if t >= 2}
            label = gi.id == gj.id
            if not label:
                ref = gj.boxes.get(1, hist[min(hist)])
                if not heuristic_filter(gi.boxes[1], ref, gating):
                    dropped += 1
                    continue
                neg_count[gi.cls] += 1
            else:
                pos_count[gi.cls] += 1
            pairs.append(TrainingPair(i, j, gi.boxes[1], hist, label))
    ratio = {c: (pos_count[c] / neg_count[c] if neg_count[c] else math.inf)
             for c in set(pos_count) | set(neg_count)}
    return PairSet(pairs, dropped, ratio)


@dataclass
class MatchMatrix:
    S: np.ndarray  # (N, M) match probabilities; 0 where infeasible
    mask: np.ndarray  # (N, M) bool feasibility
    logits: Optional[np.ndarray] = None


class DetectionToTrackClassifier:
    """Flattened pooled ROI grid -> MLP -> match logit."""

    def __init__(self, store: ParamStore, in_width: int, hidden: Sequence[int] = (128, 64),
                 rng: Optional[np.random.Generator] = None, name: str = "match"):
        self.in_width = in_width
        self.mlp = MLP(store, name, [in_width, *hidden, 1], rng=rng, zero_last=True)

    def forward(self, rois: np.ndarray) -> np.ndarray:
        """(P, C, R, R) -> (P,) logits."""
        x = rois.reshape(len(rois), -1)
        if x.shape[1] != self.in_width:
            raise ConfigurationError(f"ROI width {x.shape[1]} != classifier input {self.in_width}")
        return self.mlp.forward(x)[:, 0]

    def backward(self, d_logits: np.ndarray, roi_shape) -> np.ndarray:
        return self.mlp.backward(d_logits[:, None]).reshape(roi_shape)


def classify(rois: np.ndarray, pairs: Sequence[tuple[int, int]], shape: tuple[int, int],
             classifier: DetectionToTrackClassifier) -> MatchMatrix:
    n, m = shape
    S = np.zeros((n, m))
    logits = np.full((n, m), -np.inf)
    mask = np.zeros((n, m), dtype=bool)
    if len(pairs):
        z = classifier.forward(rois)
        for (i, j), zz in zip(pairs, z):
            logits[i, j] = zz
            mask[i, j] = True
        S[mask] = sigmoid(logits[mask])
    return MatchMatrix(S, mask, logits)


def focal_alphas(classes: Sequence[int], class_table=DEFAULT_CLASSES) -> np.ndarray:
    return np.array([class_table[c].focal_alpha for c in classes], dtype=np.float64)


def total_loss(l_det: float, logits: np.ndarray, labels: np.ndarray, lambda_track: float,
               focal: FocalLossConfig, alpha: Optional[np.ndarray] = None):
    """``L = L_det + lambda_track * L_track``.

    Returns ``(L, parts, d_logits)``; ``d_logits`` is already scaled by
    ``lambda_track``."""
    if not np.isfinite(l_det):
        raise FloatingPointError("non-finite detection loss")
    if len(logits):
        l_track, d = binary_focal_loss(np.asarray(logits), np.asarray(labels), focal, alpha=alpha)
    else:
        l_track, d = 0.0, np.zeros(0)
    if not np.isfinite(l_track):
        raise FloatingPointError("non-finite tracking loss")
    total = l_det + lambda_track * l_track
    return total, {"det": float(l_det), "track": float(l_track), "total": float(total)}, \
        lambda_track * np.asarray(d)
