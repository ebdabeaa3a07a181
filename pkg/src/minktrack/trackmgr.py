"""Track assignment and lifecycle: distance ratio, combined cost, optimal
assignment, track birth/death and match-aware track confidence."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assoc import MatchMatrix, Track, track_filter
from .classes import GatingTable
from .detect import Detection

INFEASIBLE = 1e6


@dataclass
class Assignment:
    matched: list[tuple[int, int]]
    unmatched_dets: list[int]
    unmatched_tracks: list[int]


@dataclass
class TrackSet:
    lambda_d: float = 0.5
    lambda_s: float = 0.2
    n_frames: int = 3
    live: list[Track] = field(default_factory=list)
    dead: list[Track] = field(default_factory=list)
    next_id: int = 0


def predicted_center(track: Track, frame: int) -> np.ndarray:
    """Last stored center pushed forward by its per-frame velocity for every
    frame elapsed since."""
    box = track.last_box
    gap = frame - track.last_frame
    return box.center + gap * box.velocity


def distance_ratio(det: Detection, track: Track, gating: float, frame: int) -> float:
    p = predicted_center(track, frame)
    return math.hypot(det.u - p[0], det.v - p[1]) / gating


def feasibility(dets: Sequence[Detection], tracks: Sequence[Track], gating: GatingTable) -> np.ndarray:
    mask = np.zeros((len(dets), len(tracks)), dtype=bool)
    for i, d in enumerate(dets):
        for j, t in enumerate(tracks):
            mask[i, j] = track_filter(d, t, gating)
    return mask


def distance_matrix(dets, tracks, gating: GatingTable, frame: int, mask: np.ndarray) -> np.ndarray:
    D = np.full(mask.shape, np.nan)
    for i, j in zip(*np.nonzero(mask)):
        D[i, j] = distance_ratio(dets[i], tracks[j], gating[dets[i].cls], frame)
    return D


def build_cost(D: np.ndarray, S: np.ndarray, lambda_d: float,
               mask: Optional[np.ndarray] = None) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if D.shape != S.shape:
        raise ValueError("D and S must have the same shape")
    if mask is None:
        mask = np.isfinite(D) & np.isfinite(S)
    cost = np.full(D.shape, INFEASIBLE)
    cost[mask] = lambda_d * D[mask] - (1.0 - lambda_d) * S[mask]
    return cost


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment; entries at or above the
    infeasibility sentinel are never matched."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    matched = []
    if n and m:
        rows, cols = linear_sum_assignment(np.minimum(cost, INFEASIBLE))
        matched = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] < INFEASIBLE]
    md = {r for r, _ in matched}
    mt = {c for _, c in matched}
    return Assignment(matched, [i for i in range(n) if i not in md],
                      [j for j in range(m) if j not in mt])


def assignment_cost(cost: np.ndarray, a: Assignment) -> float:
    return math.fsum(float(cost[i, j]) for i, j in a.matched)


def track_confidence(track: Track, lambda_s: float) -> float:
    """Mean per-frame blend of detection score and match probability; frames
    without a match probability contribute the detection score alone."""
    vals = [s if m is None else (1 - lambda_s) * s + lambda_s * m
            for s, m in zip(track.det_scores, track.match_scores)]
    if not vals:
        raise ValueError("track has no recorded frames")
    return math.fsum(vals) / len(vals)


def update_tracks(ts: TrackSet, dets: Sequence[Detection], S: np.ndarray,
                  assignment: Assignment, frame: int) -> list[Track]:
    """Apply one frame's assignment in place. Returns the tracks that received
    a detection this frame (matched or newborn), in detection order."""
    window = max(ts.n_frames - 1, 1)
    updated: dict[int, Track] = {}
    for i, j in assignment.matched:
        trk = ts.live[j]
        trk.add(frame, dets[i], dets[i].s_det, float(S[i, j]))
        updated[i] = trk
    matched_tracks = {j for _, j in assignment.matched}
    survivors = []
    for j, trk in enumerate(ts.live):
        if j not in matched_tracks:
            trk.misses += 1
            if trk.misses > ts.n_frames:
                ts.dead.append(trk)
                continue
        survivors.append(trk)
    ts.live = survivors
    for i in assignment.unmatched_dets:
        trk = Track(ts.next_id, dets[i].cls, window=window)
        ts.next_id += 1
        trk.add(frame, dets[i], dets[i].s_det, None)
        ts.live.append(trk)
        updated[i] = trk
    return [updated[i] for i in sorted(updated)]


class TrackManager:
    """Per-scene online tracker state plus the matching recipe."""

    def __init__(self, gating: GatingTable, lambda_d: float = 0.5, lambda_s: float = 0.2,
                 n_frames: int = 3):
        self.gating = gating
        self.tracks = TrackSet(lambda_d, lambda_s, n_frames)

    def candidates(self, dets: Sequence[Detection]) -> np.ndarray:
        return feasibility(dets, self.tracks.live, self.gating)

    def step(self, dets: Sequence[Detection], match: MatchMatrix, frame: int) -> list[Track]:
        ts = self.tracks
        tracks = ts.live
        mask = match.mask
        D = distance_matrix(dets, tracks, self.gating, frame, mask)
        cost = build_cost(np.where(mask, D, 0.0), match.S, ts.lambda_d, mask)
        assignment = hungarian(cost)
        return update_tracks(ts, dets, match.S, assignment, frame)

    def confidence(self, track: Track) -> float:
        return track_confidence(track, self.tracks.lambda_s)
