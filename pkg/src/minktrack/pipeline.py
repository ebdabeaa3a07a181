"""Online tracking driver: per frame, encode the sliding window, detect,
align, classify and update tracks. Also the track / detection dump formats."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .classes import DEFAULT_CLASSES, GatingTable
from .dataio import FormatError, read_jsonl, write_jsonl
from .detect import Detection
from .metrics import EvalBox
from .model import TrackerNet
from .sim import SceneDataset, box_record
from .trackmgr import TrackManager
from .train import window_points

TRACK_SCHEMA = "minktrack.tracks/1"
DET_SCHEMA = "minktrack.detections/1"


@dataclass(frozen=True)
class TrackerParams:
    lambda_d: float = 0.5
    lambda_s: float = 0.2
    n_frames: int = 3  # track lifetime without matches, and temporal window
    score_thresh: float = 0.2
    top_k: int = 60


@dataclass
class FrameCache:
    """Network outputs the tracking stage needs for one frame."""
    frame: int
    dets: list[Detection]
    inst: np.ndarray


@dataclass
class Timing:
    network: float = 0.0
    tracker: float = 0.0
    frames: int = 0

    def add(self, other: "Timing") -> None:
        self.network += other.network
        self.tracker += other.tracker
        self.frames += other.frames


@dataclass
class TrackRecord:
    scene: int
    frame: int
    track_id: int
    box: Detection
    s_det: float
    confidence: float

    def to_record(self) -> dict:
        return {"scene": self.scene, "frame": self.frame, "track_id": self.track_id,
                **box_record(self.box), "s_det": self.s_det, "track_confidence": self.confidence}


def network_pass(net: TrackerNet, scene, params: TrackerParams,
                 timing: Optional[Timing] = None) -> list[FrameCache]:
    out = []
    for i in range(len(scene)):
        t0 = time.perf_counter()
        window = window_points(scene, i, net.cfg.n_frames)
        fo = net.forward(window)
        dets = net.decode(fo, i, params.score_thresh, params.top_k)
        out.append(FrameCache(i, dets, fo.inst))
        if timing is not None:
            timing.network += time.perf_counter() - t0
            timing.frames += 1
    return out


def track_scene(net: TrackerNet, scene_index: int, caches: Sequence[FrameCache],
                params: TrackerParams, gating: GatingTable,
                timing: Optional[Timing] = None) -> list[TrackRecord]:
    mgr = TrackManager(gating, params.lambda_d, params.lambda_s, params.n_frames)
    records = []
    for fc in caches:
        t0 = time.perf_counter()
        match = net.match(fc.inst, fc.dets, mgr.tracks.live, fc.frame, gating)
        updated = mgr.step(fc.dets, match, fc.frame)
        for trk in updated:
            box = trk.boxes[fc.frame]
            records.append(TrackRecord(scene_index, fc.frame, trk.id, box, box.s_det, mgr.confidence(trk)))
        if timing is not None:
            timing.tracker += time.perf_counter() - t0
    return records


def run_pipeline(ds: SceneDataset, net: TrackerNet, params: TrackerParams = TrackerParams(),
                 class_table=DEFAULT_CLASSES, timing: Optional[Timing] = None
                 ) -> tuple[list[TrackRecord], list[EvalBox]]:
    """Track every scene; returns the track records and the per-frame
    detections (for detection AP)."""
    gating = GatingTable.for_classes(class_table)
    tracks, dets = [], []
    for scene in ds.scenes:
        caches = network_pass(net, scene, params, timing)
        tracks.extend(track_scene(net, scene.index, caches, params, gating, timing))
        dets.extend(detections_as_eval(scene.index, caches))
    return tracks, dets


def detections_as_eval(scene_index: int, caches: Iterable[FrameCache]) -> list[EvalBox]:
    return [EvalBox(scene_index, fc.frame, k, d.cls, d.u, d.v, d.s_det)
            for fc in caches for k, d in enumerate(fc.dets)]


# ---------------------------------------------------------------------------
# dumps

def save_tracks(path, records: Sequence[TrackRecord], meta: Optional[dict] = None) -> int:
    return write_jsonl(path, TRACK_SCHEMA, (r.to_record() for r in records), meta)


def load_tracks(path) -> list[EvalBox]:
    _, recs = read_jsonl(path, TRACK_SCHEMA)
    out = []
    for r in recs:
        try:
            out.append(EvalBox(int(r["scene"]), int(r["frame"]), int(r["track_id"]), int(r["cls"]),
                               float(r["u"]), float(r["v"]), float(r["track_confidence"])))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed track record ({e})") from None
    return out


def save_detections(path, dets: Sequence[EvalBox]) -> int:
    recs = ({"scene": d.scene, "frame": d.frame, "index": d.obj_id, "cls": d.cls, "u": d.u, "v": d.v,
             "s_det": d.score} for d in dets)
    return write_jsonl(path, DET_SCHEMA, recs)


def load_detections(path) -> list[EvalBox]:
    _, recs = read_jsonl(path, DET_SCHEMA)
    try:
        return [EvalBox(int(r["scene"]), int(r["frame"]), int(r["index"]), int(r["cls"]),
                        float(r["u"]), float(r["v"]), float(r["s_det"])) for r in recs]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed detection record ({e})") from None


def gt_eval_boxes(ds: SceneDataset) -> list[EvalBox]:
    return [EvalBox(s.index, fr.index, g.id, g.box.cls, g.box.u, g.box.v, 1.0)
            for s in ds.scenes for fr in s.frames for g in fr.boxes]


def gt_as_tracks(ds: SceneDataset) -> list[EvalBox]:
    """Ground truth formatted like a perfect tracker's output."""
    return gt_eval_boxes(ds)
