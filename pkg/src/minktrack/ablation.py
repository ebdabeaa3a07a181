"""Component ladder and lambda sweeps over trained checkpoints.

Network outputs are computed once per (checkpoint, scene); every tracker
setting then reuses them, so rows sharing a checkpoint have identical
detections by construction."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .classes import DEFAULT_CLASSES, GatingTable
from .metrics import EvalBox, MetricsReport, evaluate, format_table, mean_average_precision
from .model import TrackerNet
from .nn import CheckpointError
from .pipeline import TrackerParams, detections_as_eval, gt_eval_boxes, network_pass, track_scene
from .sim import SceneDataset

log = logging.getLogger(__name__)

LAMBDA_D_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)
LAMBDA_S_SWEEP = (0.0, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class LadderRow:
    name: str
    n_frames: int  # encoder window
    lambda_track: float  # training loss weight of the checkpoint
    lambda_d: float
    lambda_s: float


LADDER = (
    LadderRow("single-frame", 1, 0.0, 1.0, 0.0),
    LadderRow("+ 4D encoder", 3, 0.0, 1.0, 0.0),
    LadderRow("+ track", 3, 1.0, 1.0, 0.0),
    LadderRow("+ score", 3, 1.0, 0.5, 0.0),
    LadderRow("+ conf", 3, 1.0, 0.5, 0.2),
)


def ckpt_key(meta: Mapping) -> tuple[int, float]:
    return int(meta["model"]["n_frames"]), float(meta.get("lambda_track", 1.0))


@dataclass
class ConfigResult:
    checkpoint: str
    n_frames: int
    lambda_track: float
    lambda_d: float
    lambda_s: float
    report: MetricsReport
    det_map: Optional[float]

    def summary(self) -> dict:
        r = self.report
        return {"checkpoint": self.checkpoint, "n_frames": self.n_frames,
                "lambda_track": self.lambda_track, "lambda_d": self.lambda_d,
                "lambda_s": self.lambda_s, "amota": r.amota, "mota": r.mota, "recall": r.recall,
                "fp": r.fp, "fn": r.fn, "ids": r.ids, "frag": r.frag, "det_map": self.det_map}


def evaluate_settings(ds: SceneDataset, net: TrackerNet, settings: Sequence[tuple[float, float]],
                      base: TrackerParams = TrackerParams(), class_table=DEFAULT_CLASSES
                      ) -> tuple[dict[tuple[float, float], MetricsReport], Optional[float]]:
    """Metrics for each (lambda_d, lambda_s) on shared network outputs, plus
    the detection mAP of those outputs."""
    gating = GatingTable.for_classes(class_table)
    preds = {s: [] for s in settings}
    dets = []
    for scene in ds.scenes:
        caches = network_pass(net, scene, base)
        dets.extend(detections_as_eval(scene.index, caches))
        for ld, ls in settings:
            p = TrackerParams(ld, ls, base.n_frames, base.score_thresh, base.top_k)
            for r in track_scene(net, scene.index, caches, p, gating):
                preds[(ld, ls)].append(EvalBox(r.scene, r.frame, r.track_id, r.box.cls,
                                               r.box.u, r.box.v, r.confidence))
    gt = gt_eval_boxes(ds)
    reports = {s: evaluate(gt, preds[s], ds.class_names) for s in settings}
    return reports, mean_average_precision(gt, dets, len(ds.class_names))


def sweep_optimum(values: Sequence[float], scores: Sequence[Optional[float]]) -> dict:
    """Where the maximum sits: 'interior' or 'boundary', and all tied argmaxes."""
    vals = [(-1.0 if s is None else s) for s in scores]
    best = max(vals)
    arg = [v for v, s in zip(values, vals) if s == best]
    interior = any(v not in (values[0], values[-1]) for v in arg)
    return {"best": best, "argmax": arg, "location": "interior" if interior else "boundary",
            "tied": len(arg) > 1}


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    ladder: list[dict] = field(default_factory=list)
    sweep_lambda_d: dict = field(default_factory=dict)
    sweep_lambda_s: dict = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(r["name"], _Row(r)) for r in self.ladder if r.get("amota") is not None]
        return format_table(rows)


class _Row:
    def __init__(self, d):
        self.__dict__.update(d)


def ablation_run(ds: SceneDataset, checkpoints: Sequence[str], base: TrackerParams = TrackerParams(),
                 class_table=DEFAULT_CLASSES) -> AblationReport:
    rep = AblationReport()
    nets: dict[tuple[int, float], tuple[str, TrackerNet]] = {}
    for path in checkpoints:
        try:
            net, meta = TrackerNet.load(path)
        except (OSError, CheckpointError) as e:
            rep.notices.append(f"skipping checkpoint {path}: {e}")
            continue
        nets.setdefault(ckpt_key(meta), (Path(path).name, net))
    grid = [(ld, ls) for ld in (1.0, 0.5) for ls in (0.0, 0.2)]
    full_key = (3, 1.0) if (3, 1.0) in nets else (max(nets) if nets else None)
    results: dict[tuple, ConfigResult] = {}
    for key in sorted(nets):
        name, net = nets[key]
        settings = list(grid)
        if key == full_key:
            settings += [(ld, 0.2) for ld in LAMBDA_D_SWEEP] + [(0.5, ls) for ls in LAMBDA_S_SWEEP]
        settings = list(dict.fromkeys(settings))
        log.info("checkpoint %s: %d tracker settings", name, len(settings))
        reports, det_map = evaluate_settings(ds, net, settings, base, class_table)
        for (ld, ls), r in reports.items():
            results[key + (ld, ls)] = ConfigResult(name, key[0], key[1], ld, ls, r, det_map)
    rep.rows = [results[k].summary() for k in sorted(results)]
    for row in LADDER:
        k = (row.n_frames, row.lambda_track, row.lambda_d, row.lambda_s)
        if k not in results:
            rep.notices.append(f"ladder row {row.name!r} skipped: no checkpoint with "
                               f"n_frames={row.n_frames}, lambda_track={row.lambda_track}")
            rep.ladder.append({"name": row.name, "amota": None})
            continue
        rep.ladder.append({"name": row.name, **results[k].summary()})
    if full_key is not None:
        d_scores = [results[full_key + (ld, 0.2)].report.amota for ld in LAMBDA_D_SWEEP]
        s_scores = [results[full_key + (0.5, ls)].report.amota for ls in LAMBDA_S_SWEEP]
        rep.sweep_lambda_d = {"lambda_s": 0.2, "values": list(LAMBDA_D_SWEEP), "amota": d_scores,
                              **sweep_optimum(LAMBDA_D_SWEEP, d_scores)}
        rep.sweep_lambda_s = {"lambda_d": 0.5, "values": list(LAMBDA_S_SWEEP), "amota": s_scores,
                              **sweep_optimum(LAMBDA_S_SWEEP, s_scores)}
    return rep
