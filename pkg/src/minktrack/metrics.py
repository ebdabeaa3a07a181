"""CLEAR-MOT style tracking metrics, AMOTA, and center-distance detection AP.

Matching is greedy in descending prediction score, class-exact, on BEV center
distance with an inclusive threshold. Per-class metrics are computed
independently; headline AMOTA / MOTA / RECALL average over classes that have
ground truth and counts are summed.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

N_RECALL_STEPS = 40
DIST_THRESH = 2.0


@dataclass(frozen=True)
class EvalBox:
    scene: int
    frame: int
    obj_id: int  # GT track id, or predicted track id
    cls: int
    u: float
    v: float
    score: float = 1.0


@dataclass
class FrameMatchEvents:
    matches: list[tuple[int, int]]  # (gt_id, pred_id)
    fp: int
    fn: int
    ids: int = 0


def match_frame(gt: Sequence[EvalBox], pred: Sequence[EvalBox],
                dist_thresh: float = DIST_THRESH) -> FrameMatchEvents:
    """Greedy matching: predictions in descending score take the nearest free
    ground truth of their class within ``dist_thresh`` meters."""
    order = sorted(range(len(pred)), key=lambda k: (-pred[k].score, k))
    taken = [False] * len(gt)
    matches = []
    fp = 0
    for k in order:
        p = pred[k]
        best, best_d = -1, math.inf
        for g, b in enumerate(gt):
            if taken[g] or b.cls != p.cls:
                continue
            d = math.hypot(b.u - p.u, b.v - p.v)
            if d <= dist_thresh and d < best_d:
                best, best_d = g, d
        if best < 0:
            fp += 1
        else:
            taken[best] = True
            matches.append((gt[best].obj_id, p.obj_id))
    return FrameMatchEvents(matches, fp, taken.count(False))


def frag_count(timelines: Mapping[object, Sequence[bool]]) -> int:
    """Tracked -> untracked -> tracked interruptions summed over trajectories.
    Each timeline lists the tracked flag for the frames the object exists."""
    total = 0
    for flags in timelines.values():
        seen = gap = False
        for f in flags:
            if f:
                if seen and gap:
                    total += 1
                seen, gap = True, False
            elif seen:
                gap = True
    return total


def timeline_from_frames(tracked_frames: Iterable[int], frames: Iterable[int]) -> list[bool]:
    tracked = set(tracked_frames)
    return [f in tracked for f in sorted(frames)]


@dataclass
class Counts:
    n_gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frag: int = 0

    def __add__(self, o: "Counts") -> "Counts":
        return Counts(self.n_gt + o.n_gt, self.tp + o.tp, self.fp + o.fp, self.fn + o.fn,
                      self.ids + o.ids, self.frag + o.frag)


def _group(boxes: Iterable[EvalBox]):
    out = defaultdict(lambda: defaultdict(list))
    for b in boxes:
        out[b.scene][b.frame].append(b)
    return out


@dataclass
class MatchTable:
    """Outcome of greedy matching with every prediction present.

    Greedy matching visits predictions in descending score, so dropping all
    predictions below a threshold leaves the decisions for the rest
    unchanged; one table therefore answers every confidence threshold."""
    n_gt: int
    score: np.ndarray  # (P,) per prediction
    matched: np.ndarray  # (P,) bool
    # matched predictions only, sorted by (scene, gt id, frame)
    m_key: np.ndarray  # (Q,) GT trajectory index
    m_pred: np.ndarray  # (Q,) predicted track id
    m_score: np.ndarray  # (Q,)
    m_frame: np.ndarray  # (Q,)
    gt_frames: dict  # trajectory index -> frames where the GT exists


def match_table(gt: Sequence[EvalBox], pred: Sequence[EvalBox],
                dist_thresh: float = DIST_THRESH) -> MatchTable:
    g_by = _group(gt)
    p_by = _group(pred)
    traj: dict[tuple[int, int], int] = {}
    gt_frames = defaultdict(list)
    scores, matched = [], []
    rows = []
    for scene in sorted(set(g_by) | set(p_by)):
        gs, ps = g_by.get(scene, {}), p_by.get(scene, {})
        for frame in sorted(set(gs) | set(ps)):
            gl, pl = gs.get(frame, []), ps.get(frame, [])
            for b in gl:
                gt_frames[traj.setdefault((scene, b.obj_id), len(traj))].append(frame)
            ev_pairs = _greedy(gl, pl, dist_thresh)
            for k, p in enumerate(pl):
                g = ev_pairs.get(k)
                scores.append(p.score)
                matched.append(g is not None)
                if g is not None:
                    rows.append((traj[(scene, gl[g].obj_id)], frame, p.obj_id, p.score))
    rows.sort(key=lambda r: (r[0], r[1]))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return MatchTable(len(gt), np.asarray(scores, dtype=np.float64), np.asarray(matched, dtype=bool),
                      arr[:, 0].astype(np.int64), arr[:, 2].astype(np.int64), arr[:, 3],
                      arr[:, 1].astype(np.int64), dict(gt_frames))


def _greedy(gt: Sequence[EvalBox], pred: Sequence[EvalBox], dist_thresh: float) -> dict[int, int]:
    """pred index -> gt index under greedy score-ordered matching."""
    if not gt or not pred:
        return {}
    gu = np.array([[b.u, b.v] for b in gt])
    pu = np.array([[p.u, p.v] for p in pred])
    d = np.hypot(pu[:, None, 0] - gu[None, :, 0], pu[:, None, 1] - gu[None, :, 1])
    same = np.array([p.cls for p in pred])[:, None] == np.array([b.cls for b in gt])[None, :]
    d = np.where(same & (d <= dist_thresh), d, np.inf)
    out = {}
    order = sorted(range(len(pred)), key=lambda k: (-pred[k].score, k))
    for k in order:
        row = d[k]
        g = int(np.argmin(row))
        if math.isfinite(row[g]):
            out[k] = g
            d[:, g] = np.inf
    return out


def counts_at(table: MatchTable, threshold: float = -math.inf, with_frag: bool = False) -> Counts:
    """Counts when only predictions scoring >= ``threshold`` are kept."""
    keep = table.score >= threshold
    tp = int(np.count_nonzero(keep & table.matched))
    fp = int(np.count_nonzero(keep & ~table.matched))
    mk = table.m_score >= threshold
    key, pid = table.m_key[mk], table.m_pred[mk]
    ids = int(np.count_nonzero((key[1:] == key[:-1]) & (pid[1:] != pid[:-1])))
    frag = 0
    if with_frag:
        tracked = defaultdict(list)
        for k, f in zip(key, table.m_frame[mk]):
            tracked[int(k)].append(int(f))
        frag = frag_count({g: timeline_from_frames(tracked[g], fr) for g, fr in table.gt_frames.items()})
    return Counts(table.n_gt, tp, fp, table.n_gt - tp, ids, frag)


def clear_mot_counts(gt: Sequence[EvalBox], pred: Sequence[EvalBox],
                     dist_thresh: float = DIST_THRESH) -> Counts:
    """Accumulate FP/FN/IDS/FRAG over all scenes and frames."""
    return counts_at(match_table(gt, pred, dist_thresh), with_frag=True)


def mota_from_counts(c: Counts) -> Optional[float]:
    if c.n_gt == 0:
        return None
    return 1.0 - (c.fp + c.fn + c.ids) / c.n_gt


def mota(fp: int, fn: int, ids: int, n_gt: int) -> Optional[float]:
    return mota_from_counts(Counts(n_gt=n_gt, fp=fp, fn=fn, ids=ids))


def amota(gt: Sequence[EvalBox], pred: Sequence[EvalBox], n_steps: int = N_RECALL_STEPS,
          dist_thresh: float = DIST_THRESH, table: Optional[MatchTable] = None) -> Optional[float]:
    """Average over recall targets r = 1/n .. 1 of the recall-normalized MOTA
    at the highest confidence threshold reaching recall r; unreachable
    targets contribute zero."""
    n_gt = len(gt)
    if n_gt == 0:
        return None
    table = table if table is not None else match_table(gt, pred, dist_thresh)
    if not len(table.score):
        return 0.0
    # recall is non-decreasing as the threshold drops
    tp_scores = np.sort(table.score[table.matched])[::-1]
    total = 0.0
    for step in range(1, n_steps + 1):
        r = step / n_steps
        need = math.ceil(r * n_gt - 1e-9)
        if need > len(tp_scores):
            continue
        c = counts_at(table, tp_scores[need - 1])
        motar = 1.0 - (c.ids + c.fp + c.fn - (1 - r) * n_gt) / (r * n_gt)
        total += min(1.0, max(0.0, motar))
    return total / n_steps


@dataclass
class ClassReport:
    amota: Optional[float]
    mota: Optional[float]
    mota_raw: Optional[float]
    recall: Optional[float]
    fp: int
    fn: int
    ids: int
    frag: int
    n_gt: int


@dataclass
class MetricsReport:
    amota: Optional[float]
    mota: Optional[float]
    mota_raw: Optional[float]
    recall: Optional[float]
    fp: int
    fn: int
    ids: int
    frag: int
    n_gt: int
    per_class: dict[str, ClassReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        return format_table([("all", self)] + list(self.per_class.items()))


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.3f}"


def format_table(rows: Sequence[tuple[str, object]]) -> str:
    head = ["Method", "AMOTA", "MOTA", "RECALL", "FP", "FN", "IDS", "FRAG"]
    body = [[name, _fmt(r.amota), _fmt(r.mota), _fmt(r.recall), str(r.fp), str(r.fn),
             str(r.ids), str(r.frag)] for name, r in rows]
    widths = [max(len(row[k]) for row in [head] + body) for k in range(len(head))]
    lines = []
    for row in [head] + body:
        lines.append("  ".join(c.ljust(widths[0]) if k == 0 else c.rjust(widths[k])
                               for k, c in enumerate(row)))
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def evaluate(gt: Sequence[EvalBox], pred: Sequence[EvalBox], class_names: Sequence[str],
             dist_thresh: float = DIST_THRESH, n_steps: int = N_RECALL_STEPS) -> MetricsReport:
    per_class = {}
    total = Counts()
    for c, name in enumerate(class_names):
        g = [b for b in gt if b.cls == c]
        p = [b for b in pred if b.cls == c]
        table = match_table(g, p, dist_thresh)
        counts = counts_at(table, with_frag=True)
        total = total + counts
        raw = mota_from_counts(counts)
        per_class[name] = ClassReport(
            amota=amota(g, p, n_steps, dist_thresh, table), mota=None if raw is None else max(0.0, raw),
            mota_raw=raw, recall=counts.tp / counts.n_gt if counts.n_gt else None,
            fp=counts.fp, fn=counts.fn, ids=counts.ids, frag=counts.frag, n_gt=counts.n_gt)

    def mean(key):
        vals = [getattr(r, key) for r in per_class.values() if r.n_gt > 0]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(mean("amota"), mean("mota"), mean("mota_raw"), mean("recall"),
                         total.fp, total.fn, total.ids, total.frag, total.n_gt, per_class)


def average_precision(gt: Sequence[EvalBox], dets: Sequence[EvalBox],
                      dist_thresh: float = DIST_THRESH) -> Optional[float]:
    """All-point interpolated AP for one class under center-distance matching."""
    n_gt = len(gt)
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    g_by = _group(gt)
    taken = {(s, f): [False] * len(v) for s, fr in g_by.items() for f, v in fr.items()}
    order = sorted(dets, key=lambda d: (-d.score, d.scene, d.frame, d.u, d.v))
    tp = np.zeros(len(order))
    for k, d in enumerate(order):
        cands = g_by.get(d.scene, {}).get(d.frame, [])
        flags = taken.get((d.scene, d.frame))
        best, best_d = -1, math.inf
        for g, b in enumerate(cands):
            if flags[g] or b.cls != d.cls:
                continue
            dist = math.hypot(b.u - d.u, b.v - d.v)
            if dist <= dist_thresh and dist < best_d:
                best, best_d = g, dist
        if best >= 0:
            flags[best] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    # monotone envelope, then area under the step curve
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def mean_average_precision(gt: Sequence[EvalBox], dets: Sequence[EvalBox], n_classes: int,
                           dist_thresh: float = DIST_THRESH) -> Optional[float]:
    aps = [average_precision([b for b in gt if b.cls == c], [d for d in dets if d.cls == c],
                             dist_thresh) for c in range(n_classes)]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else None
