"""Synthetic 4D driving scenes: moving boxes sampled into point clouds.

Objects follow constant-velocity or constant-turn-rate motion in closed form.
Each object carries a reflectance that its points inherit, which gives the
association network an appearance cue. Occlusion removes an object's points
for a frame while its ground-truth box stays in the annotations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .classes import DEFAULT_CLASSES, ObjectClass
from .dataio import FormatError, read_jsonl, write_jsonl
from .detect import Detection
from .nn import ConfigurationError
from .sparse import VoxelGridSpec

SCENE_SCHEMA = "minktrack.scenes/1"
POINT_QUANTUM = 1e-3


@dataclass(frozen=True)
class SceneConfig:
    n_frames: int = 30
    n_scenes: int = 1
    seed: int = 0
    class_probs: tuple[float, ...] = (0.6, 0.4)
    n_initial: int = 4
    spawn_rate: float = 0.15  # expected new objects per frame
    crossing_pairs: int = 2
    turn_fraction: float = 0.5  # probability an object follows a constant-turn path
    dropout: float = 0.2  # per object per frame probability of losing all its points
    point_density: float = 6.0  # surface points per square meter
    clutter: int = 150  # uniform background points per frame
    jitter: float = 0.03  # Gaussian noise on point coordinates (m)
    reflect_noise: float = 0.03
    dt: float = 0.5
    extent: float = 20.0  # world is [-extent, extent]^2
    margin: float = 1.5  # objects despawn within this distance of the edge

    def __post_init__(self):
        for name in ("dropout", "turn_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")
        if self.spawn_rate < 0 or self.n_initial < 0 or self.crossing_pairs < 0 or self.clutter < 0:
            raise ConfigurationError("counts and rates must be non-negative")
        if self.n_frames < 0 or self.n_scenes < 0:
            raise ConfigurationError("n_frames and n_scenes must be non-negative")
        if any(p < 0 for p in self.class_probs) or not math.isclose(sum(self.class_probs), 1.0):
            raise ConfigurationError("class_probs must be a distribution")
        if not self.dt > 0 or not self.extent > self.margin:
            raise ConfigurationError("bad dt / extent / margin")

    def grid_spec(self, n_frames: int = 3) -> VoxelGridSpec:
        e = self.extent
        return VoxelGridSpec((-e, -e, -0.5), (e, e, 3.5), (0.25, 0.25, 0.5), n_frames)


@dataclass(frozen=True)
class MotionState:
    """Pose at integer frame ``ref``; ``speed`` in m/frame, ``omega`` in
    rad/frame."""
    ref: int
    x: float
    y: float
    heading: float
    speed: float
    omega: float

    def pose(self, frame: float) -> tuple[float, float, float]:
        tau = frame - self.ref
        th = self.heading + self.omega * tau
        if abs(self.omega) < 1e-12:
            return (self.x + self.speed * tau * math.cos(self.heading),
                    self.y + self.speed * tau * math.sin(self.heading), th)
        r = self.speed / self.omega
        return (self.x + r * (math.sin(th) - math.sin(self.heading)),
                self.y - r * (math.cos(th) - math.cos(self.heading)), th)

    def velocity(self, frame: float) -> tuple[float, float]:
        th = self.heading + self.omega * (frame - self.ref)
        return self.speed * math.cos(th), self.speed * math.sin(th)


@dataclass
class SimObject:
    id: int
    cls: int
    motion: MotionState
    size: tuple[float, float, float]
    reflectance: float
    frames: list[int] = field(default_factory=list)  # alive frames (contiguous)


@dataclass
class GTBox:
    id: int
    box: Detection
    visible: bool = True


@dataclass
class Frame:
    index: int
    points: np.ndarray  # (N, 4) x, y, z, r
    boxes: list[GTBox]


@dataclass
class Scene:
    index: int
    frames: list[Frame]

    def __len__(self):
        return len(self.frames)


@dataclass
class SceneDataset:
    scenes: list[Scene]
    dt: float = 0.5
    extent: float = 20.0
    class_names: tuple[str, ...] = tuple(c.name for c in DEFAULT_CLASSES)

    def __len__(self):
        return len(self.scenes)

    @property
    def n_frames(self) -> int:
        return sum(len(s) for s in self.scenes)

    def grid_spec(self, n_frames: int = 3) -> VoxelGridSpec:
        e = self.extent
        return VoxelGridSpec((-e, -e, -0.5), (e, e, 3.5), (0.25, 0.25, 0.5), n_frames)


def _inside(x, y, lim):
    return -lim <= x <= lim and -lim <= y <= lim


def _alive_span(motion: MotionState, n_frames: int, lim: float, anchor: int) -> list[int]:
    """Contiguous frames around ``anchor`` during which the object is in range."""
    if not _inside(*motion.pose(anchor)[:2], lim):
        return []
    lo = anchor
    while lo - 1 >= 0 and _inside(*motion.pose(lo - 1)[:2], lim):
        lo -= 1
    hi = anchor
    while hi + 1 < n_frames and _inside(*motion.pose(hi + 1)[:2], lim):
        hi += 1
    return list(range(lo, hi + 1))


class _Spawner:
    def __init__(self, cfg: SceneConfig, rng: np.random.Generator,
                 classes: Sequence[ObjectClass]):
        self.cfg, self.rng, self.classes = cfg, rng, classes
        self.next_id = 0

    def _cls(self) -> int:
        return int(self.rng.choice(len(self.cfg.class_probs), p=self.cfg.class_probs))

    def _kinematics(self, c: int) -> tuple[float, float]:
        oc = self.classes[c]
        speed = self.rng.uniform(*oc.speed) * self.cfg.dt
        omega = 0.0
        if self.rng.random() < self.cfg.turn_fraction:
            omega = self.rng.uniform(*oc.turn_rate) * self.cfg.dt * self.rng.choice([-1.0, 1.0])
        return speed, omega

    def _size(self, c: int) -> tuple[float, float, float]:
        oc = self.classes[c]
        return tuple(float(max(0.2, m + s * self.rng.standard_normal()))
                     for m, s in zip(oc.size, oc.size_jitter))

    def make(self, c: int, motion: MotionState, anchor: int) -> Optional[SimObject]:
        lim = self.cfg.extent - self.cfg.margin
        frames = _alive_span(motion, self.cfg.n_frames, lim, anchor)
        if not frames:
            return None
        obj = SimObject(self.next_id, c, motion, self._size(c), float(self.rng.uniform(0.1, 0.9)), frames)
        self.next_id += 1
        return obj

    def random_object(self, frame: int) -> Optional[SimObject]:
        c = self._cls()
        lim = self.cfg.extent - self.cfg.margin
        x, y = self.rng.uniform(-lim, lim, size=2)
        speed, omega = self._kinematics(c)
        m = MotionState(frame, float(x), float(y), float(self.rng.uniform(-math.pi, math.pi)), speed, omega)
        return self.make(c, m, frame)

    def crossing_pair(self) -> list[SimObject]:
        """Two same-class objects passing near one point at the same frame."""
        n = self.cfg.n_frames
        if n < 2:
            return []
        c = self._cls()
        fc = int(self.rng.integers(n // 4, max(n // 4 + 1, (3 * n) // 4)))
        cx, cy = self.rng.uniform(-8, 8, size=2)
        h1 = float(self.rng.uniform(-math.pi, math.pi))
        h2 = h1 + float(self.rng.choice([-1.0, 1.0]) * self.rng.uniform(math.pi / 3, 2 * math.pi / 3))
        sep = float(self.rng.uniform(0.3, 1.0)) * self.classes[c].size[0]
        out = []
        for k, h in enumerate((h1, h2)):
            speed, omega = self._kinematics(c)
            off = sep / 2 * (1 if k == 0 else -1)
            m = MotionState(fc, float(cx - off * math.sin(h)), float(cy + off * math.cos(h)), h, speed, omega)
            obj = self.make(c, m, fc)
            if obj is not None:
                out.append(obj)
        return out


def _surface_points(obj: SimObject, x: float, y: float, th: float, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    w, l, h = obj.size
    areas = np.array([l * h, l * h, w * h, w * h, w * l])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a, b = rng.random(n), rng.random(n)
    lx = np.where(face < 2, (a - 0.5) * l, np.where(face < 4, np.where(face == 2, l / 2, -l / 2), (a - 0.5) * l))
    ly = np.where(face < 2, np.where(face == 0, w / 2, -w / 2), (a - 0.5) * w)
    ly = np.where(face == 4, (b - 0.5) * w, ly)
    z = np.where(face == 4, h, b * h)
    c, s = math.cos(th), math.sin(th)
    return np.stack([x + c * lx - s * ly, y + s * lx + c * ly, z], axis=1)


def gen_scene(cfg: SceneConfig, scene_index: int = 0,
              classes: Sequence[ObjectClass] = DEFAULT_CLASSES) -> Scene:
    """One scene, seeded by ``(cfg.seed, scene_index)``."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    sp = _Spawner(cfg, rng, classes)
    objects: list[SimObject] = []
    for _ in range(cfg.n_initial):
        o = sp.random_object(0)
        if o is not None:
            objects.append(o)
    for _ in range(cfg.crossing_pairs):
        objects.extend(sp.crossing_pair())
    for f in range(1, cfg.n_frames):
        for _ in range(int(rng.poisson(cfg.spawn_rate))):
            o = sp.random_object(f)
            if o is not None:
                objects.append(o)
    frames = []
    e = cfg.extent
    for f in range(cfg.n_frames):
        clouds, boxes = [], []
        for o in objects:
            if f not in o.frames:
                continue
            x, y, th = o.motion.pose(f)
            vx, vy = o.motion.velocity(f)
            w, l, h = o.size
            box = Detection(x, y, h / 2, w, l, h, th, vx, vy, o.cls, 1.0, f)
            visible = rng.random() >= cfg.dropout
            boxes.append(GTBox(o.id, box, visible))
            if visible:
                area = 2 * (l + w) * h + w * l
                n = max(1, int(rng.poisson(cfg.point_density * area)))
                xyz = _surface_points(o, x, y, th, n, rng) + cfg.jitter * rng.standard_normal((n, 3))
                r = np.clip(o.reflectance + cfg.reflect_noise * rng.standard_normal(n), 0.0, 1.0)
                clouds.append(np.column_stack([xyz, r]))
        if cfg.clutter:
            k = cfg.clutter
            clouds.append(np.column_stack([rng.uniform(-e, e, k), rng.uniform(-e, e, k),
                                           rng.uniform(0.0, 2.5, k), rng.uniform(0.0, 1.0, k)]))
        pts = np.concatenate(clouds) if clouds else np.zeros((0, 4))
        pts = np.round(pts / POINT_QUANTUM) * POINT_QUANTUM
        frames.append(Frame(f, pts, boxes))
    return Scene(scene_index, frames)


def gen_dataset(cfg: SceneConfig, classes: Sequence[ObjectClass] = DEFAULT_CLASSES) -> SceneDataset:
    return SceneDataset([gen_scene(cfg, s, classes) for s in range(cfg.n_scenes)], cfg.dt,
                        cfg.extent, tuple(c.name for c in classes))


# ---------------------------------------------------------------------------
# serialization

BOX_FIELDS = ("u", "v", "d", "w", "l", "h", "alpha", "vel_x", "vel_y")


def box_record(box: Detection) -> dict:
    return {k: float(getattr(box, k)) for k in BOX_FIELDS} | {"cls": int(box.cls)}


def box_from_record(rec: dict, s_det: float = 1.0, frame: int = -1) -> Detection:
    return Detection(*(float(rec[k]) for k in BOX_FIELDS), int(rec["cls"]), s_det, frame)


def _frame_records(ds: SceneDataset) -> Iterator[dict]:
    for scene in ds.scenes:
        for fr in scene.frames:
            yield {"scene": scene.index, "frame": fr.index,
                   "points": [[float(x) for x in p] for p in fr.points],
                   "boxes": [box_record(g.box) | {"id": g.id, "visible": g.visible} for g in fr.boxes]}


def save_dataset(path, ds: SceneDataset) -> int:
    meta = {"dt": ds.dt, "extent": ds.extent, "classes": list(ds.class_names),
            "fields": {"points": "x,y,z,r", "box": list(BOX_FIELDS) + ["cls", "id", "visible"]}}
    return write_jsonl(path, SCENE_SCHEMA, _frame_records(ds), meta)


def load_dataset(path) -> SceneDataset:
    header, records = read_jsonl(path, SCENE_SCHEMA)
    meta = header.get("meta", {})
    by_scene: dict[int, list[Frame]] = {}
    for rec in records:
        try:
            pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 4)
            boxes = [GTBox(int(b["id"]), box_from_record(b, 1.0, int(rec["frame"])),
                           bool(b.get("visible", True))) for b in rec["boxes"]]
            by_scene.setdefault(int(rec["scene"]), []).append(Frame(int(rec["frame"]), pts, boxes))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed frame record ({e})") from None
    scenes = []
    for s in sorted(by_scene):
        frames = sorted(by_scene[s], key=lambda fr: fr.index)
        if [fr.index for fr in frames] != list(range(len(frames))):
            raise FormatError(f"{path}: scene {s} frames are not contiguous from 0")
        scenes.append(Scene(s, frames))
    return SceneDataset(scenes, float(meta.get("dt", 0.5)), float(meta.get("extent", 20.0)),
                        tuple(meta.get("classes", [c.name for c in DEFAULT_CLASSES])))
