"""Joint training of detector and match classifier on simulated scenes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .assoc import GTTrackWindow, focal_alphas, gen_training_pairs, total_loss
from .classes import DEFAULT_CLASSES, GatingTable
from .detect import detection_loss, render_targets
from .model import ModelConfig, TrackerNet
from .nn import ConfigurationError, FocalLossConfig, adamw_step, one_cycle_lr
from .sim import Scene, SceneDataset

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    schedule: str = "constant"  # or "one_cycle"
    lambda_track: float = 1.0
    gamma: float = 2.0
    reg_weight: float = 1.0
    seed: int = 0
    log_every: int = 50
    # model shape
    n_frames: int = 3
    voxel_xy: float = 0.25
    vfe_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 3
    c_out: int = 32
    roi_bins: int = 5
    match_hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if self.schedule not in ("constant", "one_cycle"):
            raise ConfigurationError("schedule must be 'constant' or 'one_cycle'")
        if self.steps < 0 or not self.lr > 0 or self.lambda_track < 0:
            raise ConfigurationError("steps >= 0, lr > 0 and lambda_track >= 0 required")

    def model_config(self, n_classes: int, extent: float) -> ModelConfig:
        return ModelConfig(self.n_frames, n_classes, extent, self.voxel_xy, self.vfe_channels, self.stage_channels,
                           self.stage_strides, self.temporal_kernel, self.c_out, self.roi_bins,
                           self.match_hidden, self.seed)

    def lr_at(self, step: int) -> float:
        if self.schedule == "one_cycle":
            return float(one_cycle_lr(step, self.steps, self.lr))
        return self.lr


def window_points(scene: Scene, i: int, n_frames: int) -> list[np.ndarray]:
    """Clouds of frames i, i-1, ... (at most ``n_frames``), current first."""
    return [scene.frames[i - k].points for k in range(min(n_frames, i + 1))]


def gt_windows(scene: Scene, i: int, n_frames: int) -> list[GTTrackWindow]:
    by_id: dict[int, GTTrackWindow] = {}
    for k in range(min(n_frames, i + 1)):
        for g in scene.frames[i - k].boxes:
            w = by_id.setdefault(g.id, GTTrackWindow(g.id, g.box.cls, {}))
            w.boxes[k + 1] = g.box
    return [by_id[k] for k in sorted(by_id)]


def sample_step(net: TrackerNet, scene: Scene, i: int, cfg: TrainConfig, gating: GatingTable,
                focal: FocalLossConfig, class_table=DEFAULT_CLASSES, backward: bool = True) -> dict:
    """Forward + backward for one (scene, frame) sample; returns loss parts."""
    out = net.forward(window_points(scene, i, net.cfg.n_frames))
    targets = render_targets([g.box for g in scene.frames[i].boxes], net.geometry, net.cfg.n_classes)
    l_det, gdet, det_parts = detection_loss(out.raw, targets, cfg.reg_weight)
    if not math.isfinite(l_det):
        raise DivergenceError(f"non-finite detection loss at frame {i}")
    windows = gt_windows(scene, i, net.cfg.n_frames)
    pairs = gen_training_pairs(windows, gating)
    logits = np.zeros(0)
    labels = np.zeros(0, dtype=bool)
    if pairs.pairs:
        det_boxes = [w.boxes.get(1) for w in windows]
        hists = [{t: b for t, b in w.boxes.items() if t >= 2} for w in windows]
        logits = net.match_logits(out.inst, det_boxes, hists, [(p.i, p.j) for p in pairs.pairs])
        labels = pairs.labels
    alpha = focal_alphas([p.current.cls for p in pairs.pairs], class_table)
    loss, parts, d_logits = total_loss(l_det, logits, labels, cfg.lambda_track, focal, alpha)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at frame {i}: {parts}")
    if backward:
        net.backward(gdet["heatmap_logits"], gdet["reg"],
                     d_logits if cfg.lambda_track > 0 and len(d_logits) else None)
    parts.update(det_parts)
    parts["n_pairs"] = len(pairs.pairs)
    return parts


def train(datasets: Sequence[SceneDataset] | SceneDataset, cfg: TrainConfig,
          net: Optional[TrackerNet] = None, class_table=DEFAULT_CLASSES,
          callback: Optional[Callable[[int, dict], None]] = None) -> tuple[TrackerNet, list[dict]]:
    """Sample a random (scene, frame) per step and take one AdamW step.

    Passing ``net`` resumes from its parameters, optimizer moments and step
    counter; ``cfg.steps`` then counts additional steps."""
    if isinstance(datasets, SceneDataset):
        datasets = [datasets]
    samples = [(d, s, i) for d, ds in enumerate(datasets) for s, sc in enumerate(ds.scenes)
               for i in range(len(sc))]
    if not samples:
        raise ConfigurationError("training needs at least one frame")
    ds0 = datasets[0]
    if net is None:
        net = TrackerNet(cfg.model_config(len(ds0.class_names), ds0.extent))
    gating = GatingTable.for_classes(class_table)
    focal = FocalLossConfig(alpha=1.0, gamma=cfg.gamma)
    rng = np.random.default_rng([cfg.seed, net.store.step])
    history = []
    start = net.store.step
    for k in range(cfg.steps):
        d, s, i = samples[int(rng.integers(len(samples)))]
        parts = sample_step(net, datasets[d].scenes[s], i, cfg, gating, focal, class_table)
        lr = cfg.lr_at(k)
        adamw_step(net.store, lr, cfg.weight_decay)
        parts["step"] = net.store.step
        parts["lr"] = lr
        history.append(parts)
        if callback is not None:
            callback(net.store.step, parts)
        if cfg.log_every and (net.store.step - start) % cfg.log_every == 0:
            recent = history[-cfg.log_every:]
            log.info("step %d  L=%.4f  det=%.4f  track=%.4f", net.store.step,
                     np.mean([h["total"] for h in recent]), np.mean([h["det"] for h in recent]),
                     np.mean([h["track"] for h in recent]))
    return net, history
