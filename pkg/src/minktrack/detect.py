"""Center-heatmap 3D box head on the current-frame BEV map."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import BEVGeometry
from .nn import PROB_EPS, Conv2d, ConfigurationError, ParamStore, sigmoid

# regression channels
REG_DX, REG_DY, REG_D, REG_LOGW, REG_LOGL, REG_LOGH, REG_SIN, REG_COS, REG_VX, REG_VY = range(10)
N_REG = 10
HEATMAP_PRIOR_BIAS = -2.19


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]; angles already in range come back unchanged."""
    if -math.pi < a <= math.pi:
        return float(a)
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass
class Detection:
    u: float
    v: float
    d: float
    w: float
    l: float
    h: float
    alpha: float
    vel_x: float
    vel_y: float
    cls: int
    s_det: float = 1.0
    frame: int = -1

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ConfigurationError("box sizes must be positive")
        self.alpha = wrap_angle(float(self.alpha))
        self.cls = int(self.cls)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.u, self.v])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vel_x, self.vel_y])

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class DetectionTargets:
    heatmap: np.ndarray  # (n_cls, H, W)
    reg: np.ndarray  # (N_REG, H, W)
    mask: np.ndarray  # (H, W) bool, regression supervised at box peaks
    peaks: list[tuple[int, int, int]] = field(default_factory=list)  # (cls, iy, ix)
    n_skipped: int = 0


def gaussian_radius(height: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest center shift keeping IoU >= ``min_overlap`` (CornerNet recipe)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heat: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Max-combine a unit-peak Gaussian splat into ``heat`` (H, W) in place."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[radius, radius] = 1.0
    h, w = heat.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heat[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def render_targets(gt_boxes: Sequence[Detection], geometry: BEVGeometry, n_classes: int,
                   min_radius: int = 1, min_overlap: float = 0.1) -> DetectionTargets:
    h, w = geometry.height, geometry.width
    heat = np.zeros((n_classes, h, w))
    reg = np.zeros((N_REG, h, w))
    mask = np.zeros((h, w), dtype=bool)
    peaks = []
    skipped = 0
    for box in gt_boxes:
        if not geometry.contains(box.u, box.v) or not 0 <= box.cls < n_classes:
            skipped += 1
            continue
        fx = (box.u - geometry.origin_x) / geometry.cell_x
        fy = (box.v - geometry.origin_y) / geometry.cell_y
        ix, iy = min(int(fx), w - 1), min(int(fy), h - 1)
        r = gaussian_radius(box.l / geometry.cell_y, box.w / geometry.cell_x, min_overlap)
        draw_gaussian(heat[box.cls], ix, iy, max(min_radius, int(r)))
        if mask[iy, ix]:
            continue
        mask[iy, ix] = True
        peaks.append((box.cls, iy, ix))
        reg[:, iy, ix] = [fx - ix - 0.5, fy - iy - 0.5, box.d,
                          math.log(box.w), math.log(box.l), math.log(box.h),
                          math.sin(box.alpha), math.cos(box.alpha), box.vel_x, box.vel_y]
    return DetectionTargets(heat, reg, mask, peaks, skipped)


class DetectionHead:
    """Per-class heatmap logits from the classification features and box
    regression from the regression features (3x3 convs)."""

    def __init__(self, store: ParamStore, channels: int, n_classes: int,
                 rng: Optional[np.random.Generator] = None, name: str = "det"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.hm = Conv2d(store, f"{name}.heatmap", channels, n_classes, 3, rng=rng,
                         bias_init=HEATMAP_PRIOR_BIAS, scale=0.1)
        self.reg = Conv2d(store, f"{name}.reg", channels, N_REG, 3, rng=rng, scale=0.1)

    def forward(self, feat_cls: np.ndarray, feat_reg: np.ndarray) -> dict[str, np.ndarray]:
        logits = self.hm.forward(feat_cls[None])[0]
        reg = self.reg.forward(feat_reg[None])[0]
        return {"heatmap_logits": logits, "heatmap": sigmoid(logits), "reg": reg}

    def backward(self, d_logits: np.ndarray, d_reg: np.ndarray):
        return self.hm.backward(d_logits[None])[0], self.reg.backward(d_reg[None])[0]


def detect_forward(feat_cls, feat_reg, head: DetectionHead) -> dict[str, np.ndarray]:
    return head.forward(feat_cls, feat_reg)


def _local_max(heat: np.ndarray) -> np.ndarray:
    padded = np.pad(heat, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return heat == win.max(axis=(-1, -2))


def decode_detections(raw: dict[str, np.ndarray], geometry: BEVGeometry,
                      score_thresh: float = 0.1, top_k: int = 100,
                      frame: int = -1) -> list[Detection]:
    heat = raw["heatmap"]
    reg = raw["reg"]
    if not np.all(np.isfinite(heat)) or not np.all(np.isfinite(reg)):
        raise ConfigurationError("non-finite detector output")
    keep = _local_max(heat) & (heat >= score_thresh)
    cls_idx, iy, ix = np.nonzero(keep)
    scores = heat[cls_idx, iy, ix]
    order = np.argsort(-scores, kind="stable")[:top_k]
    dets = []
    for k in order:
        c, y, x = int(cls_idx[k]), int(iy[k]), int(ix[k])
        r = reg[:, y, x]
        u = geometry.origin_x + (x + 0.5 + r[REG_DX]) * geometry.cell_x
        v = geometry.origin_y + (y + 0.5 + r[REG_DY]) * geometry.cell_y
        sizes = np.exp(np.clip(r[[REG_LOGW, REG_LOGL, REG_LOGH]], -5.0, 5.0))
        dets.append(Detection(float(u), float(v), float(r[REG_D]), float(sizes[0]), float(sizes[1]),
                              float(sizes[2]), math.atan2(r[REG_SIN], r[REG_COS]),
                              float(r[REG_VX]), float(r[REG_VY]), c, float(scores[k]), frame))
    return dets


def heatmap_focal_loss(logits: np.ndarray, target: np.ndarray, alpha: float = 2.0,
                       beta: float = 4.0):
    """Penalty-reduced pixel focal loss normalized by the number of peaks.
    Returns (loss, dloss_dlogits)."""
    p_raw = sigmoid(logits)
    p = np.clip(p_raw, PROB_EPS, 1 - PROB_EPS)
    free = (p_raw > PROB_EPS) & (p_raw < 1 - PROB_EPS)
    q = 1 - p
    pos = target >= 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = (1 - target) ** beta
    loss = np.where(pos, -(q ** alpha) * np.log(p), -neg_w * p ** alpha * np.log(q))
    grad = np.where(pos, q ** alpha * (alpha * p * np.log(p) - q),
                    neg_w * p ** alpha * (p - alpha * q * np.log(q)))
    return float(loss.sum()) / n_pos, grad * free / n_pos


def detection_loss(raw: dict[str, np.ndarray], targets: DetectionTargets,
                   reg_weight: float = 1.0, reg_channel_weights: Optional[np.ndarray] = None):
    """Heatmap focal loss plus masked L1 box regression.

    Returns ``(L_det, grads, parts)`` where ``grads`` holds the gradients for
    the heatmap logits and regression maps.
    """
    logits = raw["heatmap_logits"]
    reg = raw["reg"]
    if logits.shape != targets.heatmap.shape or reg.shape != targets.reg.shape:
        raise ConfigurationError("prediction and target shapes differ")
    hm_loss, d_logits = heatmap_focal_loss(logits, targets.heatmap)
    cw = np.ones(N_REG) if reg_channel_weights is None else np.asarray(reg_channel_weights)
    n = int(targets.mask.sum())
    d_reg = np.zeros_like(reg)
    reg_loss = 0.0
    if n:
        diff = reg[:, targets.mask] - targets.reg[:, targets.mask]
        reg_loss = float(np.sum(np.abs(diff) * cw[:, None])) / n
        d_reg[:, targets.mask] = np.sign(diff) * cw[:, None] / n
    total = hm_loss + reg_weight * reg_loss
    return total, {"heatmap_logits": d_logits, "reg": reg_weight * d_reg}, \
        {"heatmap": hm_loss, "regression": reg_loss}
