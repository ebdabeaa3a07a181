"""Rotated ROI sampling on BEV maps with a temporal max-pool over the
detection's frame and the track's past frames."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .encoder import BEVGeometry, BEVSequence

DEFAULT_BINS = 5


@dataclass(frozen=True)
class RotatedBox2D:
    cx: float
    cy: float
    w: float
    l: float
    alpha: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError("rotated box sizes must be positive")


def bbox3d_to_2d(box) -> RotatedBox2D:
    """Drop height and vertical center; keep the BEV footprint and yaw."""
    return RotatedBox2D(float(box.u), float(box.v), float(box.w), float(box.l), float(box.alpha))


def roi_sample_points(box: RotatedBox2D, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of the bin centers, shape (bins, bins) each.

    Rows run across the box width, columns along its length (heading)."""
    frac = (np.arange(bins) + 0.5) / bins - 0.5
    ly, lx = np.meshgrid(frac * box.w, frac * box.l, indexing="ij")
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    return box.cx + c * lx - s * ly, box.cy + s * lx + c * ly


@dataclass
class _Bilinear:
    idx: np.ndarray  # (4, P) flat pixel index, -1 when outside
    weight: np.ndarray  # (4, P)


def _bilinear_setup(px: np.ndarray, py: np.ndarray, h: int, w: int) -> _Bilinear:
    px, py = px.ravel(), py.ravel()
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx, fy = px - x0, py - y0
    idx, wts = [], []
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        xx, yy = x0 + dx, y0 + dy
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx.append(np.where(inside, yy * w + xx, -1))
        wts.append(np.where(inside, wt, 0.0))
    return _Bilinear(np.stack(idx), np.stack(wts))


def _bilinear_apply(fmap: np.ndarray, b: _Bilinear) -> np.ndarray:
    c = fmap.shape[0]
    flat = fmap.reshape(c, -1)
    safe = np.maximum(b.idx, 0)
    return np.einsum("ckp,kp->cp", flat[:, safe], b.weight)


def _bilinear_backward(dout: np.ndarray, b: _Bilinear, dmap_flat: np.ndarray) -> None:
    for k in range(4):
        ok = b.idx[k] >= 0
        np.add.at(dmap_flat, (slice(None), b.idx[k][ok]), dout[:, ok] * b.weight[k][ok])


def rotated_roi_align(fmap: np.ndarray, box: RotatedBox2D, bins: int,
                      geometry: BEVGeometry) -> np.ndarray:
    """Bilinearly sample ``fmap`` (C, H, W) at the bin centers of ``box``;
    samples off the map read zero. Returns (C, bins, bins)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    wx, wy = roi_sample_points(box, bins)
    px, py = geometry.world_to_pixel(wx, wy)
    b = _bilinear_setup(px, py, fmap.shape[1], fmap.shape[2])
    return _bilinear_apply(fmap, b).reshape(fmap.shape[0], bins, bins)


@dataclass
class RoiFeature:
    grid: np.ndarray  # (C, R, R)
    sources: tuple[int, ...]  # relative temporal indices that contributed


def temporal_max_pool(grids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise max over axis 0; also returns the winning source index."""
    arg = np.argmax(grids, axis=0)
    return np.take_along_axis(grids, arg[None], axis=0)[0], arg


def track_align(bev: BEVSequence, det, history: Mapping[int, object], bins: int = DEFAULT_BINS,
                feature_maps: Optional[np.ndarray] = None) -> RoiFeature:
    """Pool the detection's ROI on F^1 with the track's ROIs on each F^t where
    the track has a box; absent timesteps are skipped.

    ``history`` maps relative t >= 2 to a 3D box (or RotatedBox2D)."""
    maps = bev.maps if feature_maps is None else feature_maps
    geom = bev.geometry
    grids = [rotated_roi_align(maps[0], _as_2d(det), bins, geom)]
    sources = [1]
    for t in sorted(history):
        if 2 <= t <= len(maps):
            grids.append(rotated_roi_align(maps[t - 1], _as_2d(history[t]), bins, geom))
            sources.append(t)
    pooled, _ = temporal_max_pool(np.stack(grids))
    return RoiFeature(pooled, tuple(sources))


def _as_2d(box) -> RotatedBox2D:
    return box if isinstance(box, RotatedBox2D) else bbox3d_to_2d(box)


class TrackAligner:
    """Batched TrackAlign over many (detection, track) pairs with a backward
    pass to the per-timestep feature maps.

    Each distinct (timestep, box) is sampled once and shared by all pairs that
    use it."""

    def __init__(self, bins: int = DEFAULT_BINS):
        self.bins = bins
        self._cache = None

    def forward(self, maps: np.ndarray, geometry: BEVGeometry, det_boxes: Sequence,
                histories: Sequence[Mapping[int, object]],
                pairs: Sequence[tuple[int, int]]) -> np.ndarray:
        n_t, c, h, w = maps.shape
        r = self.bins
        sample_keys: dict[tuple, int] = {}
        samplers: list[tuple[int, _Bilinear]] = []

        def sample_id(t, key, box):
            if key not in sample_keys:
                wx, wy = roi_sample_points(_as_2d(box), r)
                px, py = geometry.world_to_pixel(wx, wy)
                sample_keys[key] = len(samplers)
                samplers.append((t, _bilinear_setup(px, py, h, w)))
            return sample_keys[key]

        members = []
        for i, j in pairs:
            ids = [sample_id(1, ("det", i), det_boxes[i])]
            for t in sorted(histories[j]):
                if 2 <= t <= n_t:
                    ids.append(sample_id(t, ("trk", j, t), histories[j][t]))
            members.append(ids)
        grids = np.stack([_bilinear_apply(maps[t - 1], b) for t, b in samplers]) \
            if samplers else np.zeros((0, c, r * r))
        out = np.zeros((len(pairs), c, r * r))
        args = []
        for p, ids in enumerate(members):
            pooled, arg = temporal_max_pool(grids[ids])
            out[p] = pooled
            args.append(arg)
        self._cache = (maps.shape, samplers, members, args)
        return out.reshape(len(pairs), c, r, r)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        shape, samplers, members, args = self._cache
        n_t, c, h, w = shape
        dgrids = np.zeros((len(samplers), c, self.bins * self.bins))
        d = dout.reshape(len(members), c, -1)
        for p, (ids, arg) in enumerate(zip(members, args)):
            ids = np.asarray(ids)
            # route to the winning source only
            np.add.at(dgrids, (ids[arg], np.arange(c)[:, None], np.arange(arg.shape[1])[None, :]), d[p])
        dmaps = np.zeros((n_t, c, h * w))
        for (t, b), g in zip(samplers, dgrids):
            _bilinear_backward(g, b, dmaps[t - 1])
        return dmaps.reshape(n_t, c, h, w)
