"""Sparse spatio-temporal middle encoder producing per-timestep BEV maps."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .nn import Conv2d, ConfigurationError, ParamStore, relu, relu_backward
from .sparse import (VFE, SparseConv4d, VoxelGridSpec, check_stride,
                     output_shape, voxelize)


@dataclass(frozen=True)
class StageConfig:
    channels: int
    kernel: tuple[int, int, int, int] = (3, 3, 3, 3)
    stride: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        check_stride(self.stride)
        if self.channels < 1:
            raise ConfigurationError("stage channels must be >= 1")


def _default_stages():
    return (StageConfig(16, stride=(1, 1, 1, 1)),
            StageConfig(32, stride=(1, 2, 2, 2)),
            StageConfig(64, stride=(1, 2, 2, 2)))


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    vfe_channels: int = 16
    c_out: int = 32

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ConfigurationError("encoder needs at least one stage")
        sx = int(np.prod([s.stride[3] for s in stages]))
        sy = int(np.prod([s.stride[2] for s in stages]))
        if sx != sy:
            raise ConfigurationError("encoder must stride x and y equally")

    @property
    def st(self) -> int:
        """Cumulative spatial stride in x/y."""
        return int(np.prod([s.stride[3] for s in self.stages]))

    def squashed_z(self, spec: VoxelGridSpec) -> int:
        shape = spec.tensor_shape
        for s in self.stages:
            shape = output_shape(shape, s.stride)
        return shape[1]

    def bev_shape(self, spec: VoxelGridSpec) -> tuple[int, int]:
        nx, ny, _ = spec.grid_xyz
        return ny // self.st, nx // self.st


@dataclass(frozen=True)
class BEVGeometry:
    """World placement of BEV pixel (row iy, col ix): center at
    ``origin + (index + 0.5) * cell``."""
    origin_x: float
    origin_y: float
    cell_x: float
    cell_y: float
    height: int
    width: int

    @classmethod
    def from_spec(cls, spec: VoxelGridSpec, cfg: EncoderConfig) -> "BEVGeometry":
        h, w = cfg.bev_shape(spec)
        return cls(spec.range_min[0], spec.range_min[1],
                   spec.voxel_size[0] * cfg.st, spec.voxel_size[1] * cfg.st, h, w)

    def world_to_pixel(self, x, y):
        """Continuous pixel coordinates with pixel centers at integers."""
        return ((np.asarray(x) - self.origin_x) / self.cell_x - 0.5,
                (np.asarray(y) - self.origin_y) / self.cell_y - 0.5)

    def pixel_center(self, ix, iy):
        return (self.origin_x + (np.asarray(ix) + 0.5) * self.cell_x,
                self.origin_y + (np.asarray(iy) + 0.5) * self.cell_y)

    def contains(self, x, y) -> bool:
        return (self.origin_x <= x < self.origin_x + self.width * self.cell_x
                and self.origin_y <= y < self.origin_y + self.height * self.cell_y)


@dataclass
class BEVSequence:
    maps: np.ndarray  # (n_t, C_out, H, W); maps[0] is F^1
    geometry: BEVGeometry

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, t: int) -> np.ndarray:
        """Map at relative temporal index ``t`` (1-based)."""
        return self.maps[t - 1]


def stack_window(window: Sequence[np.ndarray]) -> np.ndarray:
    """Turn per-frame (N, 4) [x, y, z, r] clouds, window[0] being the current
    frame, into one (N, 5) [x, y, z, t, r] array."""
    parts = []
    for t, pts in enumerate(window, start=1):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 4)
        parts.append(np.column_stack([pts[:, :3], np.full(len(pts), float(t)), pts[:, 3]]))
    if not parts:
        return np.zeros((0, 5))
    return np.concatenate(parts, axis=0)


class SparseEncoder:
    """voxelize -> VFE -> sparse 4D stages -> densify with Z folded into
    channels -> 1x1 projection to ``c_out``."""

    def __init__(self, store: ParamStore, spec: VoxelGridSpec, cfg: EncoderConfig,
                 rng: Optional[np.random.Generator] = None, name: str = "encoder"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.cfg = cfg
        self.vfe = VFE(store, f"{name}.vfe", cfg.vfe_channels, rng=rng)
        self.stages = []
        c = cfg.vfe_channels
        for k, st in enumerate(cfg.stages):
            self.stages.append(SparseConv4d(store, f"{name}.stage{k}", c, st.channels,
                                            st.kernel, st.stride, rng=rng))
            c = st.channels
        self.nz = cfg.squashed_z(spec)
        self.c_last = c
        self.proj = Conv2d(store, f"{name}.bev_proj", c * self.nz, cfg.c_out, k=1, rng=rng)
        self.geometry = BEVGeometry.from_spec(spec, cfg)
        self._cache = None

    def forward(self, window: Sequence[np.ndarray]) -> BEVSequence:
        n_t = len(window)
        if n_t > self.spec.n_frames:
            raise ConfigurationError(f"window of {n_t} frames exceeds T={self.spec.n_frames}")
        spec = replace(self.spec, n_frames=max(n_t, 1))
        groups = voxelize(stack_window(window), spec)
        x = self.vfe.forward(groups)
        pre = []
        for stage in self.stages:
            y = stage.forward(x)
            pre.append(y.features)
            x = y.with_features(relu(y.features))
        h, w = self.cfg.bev_shape(self.spec)
        dense = np.zeros((max(n_t, 1), self.nz, self.c_last, h, w))
        c = x.coords
        keep = (c[:, 2] < h) & (c[:, 3] < w)
        c = c[keep]
        dense[c[:, 0] - 1, c[:, 1], :, c[:, 2], c[:, 3]] = x.features[keep]
        dense = dense.reshape(max(n_t, 1), self.nz * self.c_last, h, w)[:n_t]
        z = self.proj.forward(dense) if n_t else np.zeros((0, self.cfg.c_out, h, w))
        self._cache = (groups, pre, keep, c, n_t, z)
        return BEVSequence(relu(z), self.geometry)

    def backward(self, dmaps: np.ndarray) -> None:
        groups, pre, keep, c, n_t, z = self._cache
        if n_t == 0:
            return
        d = self.proj.backward(relu_backward(dmaps, z))
        h, w = d.shape[2:]
        d = d.reshape(n_t, self.nz, self.c_last, h, w)
        dfeat = np.zeros((len(keep), self.c_last))
        dfeat[keep] = d[c[:, 0] - 1, c[:, 1], :, c[:, 2], c[:, 3]]
        for stage, p in zip(reversed(self.stages), reversed(pre)):
            dfeat = stage.backward(dfeat * (p > 0))
        self.vfe.backward(dfeat)


def encode(frames: Sequence[np.ndarray], spec: VoxelGridSpec, cfg: EncoderConfig,
           params: Optional[ParamStore] = None, seed: int = 0) -> BEVSequence:
    """Functional form: run an encoder whose weights live in ``params`` (fresh
    seeded weights when ``params`` is None or lacks them)."""
    params = params if params is not None else ParamStore()
    with params.binding():
        enc = SparseEncoder(params, spec, cfg, rng=np.random.default_rng(seed))
    return enc.forward(frames)


class HeadBranches:
    """Three parallel 3x3 conv + ReLU branches for classification, box
    regression and instance (association) features."""

    NAMES = ("cls", "reg", "inst")

    def __init__(self, store: ParamStore, channels: int, rng: Optional[np.random.Generator] = None,
                 init: str = "he", name: str = "branch"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs = {b: Conv2d(store, f"{name}.{b}", channels, channels, 3, rng=rng, init=init)
                      for b in self.NAMES}
        self._pre = {}

    def forward(self, maps: np.ndarray, which: Sequence[str] = NAMES) -> dict[str, np.ndarray]:
        """``maps`` is (N, C, H, W); each requested branch is applied with
        shared weights across the batch."""
        out = {}
        for b in which:
            z = self.convs[b].forward(maps)
            self._pre[b] = z
            out[b] = relu(z)
        return out

    def backward(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        total = None
        for b, g in grads.items():
            d = self.convs[b].backward(relu_backward(g, self._pre[b]))
            total = d if total is None else total + d
        return total


def head_branches(f1: np.ndarray, branches: HeadBranches):
    """(feat_cls, feat_reg, feat_inst) for a single (C, H, W) map."""
    out = branches.forward(f1[None])
    return out["cls"][0], out["reg"][0], out["inst"][0]
