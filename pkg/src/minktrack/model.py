"""The joint network: 4D encoder, head branches, detection head, TrackAlign
and the match classifier, with one backward pass through all of them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .assoc import DetectionToTrackClassifier, MatchMatrix, Track, classify
from .classes import GatingTable
from .dataio import config_from_mapping, config_to_mapping
from .detect import Detection, DetectionHead, decode_detections
from .encoder import EncoderConfig, HeadBranches, SparseEncoder, StageConfig
from .nn import (CheckpointError, ConfigurationError, ParamStore, load_checkpoint, relu_backward,
                 restore_state, save_checkpoint, store_state)
from .sparse import VoxelGridSpec
from .trackalign import TrackAligner
from .trackmgr import feasibility


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 3
    n_classes: int = 2
    extent: float = 20.0
    voxel_xy: float = 0.25
    vfe_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 3
    c_out: int = 32
    roi_bins: int = 5
    match_hidden: tuple[int, ...] = (128, 64)
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigurationError("stage_channels and stage_strides differ in length")
        if self.n_frames < 1 or self.n_classes < 1 or self.roi_bins < 1:
            raise ConfigurationError("n_frames, n_classes and roi_bins must be >= 1")
        if self.temporal_kernel < 1:
            raise ConfigurationError("temporal_kernel must be >= 1")

    @property
    def grid_spec(self) -> VoxelGridSpec:
        e = self.extent
        return VoxelGridSpec((-e, -e, -0.5), (e, e, 3.5), (self.voxel_xy, self.voxel_xy, 0.5), self.n_frames)

    @property
    def encoder(self) -> EncoderConfig:
        kt = self.temporal_kernel
        stages = tuple(StageConfig(c, (kt, 3, 3, 3), (1, s, s, s))
                       for c, s in zip(self.stage_channels, self.stage_strides))
        return EncoderConfig(stages, self.vfe_channels, self.c_out)

    def to_mapping(self) -> dict:
        return config_to_mapping(self)

    @classmethod
    def from_mapping(cls, values: Mapping) -> "ModelConfig":
        return config_from_mapping(cls, {k: _text(v) for k, v in values.items()}, strict=False)


def _text(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass
class FrameOutput:
    maps: np.ndarray  # (n_t, C, H, W) encoder output
    inst: np.ndarray  # (n_t, C, H, W) instance-branch features
    raw: dict[str, np.ndarray]  # detection head outputs on F^1


class TrackerNet:
    def __init__(self, cfg: ModelConfig = ModelConfig(), store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(cfg.seed)
        with self.store.binding():
            self.encoder = SparseEncoder(self.store, cfg.grid_spec, cfg.encoder, rng=rng)
            self.branches = HeadBranches(self.store, cfg.c_out, rng=rng)
            self.head = DetectionHead(self.store, cfg.c_out, cfg.n_classes, rng=rng)
            self.classifier = DetectionToTrackClassifier(
                self.store, cfg.c_out * cfg.roi_bins ** 2, cfg.match_hidden, rng=rng)
        self.aligner = TrackAligner(cfg.roi_bins)
        self._pre = None

    @property
    def geometry(self):
        return self.encoder.geometry

    # -- forward -----------------------------------------------------------
    def forward(self, window: Sequence[np.ndarray]) -> FrameOutput:
        """``window[0]`` is the current frame's (N, 4) cloud."""
        if not 1 <= len(window) <= self.cfg.n_frames:
            raise ConfigurationError(f"window must hold 1..{self.cfg.n_frames} frames")
        bev = self.encoder.forward(window)
        maps = bev.maps
        convs = self.branches.convs
        z_cls = convs["cls"].forward(maps[:1])
        z_reg = convs["reg"].forward(maps[:1])
        z_inst = convs["inst"].forward(maps)
        self._pre = (z_cls, z_reg, z_inst)
        raw = self.head.forward(np.maximum(z_cls[0], 0), np.maximum(z_reg[0], 0))
        return FrameOutput(maps, np.maximum(z_inst, 0), raw)

    def decode(self, out: FrameOutput, frame: int, score_thresh: float = 0.1,
               top_k: int = 100) -> list[Detection]:
        return decode_detections(out.raw, self.geometry, score_thresh, top_k, frame)

    def match_logits(self, inst: np.ndarray, det_boxes: Sequence, histories: Sequence[Mapping],
                     pairs: Sequence[tuple[int, int]]) -> np.ndarray:
        rois = self.aligner.forward(inst, self.geometry, det_boxes, histories, pairs)
        self._rois_shape = rois.shape
        return self.classifier.forward(rois)

    def match(self, inst: np.ndarray, dets: Sequence[Detection], tracks: Sequence[Track],
              frame: int, gating: GatingTable) -> MatchMatrix:
        mask = feasibility(dets, tracks, gating)
        pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(mask))]
        if not pairs:
            return MatchMatrix(np.zeros(mask.shape), mask, np.full(mask.shape, -np.inf))
        histories = [t.history(frame) for t in tracks]
        rois = self.aligner.forward(inst, self.geometry, dets, histories, pairs)
        return classify(rois, pairs, mask.shape, self.classifier)

    # -- backward ----------------------------------------------------------
    def backward(self, d_heat_logits: np.ndarray, d_reg: np.ndarray,
                 d_logits: Optional[np.ndarray] = None) -> None:
        """Accumulate parameter gradients. ``d_logits`` refers to the last
        ``match_logits`` call."""
        z_cls, z_reg, z_inst = self._pre
        convs = self.branches.convs
        d_fcls, d_freg = self.head.backward(d_heat_logits, d_reg)
        dmaps = np.zeros((len(z_inst),) + z_inst.shape[1:])
        dmaps[:1] += convs["cls"].backward(relu_backward(d_fcls[None], z_cls))
        dmaps[:1] += convs["reg"].backward(relu_backward(d_freg[None], z_reg))
        if d_logits is not None and len(d_logits):
            d_rois = self.classifier.backward(d_logits, self._rois_shape)
            d_inst = self.aligner.backward(d_rois)
            dmaps += convs["inst"].backward(relu_backward(d_inst, z_inst))
        self.encoder.backward(dmaps)

    # -- persistence -------------------------------------------------------
    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = {"model": {k: list(v) if isinstance(v, tuple) else v
                          for k, v in self.cfg.to_mapping().items()},
                "step": int(self.store.step)}
        meta.update(extra or {})
        save_checkpoint(path, store_state(self.store), meta)

    @classmethod
    def load(cls, path) -> tuple["TrackerNet", dict]:
        tensors, meta = load_checkpoint(path)
        if "model" not in meta:
            raise CheckpointError(f"{path}: checkpoint lacks a model config")
        net = cls(ModelConfig.from_mapping(meta["model"]))
        restore_state(net.store, tensors, step=int(meta.get("step", 0)), strict=True)
        return net, meta
