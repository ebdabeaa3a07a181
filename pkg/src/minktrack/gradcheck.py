"""Finite-difference checks of every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .detect import DetectionHead, DetectionTargets, N_REG, detection_loss, heatmap_focal_loss
from .encoder import BEVGeometry, EncoderConfig, SparseEncoder, StageConfig
from .nn import MLP, FocalLossConfig, ParamStore, binary_focal_loss, grad_check
from .sparse import VFE, SparseConv4d, SparseVoxelTensor4D, VoxelGridSpec, point_features, voxelize
from .trackalign import RotatedBox2D, TrackAligner

LAYER_TOL = 1e-3
LOSS_TOL = 1e-4


@dataclass
class GradResult:
    op: str
    wrt: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.op:<24} {self.wrt:<24} rel_err={self.rel_err:.2e}  tol={self.tol:.0e}"


def _param_op(store: ParamStore, name: str, run: Callable[[], float]):
    """Wrap ``run`` (forward + backward, returning the loss) as a function of
    one parameter tensor."""
    def op(x):
        store.params[name][...] = x
        store.zero_grad()
        value = run()
        return value, store.grads[name].copy()
    return op


def _check_params(store, run, op_name, names, tol, max_coords, rng):
    out = []
    for name in names:
        orig = store[name].copy()
        err = grad_check(_param_op(store, name, run), orig, max_coords=max_coords, rng=rng)
        store.params[name][...] = orig
        out.append(GradResult(op_name, name, err, tol))
    return out


def _small_spec(n_frames=2):
    return VoxelGridSpec((-2.0, -2.0, 0.0), (2.0, 2.0, 2.0), (0.5, 0.5, 0.5), n_frames)


def _random_cloud(rng, n, spec):
    lo, hi = np.asarray(spec.range_min), np.asarray(spec.range_max)
    xyz = rng.uniform(lo, hi, size=(n, 3))
    t = rng.integers(1, spec.n_frames + 1, size=n)
    return np.column_stack([xyz, t, rng.uniform(0, 1, n)])


def check_vfe(rng, max_coords=40) -> list[GradResult]:
    spec = _small_spec()
    groups = voxelize(_random_cloud(rng, 60, spec), spec)
    store = ParamStore()
    layer = VFE(store, "vfe", 6, rng=rng)
    feats = point_features(groups)
    r = rng.standard_normal((len(groups.coords), 6))

    def run_x(x):
        store.zero_grad()
        out = layer.forward_features(groups, x)
        return float(np.sum(out.features * r)), layer.backward(r)

    res = [GradResult("vfe", "points", grad_check(run_x, feats, max_coords=max_coords, rng=rng), LAYER_TOL)]

    def run():
        out = layer.forward_features(groups, feats)
        layer.backward(r)
        return float(np.sum(out.features * r))
    return res + _check_params(store, run, "vfe", ["vfe.weight", "vfe.bias"], LAYER_TOL, max_coords, rng)


def _random_sparse(rng, shape, n, c):
    t = rng.integers(1, shape[0] + 1, n)
    sp = np.column_stack([t] + [rng.integers(0, s, n) for s in shape[1:]])
    coords = np.unique(sp, axis=0)
    return SparseVoxelTensor4D(coords, rng.standard_normal((len(coords), c)), shape)


def check_sparse_conv(rng, max_coords=40) -> list[GradResult]:
    res = []
    for label, kernel, stride in (("submanifold", (3, 3, 3, 3), (1, 1, 1, 1)),
                                  ("generative", (2, 3, 3, 3), (1, 2, 2, 2))):
        inp = _random_sparse(rng, (2, 4, 6, 6), 30, 3)
        store = ParamStore()
        conv = SparseConv4d(store, "conv", 3, 4, kernel, stride, rng=rng)
        r = rng.standard_normal((conv.forward(inp).n, 4))

        def run_x(x):
            store.zero_grad()
            out = conv.forward(inp.with_features(x))
            return float(np.sum(out.features * r)), conv.backward(r)

        res.append(GradResult(f"sparse_conv/{label}", "features",
                              grad_check(run_x, inp.features, max_coords=max_coords, rng=rng), LAYER_TOL))

        def run():
            out = conv.forward(inp)
            conv.backward(r)
            return float(np.sum(out.features * r))
        res += _check_params(store, run, f"sparse_conv/{label}", ["conv.weight", "conv.bias"],
                             LAYER_TOL, max_coords, rng)
    return res


def check_encoder(rng, max_coords=25) -> list[GradResult]:
    """Whole sparse encoder: VFE, stages, BEV folding and projection."""
    spec = _small_spec(2)
    cfg = EncoderConfig((StageConfig(4, (3, 3, 3, 3)), StageConfig(4, (2, 3, 3, 3), (1, 2, 2, 2))),
                        vfe_channels=4, c_out=3)
    store = ParamStore()
    enc = SparseEncoder(store, spec, cfg, rng=rng)
    frames = [np.delete(_random_cloud(rng, 50, spec), 3, axis=1) for _ in range(2)]
    r = rng.standard_normal(enc.forward(frames).maps.shape)

    def run():
        out = enc.forward(frames)
        enc.backward(r)
        return float(np.sum(out.maps * r))
    names = ["encoder.vfe.weight", "encoder.stage0.weight", "encoder.stage1.weight", "encoder.bev_proj.weight"]
    return _check_params(store, run, "encoder", names, LAYER_TOL, max_coords, rng)


def check_detection_head(rng, max_coords=40) -> list[GradResult]:
    store = ParamStore()
    head = DetectionHead(store, 4, 2, rng=rng)
    fc, fr = rng.standard_normal((2, 4, 6, 7))
    r1 = rng.standard_normal((2, 6, 7))
    r2 = rng.standard_normal((N_REG, 6, 7))

    def value(out):
        return float(np.sum(out["heatmap_logits"] * r1) + np.sum(out["reg"] * r2))

    def run_cls(x):
        store.zero_grad()
        v = value(head.forward(x, fr))
        return v, head.backward(r1, r2)[0]

    def run_reg(x):
        store.zero_grad()
        v = value(head.forward(fc, x))
        return v, head.backward(r1, r2)[1]

    res = [GradResult("detection_head", "feat_cls", grad_check(run_cls, fc, max_coords=max_coords, rng=rng), LAYER_TOL),
           GradResult("detection_head", "feat_reg", grad_check(run_reg, fr, max_coords=max_coords, rng=rng), LAYER_TOL)]

    def run():
        v = value(head.forward(fc, fr))
        head.backward(r1, r2)
        return v
    names = ["det.heatmap.weight", "det.heatmap.bias", "det.reg.weight", "det.reg.bias"]
    return res + _check_params(store, run, "detection_head", names, LAYER_TOL, max_coords, rng)


def _aligner_case(rng, n_t):
    geom = BEVGeometry(-4.0, -4.0, 0.5, 0.5, 16, 16)
    maps = rng.standard_normal((n_t, 3, 16, 16))

    def box():
        return RotatedBox2D(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.8, 2.0),
                            rng.uniform(1.5, 4.0), rng.uniform(-np.pi, np.pi))
    dets = [box() for _ in range(3)]
    hists = [{t: box() for t in range(2, n_t + 1) if rng.uniform() < 0.8} for _ in range(2)]
    pairs = [(i, j) for i in range(3) for j in range(2)]
    return geom, maps, dets, hists, pairs


def check_roi_bilinear(rng, max_coords=60) -> list[GradResult]:
    """Single-timestep ROI sampling (no pooling)."""
    geom, maps, dets, _, _ = _aligner_case(rng, 1)
    al = TrackAligner(4)
    pairs = [(i, 0) for i in range(len(dets))]
    r = rng.standard_normal((len(pairs), 3, 4, 4))

    def run(x):
        out = al.forward(x, geom, dets, [{}], pairs)
        return float(np.sum(out * r)), al.backward(r)
    # only pixels some sample touches carry gradient; check those plus a few others
    _, g = run(maps)
    touched = np.flatnonzero(g)
    pick = np.zeros(maps.size, bool)
    pick[rng.choice(touched, min(max_coords, len(touched)), replace=False)] = True
    return [GradResult("roi_bilinear", "feature_map", grad_check(run, maps, exclude=~pick), LAYER_TOL)]


def check_max_pool(rng, max_coords=60) -> list[GradResult]:
    """TrackAlign with temporal max-pooling over track history."""
    geom, maps, dets, hists, pairs = _aligner_case(rng, 3)
    al = TrackAligner(3)
    r = rng.standard_normal((len(pairs), 3, 3, 3))

    def run(x):
        out = al.forward(x, geom, dets, hists, pairs)
        return float(np.sum(out * r)), al.backward(r)
    _, g = run(maps)
    touched = np.flatnonzero(g)
    pick = np.zeros(maps.size, bool)
    pick[rng.choice(touched, min(max_coords, len(touched)), replace=False)] = True
    return [GradResult("max_pool", "feature_maps", grad_check(run, maps, exclude=~pick), LAYER_TOL)]


def check_mlp(rng, max_coords=40) -> list[GradResult]:
    store = ParamStore()
    mlp = MLP(store, "mlp", [6, 8, 5, 1], rng=rng)
    x0 = rng.standard_normal((7, 6))
    r = rng.standard_normal((7, 1))

    def run_x(x):
        store.zero_grad()
        return float(np.sum(mlp.forward(x) * r)), mlp.backward(r)

    res = [GradResult("mlp", "input", grad_check(run_x, x0, max_coords=max_coords, rng=rng), LAYER_TOL)]

    def run():
        v = float(np.sum(mlp.forward(x0) * r))
        mlp.backward(r)
        return v
    names = [n for n in store.names()]
    return res + _check_params(store, run, "mlp", names, LAYER_TOL, max_coords, rng)


def check_focal(rng) -> list[GradResult]:
    z0 = rng.uniform(-4, 4, 12)
    labels = rng.uniform(size=12) < 0.4
    alphas = np.where(labels, rng.uniform(1, 4, 12), 1.0)
    cfg = FocalLossConfig(gamma=2.0)

    def run(z):
        return binary_focal_loss(z, labels, cfg, alpha=alphas)
    target = np.clip(rng.uniform(-0.2, 1.0, (2, 5, 5)), 0, 1)
    target[0, 2, 2] = 1.0

    def run_hm(z):
        return heatmap_focal_loss(z, target)
    return [GradResult("focal_loss", "logits", grad_check(run, z0), LOSS_TOL),
            GradResult("heatmap_focal", "logits", grad_check(run_hm, rng.uniform(-3, 1, (2, 5, 5))), LOSS_TOL)]


def check_det_loss(rng) -> list[GradResult]:
    h, w = 5, 6
    heat = np.clip(rng.uniform(-0.3, 1.0, (2, h, w)), 0, 1)
    mask = np.zeros((h, w), bool)
    mask[1, 2] = mask[3, 4] = True
    heat[0, 1, 2] = heat[1, 3, 4] = 1.0
    reg_t = rng.standard_normal((N_REG, h, w))
    targets = DetectionTargets(heat, reg_t, mask)
    logits0 = rng.uniform(-3, 1, (2, h, w))
    reg0 = reg_t + rng.choice([-1, 1], reg_t.shape) * rng.uniform(0.05, 1.0, reg_t.shape)

    def run_logits(x):
        total, grads, _ = detection_loss({"heatmap_logits": x, "reg": reg0}, targets)
        return total, grads["heatmap_logits"]

    def run_reg(x):
        total, grads, _ = detection_loss({"heatmap_logits": logits0, "reg": x}, targets)
        return total, grads["reg"]
    return [GradResult("L_det", "heatmap_logits", grad_check(run_logits, logits0), LOSS_TOL),
            GradResult("L_det", "reg", grad_check(run_reg, reg0), LOSS_TOL)]


CHECKS = {
    "vfe": check_vfe,
    "sparse_conv": check_sparse_conv,
    "encoder": check_encoder,
    "detection_head": check_detection_head,
    "roi_bilinear": check_roi_bilinear,
    "max_pool": check_max_pool,
    "mlp": check_mlp,
    "focal_loss": check_focal,
    "L_det": check_det_loss,
}


def run_all(seed: int = 0, only: Optional[list[str]] = None) -> list[GradResult]:
    unknown = sorted(set(only or ()) - set(CHECKS))
    if unknown:
        raise KeyError(f"unknown gradient checks: {', '.join(unknown)}")
    out = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        out.extend(fn(np.random.default_rng([seed, len(out)])))
    return out
