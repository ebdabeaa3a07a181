"""4D (t, z, y, x) sparse voxel tensors and sparse convolution.

Coordinates keep the relative temporal index verbatim (``t = 1`` is the
current frame), so the temporal axis spans ``[1, T]`` while spatial axes span
``[0, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy import sparse as sp_sparse

from .nn import ConfigurationError, Linear, ParamStore, he_init, relu

_EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)
_OFF = 1 << 15


class TemporalStrideError(ConfigurationError):
    """Striding along the temporal axis is forbidden."""


def pack_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _OFF
    if c.size and (c.min() < 0 or c.max() >= 1 << 16):
        raise ConfigurationError("coordinate outside packable range")
    c = c.astype(np.uint64)
    return (c[:, 0] << np.uint64(48)) | (c[:, 1] << np.uint64(32)) | (c[:, 2] << np.uint64(16)) | c[:, 3]


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    m = np.uint64(0xFFFF)
    c = np.stack([(keys >> np.uint64(s)) & m for s in (48, 32, 16, 0)], axis=1)
    return c.astype(np.int64) - _OFF


def pack_delta(offsets: np.ndarray) -> np.ndarray:
    """Packed displacement: ``pack(c) + pack_delta(d) == pack(c + d)`` (mod
    2**64) whenever both ends are packable."""
    d = np.asarray(offsets, dtype=np.int64).reshape(-1, 4)
    with np.errstate(over="ignore"):
        return (d[:, 0].astype(np.uint64) << np.uint64(48)) + (d[:, 1].astype(np.uint64) << np.uint64(32)) \
            + (d[:, 2].astype(np.uint64) << np.uint64(16)) + d[:, 3].astype(np.uint64)


def _mix64(k: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps
    with np.errstate(over="ignore"):
        k = k.copy()
        k ^= k >> np.uint64(30)
        k *= np.uint64(0xBF58476D1CE4E5B9)
        k ^= k >> np.uint64(27)
        k *= np.uint64(0x94D049BB133111EB)
        k ^= k >> np.uint64(31)
    return k


class CoordinateHash:
    """Open-addressing hash table from packed coordinates to row indices.

    Insertion and lookup are vectorized: every round advances all unresolved
    keys by one probe, and slot conflicts within a round go to the lowest row.
    """

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords) if len(coords) else np.zeros(0, np.uint64)
        n = keys.size
        if np.unique(keys).size != n:
            raise ConfigurationError("duplicate coordinate in sparse tensor")
        cap = 8
        while cap < 4 * n:
            cap *= 2
        self.mask = np.uint64(cap - 1)
        self.keys = np.full(cap, _EMPTY, dtype=np.uint64)
        self.rows = np.full(cap, -1, dtype=np.int64)
        self.size = n
        slots = _mix64(keys) & self.mask
        pending = np.arange(n)
        while pending.size:
            s = slots[pending]
            open_ = self.keys[s] == _EMPTY
            cand = pending[open_]
            uniq, first = np.unique(s[open_], return_index=True)
            winners = cand[first]
            self.keys[uniq] = keys[winners]
            self.rows[uniq] = winners
            placed = np.zeros(n, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            slots[pending] = (slots[pending] + np.uint64(1)) & self.mask

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where absent."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        out = np.full(len(q), -1, dtype=np.int64)
        if not len(q) or not self.size:
            return out
        # queries outside the packable range cannot be present
        ok = np.all((q + _OFF >= 0) & (q + _OFF < 1 << 16), axis=1)
        idx = np.nonzero(ok)[0]
        qk = pack_coords(q[idx])
        out[idx] = self.lookup_keys(qk)
        return out

    def lookup_keys(self, qk: np.ndarray) -> np.ndarray:
        """Like ``lookup`` but on already packed keys."""
        qk = np.asarray(qk, dtype=np.uint64).ravel()
        out = np.full(len(qk), -1, dtype=np.int64)
        if not self.size:
            return out
        idx = np.arange(len(qk))
        slots = _mix64(qk) & self.mask
        while idx.size:
            k = self.keys[slots]
            hit = k == qk
            out[idx[hit]] = self.rows[slots[hit]]
            cont = ~hit & (k != _EMPTY)
            idx, qk = idx[cont], qk[cont]
            slots = (slots[cont] + np.uint64(1)) & self.mask
        return out


@dataclass
class SparseVoxelTensor4D:
    coords: np.ndarray  # (N, 4) int64: t, iz, iy, ix
    features: np.ndarray  # (N, C)
    shape: tuple[int, int, int, int]  # (T, D, H, W)
    _index: Optional[CoordinateHash] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ConfigurationError("features must be (N, C) with one row per coordinate")
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def index(self) -> CoordinateHash:
        if self._index is None:
            self._index = CoordinateHash(self.coords)
        return self._index

    def with_features(self, features: np.ndarray) -> "SparseVoxelTensor4D":
        return SparseVoxelTensor4D(self.coords, features, self.shape, _index=self._index)

    def dense(self) -> np.ndarray:
        """Dense (T, D, H, W, C) array; temporal index t lands at slot t - 1."""
        out = np.zeros(self.shape + (self.channels,))
        if self.n:
            c = self.coords
            out[c[:, 0] - 1, c[:, 1], c[:, 2], c[:, 3]] = self.features
        return out

    def sorted(self) -> "SparseVoxelTensor4D":
        order = np.lexsort(self.coords.T[::-1])
        return SparseVoxelTensor4D(self.coords[order], self.features[order], self.shape)

    def to_records(self) -> list[dict]:
        """Debug dump: one record per voxel."""
        return [{"t": int(c[0]), "iz": int(c[1]), "iy": int(c[2]), "ix": int(c[3]),
                 "features": [float(v) for v in f]}
                for c, f in zip(self.coords, self.features)]


# ---------------------------------------------------------------------------
# voxelization


@dataclass(frozen=True)
class VoxelGridSpec:
    range_min: tuple[float, float, float] = (-20.0, -20.0, -0.5)  # x, y, z meters
    range_max: tuple[float, float, float] = (20.0, 20.0, 3.5)
    voxel_size: tuple[float, float, float] = (0.25, 0.25, 0.5)
    n_frames: int = 3

    def __post_init__(self):
        for lo, hi, v in zip(self.range_min, self.range_max, self.voxel_size):
            if not v > 0:
                raise ConfigurationError("voxel size must be positive")
            if not hi > lo:
                raise ConfigurationError("range_max must exceed range_min")
        if self.n_frames < 1:
            raise ConfigurationError("n_frames must be >= 1")

    @property
    def grid_xyz(self) -> tuple[int, int, int]:
        return tuple(int(np.floor((hi - lo) / v + 1e-9))
                     for lo, hi, v in zip(self.range_min, self.range_max, self.voxel_size))

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        nx, ny, nz = self.grid_xyz
        return (self.n_frames, nz, ny, nx)


@dataclass
class VoxelGroups:
    coords: np.ndarray  # (V, 4) sorted lexicographically
    points: np.ndarray  # (P, 5) x, y, z, t, r of kept points, grouped by voxel
    voxel_of_point: np.ndarray  # (P,)
    n_dropped: int
    spec: VoxelGridSpec


def voxelize(points: np.ndarray, spec: VoxelGridSpec) -> VoxelGroups:
    """Group (x, y, z, t, r) points per voxel and per temporal index.

    Points outside ``[range_min, range_max)`` or with ``t`` outside
    ``[1, T]`` are dropped and counted.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    lo = np.asarray(spec.range_min)
    hi = np.asarray(spec.range_max)
    vs = np.asarray(spec.voxel_size)
    nx, ny, nz = spec.grid_xyz
    xyz = pts[:, :3]
    t = np.rint(pts[:, 3]).astype(np.int64)
    idx = np.floor((xyz - lo) / vs).astype(np.int64)
    keep = (np.all(xyz >= lo, axis=1) & np.all(xyz < hi, axis=1)
            & (t >= 1) & (t <= spec.n_frames)
            & (idx[:, 0] < nx) & (idx[:, 1] < ny) & (idx[:, 2] < nz))
    pts, idx, t = pts[keep], idx[keep], t[keep]
    coords = np.stack([t, idx[:, 2], idx[:, 1], idx[:, 0]], axis=1) if len(pts) else np.zeros((0, 4), np.int64)
    # canonical order: by voxel, then by point values, so results never depend on input order
    order = np.lexsort((pts[:, 4], pts[:, 2], pts[:, 1], pts[:, 0],
                        coords[:, 3], coords[:, 2], coords[:, 1], coords[:, 0])) if len(pts) else np.zeros(0, np.int64)
    pts, coords = pts[order], coords[order]
    if len(pts):
        uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
    else:
        uniq, inverse = np.zeros((0, 4), np.int64), np.zeros(0, np.int64)
    return VoxelGroups(uniq.astype(np.int64), pts, inverse.astype(np.int64),
                       int((~keep).sum()), spec)


VFE_INPUT_WIDTH = 7


def point_features(groups: VoxelGroups) -> np.ndarray:
    """Per-point VFE input: position inside the voxel (x, y relative to the
    voxel center), absolute z, reflectance, and offset from the voxel's point
    centroid."""
    pts = groups.points
    if not len(pts):
        return np.zeros((0, VFE_INPUT_WIDTH))
    spec = groups.spec
    lo = np.asarray(spec.range_min)
    vs = np.asarray(spec.voxel_size)
    vox = groups.voxel_of_point
    nvox = len(groups.coords)
    counts = np.bincount(vox, minlength=nvox).astype(np.float64)
    centroid = np.stack([np.bincount(vox, weights=pts[:, k], minlength=nvox) for k in range(3)], 1)
    centroid /= counts[:, None]
    c = groups.coords[vox]
    center_x = lo[0] + (c[:, 3] + 0.5) * vs[0]
    center_y = lo[1] + (c[:, 2] + 0.5) * vs[1]
    local = np.stack([(pts[:, 0] - center_x) / vs[0], (pts[:, 1] - center_y) / vs[1]], 1)
    return np.concatenate([local, pts[:, 2:3], pts[:, 4:5], (pts[:, :3] - centroid[vox]) / vs], axis=1)


class VFE:
    """Single voxel-feature-encoding layer: per-point linear + ReLU, then a
    per-voxel elementwise max."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 rng: Optional[np.random.Generator] = None):
        self.linear = Linear(store, name, VFE_INPUT_WIDTH, channels, rng=rng)
        self.channels = channels
        self._cache = None

    def forward(self, groups: VoxelGroups) -> SparseVoxelTensor4D:
        nvox = len(groups.coords)
        shape = groups.spec.tensor_shape
        if nvox == 0:
            self._cache = None
            return SparseVoxelTensor4D(np.zeros((0, 4), np.int64), np.zeros((0, self.channels)), shape)
        feats = point_features(groups)
        return self.forward_features(groups, feats)

    def forward_features(self, groups: VoxelGroups, feats: np.ndarray) -> SparseVoxelTensor4D:
        vox = groups.voxel_of_point
        nvox = len(groups.coords)
        z = self.linear.forward(feats)
        h = relu(z)
        starts = np.searchsorted(vox, np.arange(nvox))
        vmax = np.maximum.reduceat(h, starts, axis=0)
        # first point reaching the max receives the gradient
        is_max = h == vmax[vox]
        pidx = np.where(is_max, np.arange(len(h))[:, None], len(h))
        arg = np.minimum.reduceat(pidx, starts, axis=0)
        self._cache = (z, arg, len(h))
        return SparseVoxelTensor4D(groups.coords, vmax, groups.spec.tensor_shape)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Returns the gradient w.r.t. the per-point input features."""
        if self._cache is None:
            return np.zeros((0, VFE_INPUT_WIDTH))
        z, arg, npts = self._cache
        dh = np.zeros((npts, self.channels))
        cols = np.broadcast_to(np.arange(self.channels), arg.shape)
        dh[arg, cols] = dout
        dz = dh * (z > 0)
        return self.linear.backward(dz)


def vfe(groups: VoxelGroups, layer: VFE) -> SparseVoxelTensor4D:
    return layer.forward(groups)


# ---------------------------------------------------------------------------
# kernel maps and convolution


@dataclass
class KernelMap:
    """Gather/scatter pairs of all offsets, concatenated in offset order;
    offset ``k`` owns ``in_rows[splits[k]:splits[k+1]]``."""
    offsets: np.ndarray  # (K, 4)
    in_rows: np.ndarray  # (P,)
    out_rows: np.ndarray  # (P,)
    splits: np.ndarray  # (K + 1,)
    out_coords: np.ndarray
    out_shape: tuple[int, int, int, int]
    stride: tuple[int, int, int, int]
    mode: str
    n_in: int = 0

    @property
    def n_out(self) -> int:
        return len(self.out_coords)

    @property
    def n_pairs(self) -> int:
        return len(self.in_rows)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.in_rows[a:b], self.out_rows[a:b]) for a, b in zip(self.splits[:-1], self.splits[1:])]

    @cached_property
    def scatter_out(self) -> sp_sparse.csr_matrix:
        """(n_out, P) 0/1 matrix summing pair contributions into outputs."""
        p = self.n_pairs
        return sp_sparse.csr_matrix((np.ones(p), (self.out_rows, np.arange(p))), shape=(self.n_out, p))

    @cached_property
    def scatter_in(self) -> sp_sparse.csr_matrix:
        p = self.n_pairs
        return sp_sparse.csr_matrix((np.ones(p), (self.in_rows, np.arange(p))), shape=(self.n_in, p))


def kernel_offsets(kernel_size: Sequence[int]) -> np.ndarray:
    ranges = [range(-((k - 1) // 2), k - (k - 1) // 2) for k in kernel_size]
    return np.array(list(product(*ranges)), dtype=np.int64).reshape(-1, 4)


def check_stride(stride: Sequence[int]) -> tuple[int, int, int, int]:
    stride = tuple(int(s) for s in stride)
    if len(stride) != 4:
        raise ConfigurationError("stride must have 4 entries (t, z, y, x)")
    if stride[0] != 1:
        raise TemporalStrideError(f"temporal stride forbidden (got st_t={stride[0]})")
    if min(stride) < 1:
        raise ConfigurationError("strides must be >= 1")
    return stride


def output_shape(shape, stride) -> tuple[int, int, int, int]:
    return (shape[0],) + tuple(n // s for n, s in zip(shape[1:], stride[1:]))


def build_kernel_map(inp: SparseVoxelTensor4D, kernel_size: Sequence[int],
                     stride: Sequence[int], mode: str = "submanifold") -> KernelMap:
    """Gather/scatter pairs for ``out[o] = sum_k W_k in[o * stride + offset_k]``."""
    stride = check_stride(stride)
    kernel_size = tuple(int(k) for k in kernel_size)
    if len(kernel_size) != 4 or min(kernel_size) < 1:
        raise ConfigurationError("kernel_size must have 4 positive entries")
    offsets = kernel_offsets(kernel_size)
    if mode == "submanifold":
        if any(k % 2 == 0 for k in kernel_size):
            raise ConfigurationError("submanifold kernels must be odd")
        if any(x != 1 for x in stride):
            raise ConfigurationError("submanifold convolution requires unit stride")
        out_coords = inp.coords
        out_shape = inp.shape
    elif mode == "generative":
        return _generative_kernel_map(inp, kernel_size, stride, offsets)
    else:
        raise ConfigurationError(f"unknown sparse convolution mode {mode!r}")
    in_rows = out_rows = np.zeros(0, np.int64)
    splits = np.zeros(len(offsets) + 1, np.int64)
    if inp.n:
        # one batched hash lookup for all offsets
        base = out_coords
        # skip sites whose neighbourhood leaves the packable range (none present there anyway)
        reach = np.abs(offsets).max(axis=0)
        inside = np.all((base - reach + _OFF >= 0) & (base + reach + _OFF < 1 << 16), axis=1)
        with np.errstate(over="ignore"):
            qk = pack_coords(base[inside])[None, :] + pack_delta(offsets)[:, None]
        rows = np.full((len(offsets), len(out_coords)), -1, dtype=np.int64)
        rows[:, inside] = inp.index.lookup_keys(qk).reshape(len(offsets), -1)
        k_idx, out_rows = np.nonzero(rows >= 0)
        in_rows = rows[k_idx, out_rows]
        splits = np.searchsorted(k_idx, np.arange(len(offsets) + 1))
    return KernelMap(offsets, in_rows, out_rows, splits, out_coords, tuple(out_shape), stride, mode, inp.n)


def _generative_kernel_map(inp: SparseVoxelTensor4D, kernel_size, stride, offsets) -> KernelMap:
    """Outputs are every strided site some input reaches. Each valid
    (input, offset) combination is itself a pair, so no lookup is needed."""
    out_shape = output_shape(inp.shape, stride)
    n, k_total = inp.n, len(offsets)
    if n == 0:
        z = np.zeros(0, np.int64)
        return KernelMap(offsets, z, z, np.zeros(k_total + 1, np.int64), np.zeros((0, 4), np.int64),
                         tuple(out_shape), stride, "generative", 0)
    lo = (1, 0, 0, 0)
    hi = (out_shape[0] + 1,) + tuple(out_shape[1:])
    key = np.zeros((n, 1), np.uint64)
    valid = np.ones((n, 1), bool)
    # offsets enumerate as a product over axes (t slowest), so build the
    # (n, K) tables axis by axis
    for a, (ks, sa, shift) in enumerate(zip(kernel_size, stride, (48, 32, 16, 0))):
        d = np.arange(-((ks - 1) // 2), ks - (ks - 1) // 2)
        c = inp.coords[:, a:a + 1] - d[None, :]
        ok = (c % sa == 0)
        o = c // sa
        ok &= (o >= lo[a]) & (o < hi[a])
        part = ((np.where(ok, o, 0) + _OFF).astype(np.uint64) << np.uint64(shift))
        key = (key[:, :, None] + part[:, None, :]).reshape(n, -1)
        valid = (valid[:, :, None] & ok[:, None, :]).reshape(n, -1)
    k_idx, in_rows = np.nonzero(valid.T)
    keys = key.T[k_idx, in_rows]
    uniq, out_rows = np.unique(keys, return_inverse=True)
    splits = np.searchsorted(k_idx, np.arange(k_total + 1))
    return KernelMap(offsets, in_rows.astype(np.int64), out_rows.reshape(-1).astype(np.int64), splits,
                     unpack_coords(uniq), tuple(out_shape), stride, "generative", n)


def sparse_conv4d(inp: SparseVoxelTensor4D, weight: np.ndarray, bias: Optional[np.ndarray],
                  kmap: KernelMap) -> SparseVoxelTensor4D:
    """Apply per-offset weights (K, C_in, C_out) along the kernel map."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 3 or weight.shape[0] != len(kmap.offsets) or weight.shape[1] != inp.channels:
        raise ConfigurationError(
            f"weight shape {weight.shape} does not match {len(kmap.offsets)} offsets x {inp.channels} channels")
    c_out = weight.shape[2]
    if kmap.n_pairs and (kmap.in_rows.max() >= inp.n or kmap.out_rows.max() >= kmap.n_out):
        raise AssertionError("kernel map references a dangling row")
    x = inp.features[kmap.in_rows]
    contrib = np.empty((kmap.n_pairs, c_out))
    for k, (a, b) in enumerate(zip(kmap.splits[:-1], kmap.splits[1:])):
        if b > a:
            np.matmul(x[a:b], weight[k], out=contrib[a:b])
    out = kmap.scatter_out @ contrib if kmap.n_pairs else np.zeros((kmap.n_out, c_out))
    out = np.asarray(out)
    if bias is not None:
        out = out + bias
    return SparseVoxelTensor4D(kmap.out_coords, out, kmap.out_shape)


def sparse_conv4d_backward(inp: SparseVoxelTensor4D, weight: np.ndarray, kmap: KernelMap,
                           dout: np.ndarray):
    """Returns (d_input_features, d_weight, d_bias)."""
    dw = np.zeros_like(weight)
    if not kmap.n_pairs:
        return np.zeros_like(inp.features), dw, dout.sum(axis=0)
    x = inp.features[kmap.in_rows]
    g = dout[kmap.out_rows]
    dx_pairs = np.empty_like(x)
    for k, (a, b) in enumerate(zip(kmap.splits[:-1], kmap.splits[1:])):
        if b > a:
            dw[k] = x[a:b].T @ g[a:b]
            np.matmul(g[a:b], weight[k].T, out=dx_pairs[a:b])
    dx = np.asarray(kmap.scatter_in @ dx_pairs)
    return dx, dw, dout.sum(axis=0)


class SparseConv4d:
    """Sparse 4D convolution layer; unit stride uses submanifold mode, strided
    layers use generative mode."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel_size: Sequence[int] = (3, 3, 3, 3), stride: Sequence[int] = (1, 1, 1, 1),
                 mode: Optional[str] = None, rng: Optional[np.random.Generator] = None):
        self.stride = check_stride(stride)
        self.kernel_size = tuple(int(k) for k in kernel_size)
        self.mode = mode or ("submanifold" if all(s == 1 for s in self.stride) else "generative")
        self.store = store
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        rng = rng if rng is not None else np.random.default_rng(0)
        k = int(np.prod(self.kernel_size))
        store.add(f"{name}.weight", he_init(rng, (k, c_in, c_out), k * c_in / 4))
        store.add(f"{name}.bias", np.zeros(c_out))
        self._cache = None

    def forward(self, inp: SparseVoxelTensor4D) -> SparseVoxelTensor4D:
        kmap = build_kernel_map(inp, self.kernel_size, self.stride, self.mode)
        self._cache = (inp, kmap)
        return sparse_conv4d(inp, self.store[f"{self.name}.weight"],
                             self.store[f"{self.name}.bias"], kmap)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        inp, kmap = self._cache
        dx, dw, db = sparse_conv4d_backward(inp, self.store[f"{self.name}.weight"], kmap, dout)
        self.store.accumulate(f"{self.name}.weight", dw)
        self.store.accumulate(f"{self.name}.bias", db)
        return dx


def dense_conv4d_reference(dense_in: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray],
                           kernel_size: Sequence[int], stride: Sequence[int]) -> np.ndarray:
    """Plain dense 4D cross-correlation with 'same'-style padding, used as an
    oracle for the sparse path. Input (T, D, H, W, C); output spatial sizes are
    ``n // stride``."""
    kernel_size = tuple(kernel_size)
    stride = tuple(stride)
    shape = dense_in.shape[:4]
    oshape = (shape[0],) + tuple(n // s for n, s in zip(shape[1:], stride[1:]))
    lo = [(k - 1) // 2 for k in kernel_size]
    hi = [k - 1 - p for k, p in zip(kernel_size, lo)]
    padded = np.pad(dense_in, [(a, b) for a, b in zip(lo, hi)] + [(0, 0)])
    out = np.zeros(oshape + (weight.shape[2],))
    for k, off in enumerate(product(*[range(ks) for ks in kernel_size])):
        sl = tuple(slice(off[d], off[d] + oshape[d] * stride[d], stride[d]) for d in range(4))
        out += padded[sl] @ weight[k]
    if bias is not None:
        out += bias
    return out
