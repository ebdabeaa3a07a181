import numpy as np
import pytest

from minktrack.encoder import EncoderConfig, HeadBranches, SparseEncoder, StageConfig, encode, head_branches
from minktrack.nn import ConfigurationError, ParamStore
from minktrack.sparse import VoxelGridSpec

DESK = VoxelGridSpec((-8.0, -8.0, 0.0), (8.0, 8.0, 2.0), (0.5, 0.5, 0.5), 3)
CFG = EncoderConfig((StageConfig(4), StageConfig(6, stride=(1, 2, 2, 2)), StageConfig(6, stride=(1, 2, 2, 2))),
                    vfe_channels=4, c_out=5)


def _cloud(rng, n=300, lo=-6.0, hi=6.0):
    return np.column_stack([rng.uniform(lo, hi, (n, 2)), rng.uniform(0, 2, n), rng.uniform(0, 1, n)])


def test_desk_grid_shapes(rng):
    assert DESK.grid_xyz[:2] == (32, 32)
    assert CFG.st == 4
    bev = encode([_cloud(rng) for _ in range(3)], DESK, CFG)
    assert bev.maps.shape == (3, 5, 8, 8)
    assert bev.geometry.cell_x == 2.0


def test_zero_points_zero_maps():
    bev = encode([np.zeros((0, 4))] * 3, DESK, CFG)
    assert bev.maps.shape == (3, 5, 8, 8)
    # empty voxels contribute nothing; only the projection bias (zero) remains
    assert np.all(bev.maps == 0)


def test_short_window_gives_fewer_maps(rng):
    bev = encode([_cloud(rng)], DESK, CFG)
    assert bev.maps.shape == (1, 5, 8, 8)


def test_window_longer_than_t_rejected(rng):
    with pytest.raises(ConfigurationError):
        encode([_cloud(rng)] * 4, DESK, CFG)


def test_translation_by_one_cell(rng):
    cell = DESK.voxel_size[0] * CFG.st
    frames = [_cloud(rng, lo=-5.5, hi=3.5) for _ in range(3)]
    shifted = [f + [cell, 0, 0, 0] for f in frames]
    store = ParamStore()
    a = encode(frames, DESK, CFG, store).maps
    b = encode(shifted, DESK, CFG, store).maps
    # column ix of a equals column ix+1 of b away from the borders
    np.testing.assert_allclose(b[..., 1:-1, 2:-1], a[..., 1:-1, 1:-2], atol=1e-9)
    assert np.abs(a).max() > 0


def test_identity_branches_copy_input(rng):
    f1 = np.abs(rng.standard_normal((4, 6, 6)))
    hb = HeadBranches(ParamStore(), 4, init="identity")
    for out in head_branches(f1, hb):
        np.testing.assert_allclose(out, f1)
        assert out.shape == f1.shape


def test_gradient_reaches_every_branch(rng):
    store = ParamStore()
    hb = HeadBranches(store, 3, rng=rng)
    maps = rng.standard_normal((1, 3, 5, 5))
    outs = hb.forward(maps)
    d = hb.backward({k: np.ones_like(v) for k, v in outs.items()})
    assert d.shape == maps.shape
    for b in HeadBranches.NAMES:
        assert np.abs(store.grads[f"branch.{b}.weight"]).sum() > 0


def test_encoder_backward_populates_all_layers(rng):
    store = ParamStore()
    enc = SparseEncoder(store, DESK, CFG, rng=rng)
    out = enc.forward([_cloud(rng) for _ in range(3)])
    enc.backward(np.ones_like(out.maps))
    for name in store.names():
        if name.endswith("weight"):
            assert np.abs(store.grads[name]).sum() > 0, name


def test_xy_strides_must_match():
    with pytest.raises(ConfigurationError):
        EncoderConfig((StageConfig(4, stride=(1, 1, 2, 1)),))
