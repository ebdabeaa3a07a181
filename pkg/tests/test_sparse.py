import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minktrack.encoder import EncoderConfig, StageConfig
from minktrack.nn import ConfigurationError, ParamStore
from minktrack.sparse import (VFE, CoordinateHash, SparseConv4d, SparseVoxelTensor4D, TemporalStrideError,
                              VoxelGridSpec, build_kernel_map, check_stride, pack_coords, pack_delta,
                              sparse_conv4d, unpack_coords, voxelize)

from oracles import random_conv_case, sparse_vs_dense

SPEC = VoxelGridSpec((0.0, 0.0, 0.0), (4.0, 4.0, 2.0), (0.5, 0.5, 0.5), 3)


def test_voxelize_floor_index():
    g = voxelize(np.array([[1.3, 0.2, 0.0, 1, 0.5]]), SPEC)
    np.testing.assert_array_equal(g.coords, [[1, 0, 0, 2]])


def test_voxelize_empty():
    g = voxelize(np.zeros((0, 5)), SPEC)
    assert g.coords.shape == (0, 4) and g.n_dropped == 0


def test_voxelize_groups_per_time():
    pts = np.array([[1.1, 1.1, 0.1, 1, 0.2], [1.2, 1.3, 0.2, 1, 0.4],
                    [1.1, 1.1, 0.1, 2, 0.2]])
    g = voxelize(pts, SPEC)
    assert len(g.coords) == 2
    assert np.bincount(g.voxel_of_point).tolist() == [2, 1]


def test_voxelize_drops_out_of_range():
    pts = np.array([[-0.1, 1, 1, 1, 0], [1, 1, 1, 4, 0], [1, 1, 1, 0, 0], [1, 1, 1, 1, 0]])
    g = voxelize(pts, SPEC)
    assert g.n_dropped == 3 and len(g.coords) == 1


def _vfe(rng):
    store = ParamStore()
    return VFE(store, "v", 5, rng=rng)


def test_vfe_single_point_is_its_feature(rng):
    layer = _vfe(rng)
    g = voxelize(np.array([[1.1, 1.2, 0.3, 1, 0.7]]), SPEC)
    out = layer.forward(g)
    from minktrack.sparse import point_features
    z = point_features(g) @ layer.linear.weight + layer.linear.bias
    np.testing.assert_allclose(out.features, np.maximum(z, 0))


def test_vfe_duplicate_point_idempotent(rng):
    layer = _vfe(rng)
    p = np.array([[1.1, 1.2, 0.3, 1, 0.7]])
    a = layer.forward(voxelize(p, SPEC)).features
    b = layer.forward(voxelize(np.vstack([p, p]), SPEC)).features
    np.testing.assert_array_equal(a, b)


def test_vfe_point_order_invariant(rng):
    layer = _vfe(rng)
    pts = np.column_stack([rng.uniform(0, 4, (40, 2)), rng.uniform(0, 2, 40),
                           rng.integers(1, 4, 40), rng.uniform(0, 1, 40)])
    a = layer.forward(voxelize(pts, SPEC))
    b = layer.forward(voxelize(pts[rng.permutation(40)], SPEC))
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.features, b.features)


def test_empty_vfe(rng):
    out = _vfe(rng).forward(voxelize(np.zeros((0, 5)), SPEC))
    assert out.n == 0 and out.channels == 5


def _tensor(coords, c=2, shape=(3, 8, 8, 8), rng=None):
    coords = np.asarray(coords)
    feats = (rng or np.random.default_rng(0)).standard_normal((len(coords), c))
    return SparseVoxelTensor4D(coords, feats, shape)


def test_unit_kernel_identity_pairs():
    inp = _tensor([[1, 0, 0, 0], [2, 3, 4, 5]])
    km = build_kernel_map(inp, (1, 1, 1, 1), (1, 1, 1, 1))
    assert len(km.offsets) == 1
    np.testing.assert_array_equal(km.in_rows, km.out_rows)


def test_single_voxel_generative_reach():
    inp = _tensor([[1, 4, 4, 4]])
    km = build_kernel_map(inp, (1, 3, 3, 3), (1, 1, 1, 1), "generative")
    assert km.n_out == 27
    corner = build_kernel_map(_tensor([[1, 0, 0, 0]]), (1, 3, 3, 3), (1, 1, 1, 1), "generative")
    assert corner.n_out == 8


def test_temporal_stride_rejected():
    with pytest.raises(TemporalStrideError):
        build_kernel_map(_tensor([[1, 0, 0, 0]]), (3, 3, 3, 3), (2, 1, 1, 1), "generative")


@given(st.tuples(st.integers(-3, 6), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
       st.integers(1, 64), st.sampled_from([1, 2, 3]))
def test_temporal_stride_property(stride, channels, kt):
    s_t = stride[0]
    build = [lambda: check_stride(stride),
             lambda: StageConfig(channels, (kt, 3, 3, 3), stride),
             lambda: SparseConv4d(ParamStore(), "c", 2, channels, (kt, 3, 3, 3), stride)]
    for fn in build:
        if s_t != 1:
            with pytest.raises(ConfigurationError) as exc:
                fn()
            if s_t > 1:
                assert exc.type is TemporalStrideError
        else:
            fn()


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
                min_size=1, max_size=4))
def test_encoder_config_rejects_any_temporal_stride(strides):
    stages = [((1,) + s[1:]) for s in strides]
    bad = [(s[0],) + s[1:] for s in strides]
    cfg_ok = all(s == 1 for s in [b[0] for b in bad])
    make = lambda ss: EncoderConfig(tuple(StageConfig(4, (3, 3, 3, 3), (s[0], s[1], s[1], s[1])) for s in ss))
    make(stages)
    if not cfg_ok:
        with pytest.raises(TemporalStrideError):
            make(bad)


def test_identity_weights_copy_input(rng):
    inp = _tensor(rng.integers(0, 8, (30, 4)) % [3, 8, 8, 8] + [1, 0, 0, 0], c=3, rng=rng)
    inp = SparseVoxelTensor4D(np.unique(inp.coords, axis=0), rng.standard_normal((len(np.unique(inp.coords, axis=0)), 3)), inp.shape)
    km = build_kernel_map(inp, (1, 1, 1, 1), (1, 1, 1, 1))
    out = sparse_conv4d(inp, np.eye(3)[None], None, km)
    np.testing.assert_array_equal(out.features, inp.features)


def test_empty_input_empty_output():
    inp = SparseVoxelTensor4D(np.zeros((0, 4)), np.zeros((0, 2)), (3, 8, 8, 8))
    for mode, stride in (("submanifold", (1, 1, 1, 1)), ("generative", (1, 2, 2, 2))):
        km = build_kernel_map(inp, (3, 3, 3, 3), stride, mode)
        out = sparse_conv4d(inp, np.zeros((81, 2, 4)), np.zeros(4), km)
        assert out.n == 0 and out.features.shape == (0, 4)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_sparse_matches_dense_oracle(seed):
    case = random_conv_case(np.random.default_rng(seed), max_side=8, n_max=60)
    assert sparse_vs_dense(*case) < 1e-9


def test_submanifold_keeps_active_set(rng):
    inp = _tensor(np.unique(rng.integers(0, 6, (40, 4)) % [3, 6, 6, 6] + [1, 0, 0, 0], axis=0), rng=rng)
    km = build_kernel_map(inp, (3, 3, 3, 3), (1, 1, 1, 1))
    np.testing.assert_array_equal(km.out_coords, inp.coords)


def test_generative_output_time_axis_preserved(rng):
    inp = _tensor([[1, 2, 2, 2], [3, 5, 5, 5]], rng=rng)
    km = build_kernel_map(inp, (3, 3, 3, 3), (1, 2, 2, 2), "generative")
    assert set(km.out_coords[:, 0]) <= {1, 2, 3}
    assert km.out_shape == (3, 4, 4, 4)


@given(st.lists(st.tuples(*[st.integers(-40, 40)] * 4), min_size=0, max_size=60, unique=True),
       st.lists(st.tuples(*[st.integers(-45, 45)] * 4), max_size=30))
def test_hash_lookup_matches_dict(coords, queries):
    c = np.array(coords, dtype=np.int64).reshape(-1, 4)
    h = CoordinateHash(c)
    ref = {tuple(x): i for i, x in enumerate(coords)}
    q = np.array(queries + coords[:5], dtype=np.int64).reshape(-1, 4)
    expect = [ref.get(tuple(x), -1) for x in q.tolist()]
    assert h.lookup(q).tolist() == expect


def test_hash_rejects_duplicates():
    with pytest.raises(ConfigurationError):
        CoordinateHash(np.array([[1, 2, 3, 4], [1, 2, 3, 4]]))


@given(st.lists(st.tuples(*[st.integers(-1000, 1000)] * 4), min_size=1, max_size=20),
       st.tuples(*[st.integers(-5, 5)] * 4))
def test_pack_round_trip_and_delta(coords, d):
    c = np.array(coords, dtype=np.int64)
    np.testing.assert_array_equal(unpack_coords(pack_coords(c)), c)
    with np.errstate(over="ignore"):
        shifted = pack_coords(c) + pack_delta(np.array(d))
    np.testing.assert_array_equal(shifted, pack_coords(c + np.array(d)))
