"""Independent reference implementations used by the tests."""
import math
from itertools import permutations

import numpy as np

from minktrack.sparse import SparseVoxelTensor4D, build_kernel_map, dense_conv4d_reference, sparse_conv4d


def random_sparse(rng, shape, n_max, channels):
    """Unique random coordinates inside ``shape`` (t is 1-based)."""
    n = int(rng.integers(1, n_max + 1))
    t = rng.integers(1, shape[0] + 1, n)
    sp = [rng.integers(0, s, n) for s in shape[1:]]
    coords = np.unique(np.column_stack([t] + sp), axis=0)
    return SparseVoxelTensor4D(coords, rng.standard_normal((len(coords), channels)), shape)


def random_conv_case(rng, max_side=16, n_max=500):
    shape = (int(rng.integers(1, 4)),) + tuple(int(rng.integers(2, max_side + 1)) for _ in range(3))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    inp = random_sparse(rng, shape, n_max, c_in)
    if rng.uniform() < 0.5:
        mode = "submanifold"
        kernel = tuple(int(k) for k in rng.choice([1, 3], 4))
        stride = (1, 1, 1, 1)
    else:
        mode = "generative"
        kernel = tuple(int(k) for k in rng.integers(1, 4, 4))
        stride = (1,) + tuple(int(s) for s in rng.integers(1, 3, 3))
    weight = rng.standard_normal((int(np.prod(kernel)), c_in, c_out))
    bias = rng.standard_normal(c_out)
    return inp, weight, bias, kernel, stride, mode


def sparse_vs_dense(inp, weight, bias, kernel, stride, mode):
    """Max abs difference between the sparse output and the dense oracle at
    every output site, plus a check that generative mode emits exactly the
    sites the input reaches."""
    kmap = build_kernel_map(inp, kernel, stride, mode)
    out = sparse_conv4d(inp, weight, bias, kmap)
    dense = dense_conv4d_reference(inp.dense(), weight, bias, kernel, stride)
    c = out.coords
    got = dense[c[:, 0] - 1, c[:, 1], c[:, 2], c[:, 3]]
    diff = float(np.max(np.abs(got - out.features))) if out.n else 0.0
    if mode == "generative":
        ones = SparseVoxelTensor4D(inp.coords, np.ones((inp.n, 1)), inp.shape).dense()
        reach = dense_conv4d_reference(ones, np.ones((len(kmap.offsets), 1, 1)), None, kernel, stride)[..., 0]
        expect = set(map(tuple, np.argwhere(reach > 0) + [1, 0, 0, 0]))
        if expect != set(map(tuple, c)):
            return np.inf
    return diff


def brute_force_assignment(cost, infeasible=np.inf):
    """Enumerate every injection of the smaller side into the larger one.
    Infeasible entries are dropped from a candidate; candidates rank by the
    number of feasible pairs (more is better), then by exact total cost.
    Returns ``(n_matched, total)``."""
    n, m = cost.shape
    feas = cost < infeasible
    best = (0, 0.0)
    small, large = (n, m) if n <= m else (m, n)
    for perm in permutations(range(large), small):
        idx = zip(range(n), perm) if n <= m else zip(perm, range(m))
        pairs = [(i, j) for i, j in idx if feas[i, j]]
        best = min(best, (-len(pairs), math.fsum(cost[i, j] for i, j in pairs)))
    return -best[0], best[1]
