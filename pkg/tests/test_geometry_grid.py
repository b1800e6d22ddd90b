import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from sdfview import diffmath as dm
from sdfview import geometry_grid as gg
from sdfview.errors import DomainError, PrunedRegionError


def make_grid(depth, width, seed=0):
    store = dm.ParameterStore()
    grid = gg.build(depth, width, store, rng=np.random.default_rng(seed))
    return store, grid


def test_build_counts_depth1():
    store, grid = make_grid(1, 2)
    assert grid.n_active_leaves() == 8
    corners = store.data(grid.corner_param)
    assert corners.shape == (27, 2)
    assert store.param_count == 27 * 2


def test_build_counts_depth3():
    store, grid = make_grid(3, 8)
    assert grid.n_active_leaves() == 8**3
    assert store.data(grid.corner_param).shape == ((2**3 + 1) ** 3, 8)


def test_interior_queries_succeed_after_build():
    _, grid = make_grid(2, 4)
    pts = np.random.default_rng(1).uniform(-0.999, 0.999, size=(200, 3))
    feats, mask = grid.query_features_batch(pts)
    assert mask.all()
    assert feats.data.shape == (200, 4)


def test_query_outside_bounds_raises():
    _, grid = make_grid(1, 2)
    with pytest.raises(DomainError):
        grid.query_features(np.array([1.5, 0.0, 0.0]))


def test_corner_query_is_exact():
    store, grid = make_grid(2, 3)
    corners = store.data(grid.corner_param)
    # corner at integer lattice coordinate (1,2,3) of the level-2 lattice
    ijk = np.array([1, 2, 3])
    x = grid.lo + ijk * grid.cell_size
    got = grid.query_features(x).data[0]
    want = corners[grid.corner_linear_index(ijk)]
    np.testing.assert_array_equal(got, want)


def test_cell_center_is_corner_mean():
    store, grid = make_grid(1, 4)
    corners = store.data(grid.corner_param)
    center = np.array([-0.5, -0.5, -0.5])  # center of cell (0,0,0)
    got = grid.query_features(center).data[0]
    offs = gg._CORNER_OFFSETS
    idx = grid.corner_linear_index(offs)
    np.testing.assert_allclose(got, corners[idx].mean(axis=0), atol=1e-15)


def test_query_matches_dense_oracle():
    store, grid = make_grid(3, 5, seed=3)
    corners = store.data(grid.corner_param)
    r1 = grid.res + 1
    lattice = corners.reshape(r1, r1, r1, 5)
    axis = np.linspace(grid.lo, grid.hi, r1)
    oracle = RegularGridInterpolator((axis, axis, axis), lattice, method="linear")
    pts = np.random.default_rng(4).uniform(-1, 1, size=(1000, 3))
    got, mask = grid.query_features_batch(pts)
    assert mask.all()
    np.testing.assert_allclose(got.data, oracle(pts), atol=1e-12, rtol=0)


def test_linear_along_axis_within_cell():
    _, grid = make_grid(2, 3, seed=5)
    base = np.array([0.1, 0.3, -0.2])
    step = np.array([0.08, 0.0, 0.0])  # stays inside one cell of size 0.5
    pts = np.stack([base, base + step, base + 2 * step])
    feats, _ = grid.query_features_batch(pts)
    np.testing.assert_allclose(
        feats.data[1], 0.5 * (feats.data[0] + feats.data[2]), atol=1e-13
    )


def test_continuity_across_faces():
    _, grid = make_grid(2, 4, seed=6)
    face_x = grid.lo + 2 * grid.cell_size  # interior face plane
    rng = np.random.default_rng(7)
    yz = rng.uniform(-0.9, 0.9, size=(50, 2))
    eps = 1e-11
    left = np.column_stack([np.full(50, face_x - eps), yz])
    right = np.column_stack([np.full(50, face_x + eps), yz])
    fl, _ = grid.query_features_batch(left)
    fr, _ = grid.query_features_batch(right)
    np.testing.assert_allclose(fl.data, fr.data, atol=1e-9)


def test_feature_gradient_is_trilinear_weight():
    store, grid = make_grid(1, 1, seed=8)
    x = np.array([-0.3, 0.25, 0.6])

    def loss_fn():
        feats, _ = grid.query_features_batch(x[None, :])
        return dm.tsum(feats)

    assert dm.finite_difference_check(loss_fn, store, h=1e-6) < 1e-9
    # analytic weights sum to one
    store.zero_grads()
    dm.backward(loss_fn())
    g = store.get(grid.corner_param).grad
    assert g.sum() == pytest.approx(1.0, abs=1e-12)
    assert (g >= 0).all()


def test_position_gradient_flows_when_requested():
    store, grid = make_grid(1, 2, seed=9)
    x = dm.Tensor(np.array([[0.2, -0.4, 0.1]]), requires_grad=True)
    feats, _ = grid.query_features_batch(x)
    dm.backward(dm.tsum(dm.square(feats)))
    assert x.grad is not None and np.all(np.isfinite(x.grad))


def test_prune_keep_all_and_none():
    _, grid = make_grid(2, 2)
    assert grid.prune(lambda c, s: np.ones(len(c), bool)) == 0
    assert grid.n_active_leaves() == 64
    removed = grid.prune(lambda c, s: np.zeros(len(c), bool))
    assert removed == 64
    assert grid.n_active_leaves() == 0
    assert grid.active[0].all()  # root retained


def test_prune_sphere_band_matches_bruteforce():
    _, grid = make_grid(3, 2)
    r = 0.5

    def sphere_sdf(c):
        return np.linalg.norm(c, axis=-1) - r

    diag = grid.cell_size * np.sqrt(3.0)

    def keep(centers, size):
        return np.abs(sphere_sdf(centers)) < diag

    removed = grid.prune(keep)
    # independent brute-force scan over all leaves
    n = grid.res
    survive = 0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                c = grid.lo + (np.array([i, j, k]) + 0.5) * grid.cell_size
                if abs(np.linalg.norm(c) - r) < diag:
                    survive += 1
    assert grid.n_active_leaves() == survive
    assert removed == n**3 - survive


def test_pruned_query_signals_and_preserves_retained():
    store, grid = make_grid(2, 3, seed=10)
    pts = np.random.default_rng(11).uniform(-0.99, 0.99, size=(300, 3))
    before, _ = grid.query_features_batch(pts)
    # prune the x<0 half-space
    grid.prune(lambda c, s: c[:, 0] > 0)
    after, mask = grid.query_features_batch(pts)
    kept = pts[:, 0] > 0
    # retained-region queries unchanged, bitwise
    assert np.array_equal(before.data[kept], after.data[kept])
    assert np.array_equal(mask, grid.query_mask(pts))
    assert not mask[~kept].any()
    with pytest.raises(PrunedRegionError):
        grid.query_features(np.array([-0.5, 0.5, 0.5]))


def test_contract_limits_and_roundtrip():
    far = np.array([1e9, 0.0, 0.0])
    assert np.linalg.norm(gg.contract(far).coord) == pytest.approx(2.0, abs=1e-8)
    near = np.array([0.0, 1.0 + 1e-9, 0.0])
    assert np.linalg.norm(gg.contract(near).coord) == pytest.approx(1.0, abs=1e-8)
    rng = np.random.default_rng(12)
    dirs = rng.standard_normal((100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 1.0 + 10.0 ** rng.uniform(-6, 6, 100)
    xs = dirs * radii[:, None]
    back = gg.invert_contraction(gg.contract_batch(xs))
    rel = np.linalg.norm(back - xs, axis=1) / np.linalg.norm(xs, axis=1)
    assert rel.max() < 1e-9


def test_contract_rejects_interior():
    with pytest.raises(DomainError):
        gg.contract(np.array([0.5, 0.0, 0.0]))
