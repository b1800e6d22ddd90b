import numpy as np
import pytest

from sdfview import diffmath as dm
from sdfview import fields as fl
from sdfview.errors import PrunedRegionError

from conftest import small_field_setup


def test_sphere_fit_recovers_radius(sphere_fitted_field):
    store, fs = sphere_fitted_field
    s0, _ = fs.sdf_value(np.zeros(3))
    assert s0.data[0] == pytest.approx(-0.5, abs=0.02)
    rng = np.random.default_rng(3)
    dirs = rng.standard_normal((50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    s, _, _ = fs.sdf_value_batch(0.5 * dirs)
    assert np.abs(s.data).max() < 0.02


def test_sdf_value_deterministic():
    _, fs = small_field_setup()
    x = np.array([0.21, -0.4, 0.33])
    a, _ = fs.sdf_value(x)
    b, _ = fs.sdf_value(x)
    assert np.array_equal(a.data, b.data)


def test_sdf_value_gradient_matches_fd():
    store, fs = small_field_setup(depth=2, width=2)
    x = np.array([[0.11, 0.52, -0.37], [-0.6, 0.1, 0.4]])

    def loss_fn():
        s, geom, _ = fs.sdf_value_batch(x)
        return dm.add(dm.tsum(dm.square(s)), dm.tmean(dm.square(geom)))

    err = dm.finite_difference_check(
        loss_fn, store, h=1e-5,
        params=[fs.fg_grid.corner_param, "sdf/w0", "sdf/b0", "sdf/w2", "sdf/b2"],
    )
    assert err < 1e-6


def test_injected_linear_field_gradient():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: xs[:, 0]
    g = fs.sdf_gradient(np.array([0.2, -0.1, 0.5]), eps=1e-3)
    np.testing.assert_allclose(g.data, [1.0, 0.0, 0.0], atol=1e-10)
    lap = fs.sdf_laplacian(np.array([0.2, -0.1, 0.5]), eps=1e-3)
    assert abs(lap.data) < 1e-9


def test_injected_sphere_field_gradient_and_laplacian():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: np.linalg.norm(xs, axis=1) - 0.5
    x = np.array([0.3, 0.0, 0.0])
    g = fs.sdf_gradient(x, eps=1e-4)
    np.testing.assert_allclose(g.data, [1.0, 0.0, 0.0], atol=1e-6)
    lap = fs.sdf_laplacian(x, eps=1e-4)
    assert lap.data == pytest.approx(2.0 / 0.3, rel=1e-4)


def test_injected_quadratic_laplacian():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: (xs**2).sum(axis=1)
    lap = fs.sdf_laplacian(np.array([0.1, 0.2, -0.3]), eps=1e-4)
    assert lap.data == pytest.approx(6.0, abs=1e-6)


def test_eikonal_residual_of_analytic_field():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: np.linalg.norm(xs - np.array([0.1, 0.0, -0.05]), axis=1) - 0.4
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.5, 0.5, size=(1000, 3))
    pts = pts[np.linalg.norm(pts - np.array([0.1, 0.0, -0.05]), axis=1) > 0.15]
    out = fs.sdf_with_derivatives(pts, eps=1e-4)
    norms = np.linalg.norm(out["grad"].data, axis=1)
    assert ((norms - 1.0) ** 2).max() < 1e-6


def test_fd_second_order_convergence():
    # decoder field evaluated inside one cell: smooth there, so the
    # stencil must converge at second order (Richardson)
    _, fs = small_field_setup(depth=2, seed=7)
    for name in ("sdf/w2",):
        fs.store.data(name)[...] *= 1000.0  # make the field non-trivial
    x = np.array([[0.125, 0.125, 0.125]])  # cell center, cell size 0.5
    g = {}
    for eps in (0.05, 0.025, 0.0125):
        out = fs.sdf_with_derivatives(x, eps=eps)
        g[eps] = (out["grad"].data[0].copy(), float(out["lap"].data[0]))
    d1 = np.linalg.norm(g[0.05][0] - g[0.025][0])
    d2 = np.linalg.norm(g[0.025][0] - g[0.0125][0])
    assert d1 / max(d2, 1e-300) > 2.5
    l1 = abs(g[0.05][1] - g[0.025][1])
    l2 = abs(g[0.025][1] - g[0.0125][1])
    assert l1 / max(l2, 1e-300) > 2.5


def test_stencil_skip_signal_in_pruned_region():
    _, fs = small_field_setup(depth=2)
    fs.fg_grid.prune(lambda c, s: c[:, 0] > 0)
    with pytest.raises(PrunedRegionError):
        fs.sdf_gradient(np.array([0.01, 0.3, 0.3]), eps=0.05)  # stencil crosses x=0


def test_color_zero_weights_constant_sigmoid_bias():
    store, fs = small_field_setup()
    for i in range(fs.color_mlp.n_layers):
        store.data(f"color/w{i}")[...] = 0.0
        store.data(f"color/b{i}")[...] = 0.0
    store.data(f"color/b{fs.color_mlp.n_layers - 1}")[...] = np.array([1.0, 0.0, -1.0])
    geom = dm.Tensor(np.random.default_rng(5).standard_normal((4, fs.geom_dim)))
    dirs = np.tile([0.0, 0.0, 1.0], (4, 1))
    normals = dm.Tensor(np.zeros((4, 3)))
    app = fs.appearance_rows([0, 1, 2, 0])
    rgb = fs.color(geom, dirs, normals, app)
    want = 1.0 / (1.0 + np.exp(-np.array([1.0, 0.0, -1.0])))
    np.testing.assert_allclose(rgb.data, np.tile(want, (4, 1)), atol=1e-12)


def test_color_appearance_dependence_and_determinism():
    _, fs = small_field_setup(seed=8)
    geom = dm.Tensor(np.ones((2, fs.geom_dim)) * 0.3)
    dirs = np.tile([0.0, 0.0, 1.0], (2, 1))
    normals = dm.Tensor(np.tile([0.0, 0.0, -1.0], (2, 1)))
    a01 = fs.color(geom, dirs, normals, fs.appearance_rows([0, 1])).data
    a00 = fs.color(geom, dirs, normals, fs.appearance_rows([0, 0])).data
    assert np.array_equal(a00[0], a00[1])
    assert not np.array_equal(a01[0], a01[1])
    assert a01.min() >= 0.0 and a01.max() <= 1.0


def test_color_gradient_wrt_appearance_matches_fd():
    store, fs = small_field_setup(seed=9)
    geom_arr = np.random.default_rng(10).standard_normal((3, fs.geom_dim))
    dirs = np.tile([0.0, 1.0, 0.0], (3, 1))
    normals_arr = np.tile([1.0, 0.0, 0.0], (3, 1))

    def loss_fn():
        rgb = fs.color(dm.Tensor(geom_arr), dirs, dm.Tensor(normals_arr),
                       fs.appearance_rows([0, 2, 1]))
        return dm.tmean(dm.square(rgb))

    assert dm.finite_difference_check(loss_fn, store, h=1e-5,
                                      params=["appearance/table"]) < 1e-6


def test_background_density_nonnegative_and_constant_when_zero():
    store, fs = small_field_setup(seed=11)
    rng = np.random.default_rng(12)
    dirs = rng.standard_normal((10000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs = dirs * (1.0 + 10.0 ** rng.uniform(-3, 3, 10000))[:, None]
    app = fs.appearance_rows(np.zeros(10000, dtype=int))
    rgb, sigma = fs.background_radiance(xs, dirs, app)
    assert sigma.data.min() >= 0.0
    assert rgb.data.min() >= 0.0 and rgb.data.max() <= 1.0
    # zero weights -> constant output
    for i in range(fs.bg_mlp.n_layers):
        store.data(f"background/w{i}")[...] = 0.0
        store.data(f"background/b{i}")[...] = 0.0
    rgb2, sigma2 = fs.background_radiance(xs[:50], dirs[:50], fs.appearance_rows(np.zeros(50, int)))
    assert np.ptp(rgb2.data, axis=0).max() == 0.0
    np.testing.assert_allclose(sigma2.data, np.log(2.0), atol=1e-12)


def test_background_contract_then_query_identity():
    from sdfview import geometry_grid as gg

    _, fs = small_field_setup(seed=13)
    rng = np.random.default_rng(14)
    dirs = rng.standard_normal((20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    xs = dirs * 3.0
    app = fs.appearance_rows(np.zeros(20, int))
    rgb_a, sig_a = fs.background_radiance(xs, dirs, app)
    rgb_b, sig_b = fs.background_radiance_contracted(gg.contract_batch(xs), dirs, app)
    assert np.array_equal(rgb_a.data, rgb_b.data)
    assert np.array_equal(sig_a.data, sig_b.data)


def test_deviation_reparameterization():
    store, fs = small_field_setup()
    store.data("deviation/raw")[...] = 0.0
    assert fs.deviation().item() == pytest.approx(np.log(2.0), abs=1e-12)
    store.data("deviation/raw")[...] = 50.0
    assert fs.deviation().item() == pytest.approx(50.0, abs=1e-12)
    store.zero_grads()
    s_vals = dm.Tensor(np.array([0.3, -0.2]))
    dm.backward(dm.tmean(dm.sigmoid(dm.mul(fs.deviation(), s_vals))))
    assert abs(store.get("deviation/raw").grad) > 0


def test_permutation_stability():
    _, fs = small_field_setup(seed=15)
    pts = np.random.default_rng(16).uniform(-0.9, 0.9, (64, 3))
    perm = np.random.default_rng(17).permutation(64)
    a = fs.sdf_value_batch(pts)[0].data
    b = fs.sdf_value_batch(pts[perm])[0].data
    assert np.array_equal(a[perm], b)


def test_extract_mesh_sphere_area():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: np.linalg.norm(xs, axis=1) - 0.5
    verts, faces = fl.extract_mesh(fs, resolution=64)
    area = fl.mesh_area(verts, faces)
    assert area == pytest.approx(4.0 * np.pi * 0.25, rel=0.02)
    # vertex residuals below lattice cell size
    resid = np.abs(np.linalg.norm(verts, axis=1) - 0.5)
    assert resid.max() < 2.0 / 64


def test_extract_mesh_empty_for_positive_field():
    _, fs = small_field_setup()
    fs.sdf_override = lambda xs: np.full(len(xs), 0.7)
    verts, faces = fl.extract_mesh(fs, resolution=16)
    assert len(verts) == 0 and len(faces) == 0


def test_save_obj_roundtrips(tmp_path):
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2]])
    path = tmp_path / "tri.obj"
    fl.save_obj(path, verts, faces)
    lines = path.read_text().strip().splitlines()
    assert lines[1].startswith("v ") and lines[-1] == "f 1 2 3"
