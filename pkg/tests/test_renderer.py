import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfview import diffmath as dm
from sdfview import renderer as rd
from sdfview.errors import DomainError, ValidationError

from conftest import small_field_setup


def look_at_camera(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                   fx=60.0, size=48):
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    c = (size - 1) / 2.0
    return rd.Camera(fx=fx, fy=fx, cx=c, cy=c, rotation=rot,
                     translation=position, width=size, height=size)


def test_camera_rejects_non_orthonormal():
    with pytest.raises(ValidationError):
        rd.Camera(fx=1, fy=1, cx=0, cy=0, rotation=np.eye(3) * 1.001,
                  translation=np.zeros(3), width=2, height=2)


def test_principal_ray_is_forward_axis():
    cam = look_at_camera([0.0, -2.5, 0.8])
    o, d = rd.generate_rays(cam, np.array([[cam.cx, cam.cy]]))
    np.testing.assert_allclose(d[0], cam.forward, atol=1e-12)
    np.testing.assert_allclose(o[0], cam.translation, atol=0)


def test_pinhole_offset_pixel_direction():
    cam = rd.Camera(fx=50.0, fy=50.0, cx=25.0, cy=25.0, rotation=np.eye(3),
                    translation=np.zeros(3), width=100, height=100)
    _, d = rd.generate_rays(cam, np.array([[75.0, 25.0]]))  # cx + fx
    np.testing.assert_allclose(d[0], np.array([1.0, 0.0, 1.0]) / np.sqrt(2), atol=1e-12)


def test_rays_unit_norm():
    cam = look_at_camera([1.5, -2.0, 1.0])
    px = np.stack(np.meshgrid(np.arange(48), np.arange(48)), -1).reshape(-1, 2)
    _, d = rd.generate_rays(cam, px)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def test_generate_rays_out_of_image():
    cam = look_at_camera([0, -2, 0])
    with pytest.raises(DomainError):
        rd.generate_rays(cam, np.array([[48.0, 0.0]]))


def test_sample_ray_chord_through_center():
    _, fs = small_field_setup()
    origin = np.array([0.0, -3.0, 0.0])
    direction = np.array([0.0, 1.0, 0.0])
    batch = rd.sample_ray(origin, direction, 64, fs.fg_grid, fd_eps=1e-3)
    assert batch.n > 0
    tn, tf, hit = rd.ray_sphere_span(origin[None], direction[None])
    assert hit[0] and (tf[0] - tn[0]) == pytest.approx(2.0, abs=1e-12)
    assert np.all(np.diff(batch.t) > 0)
    assert np.all(np.linalg.norm(batch.x, axis=1) <= 1.0 + 1e-9)


def test_sample_ray_miss_gives_empty_batch():
    _, fs = small_field_setup()
    batch = rd.sample_ray(np.array([0.0, -3.0, 2.5]), np.array([0.0, 1.0, 0.0]),
                          32, fs.fg_grid)
    assert batch.n == 0


def test_sample_ray_respects_pruning():
    _, fs = small_field_setup(depth=3)
    grid = fs.fg_grid
    shell = lambda c, s: np.abs(np.linalg.norm(c, axis=1) - 0.5) < 0.25
    grid.prune(shell)
    batch = rd.sample_ray(np.array([0.0, -3.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                          128, grid, fd_eps=1e-6)
    assert batch.n > 0
    # every surviving sample sits in a kept cell
    centers = grid.lo + (grid.cell_index(batch.x) + 0.5) * grid.cell_size
    assert shell(centers, grid.cell_size).all()


def test_alpha_zero_for_equal_sdf():
    a = rd.compute_alpha(0.37, 0.37, np.zeros(3), np.array([0, 0, 1.0]), 0.1, 10.0)
    assert a.item() == 0.0


def test_alpha_symmetric_crossing():
    a = rd.compute_alpha(1.0, -1.0, np.zeros(3), np.array([0, 0, 1.0]), 0.1, 10.0)
    expit = lambda z: 1.0 / (1.0 + np.exp(-z))
    assert a.item() == pytest.approx(expit(10.0) - expit(-10.0), abs=1e-12)
    assert a.item() == pytest.approx(0.9999, abs=1e-3)


def test_alpha_clamped_when_sdf_increases():
    a = rd.compute_alpha(-0.5, 0.5, np.zeros(3), np.array([0, 0, 1.0]), 0.2, 5.0)
    assert a.item() == 0.0


def test_composite_weights_basic():
    w, t = rd.composite_weights(np.array([1.0, 0.7, 0.3]))
    np.testing.assert_allclose(w.data, [1.0, 0.0, 0.0], atol=0)
    w, _ = rd.composite_weights(np.array([0.5, 0.5]))
    np.testing.assert_allclose(w.data, [0.5, 0.25], atol=0)
    assert w.data.sum() == pytest.approx(1 - 0.25, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=64))
def test_compositing_identity_property(alphas):
    a = np.array(alphas)
    w, t = rd.composite_weights(a)
    assert abs(w.data.sum() + np.prod(1 - a) - 1.0) < 1e-12
    assert (w.data >= 0).all()
    assert (t.data > 0).all() or (1 - a == 0).any()
    assert np.all(np.diff(t.data) <= 1e-15)


def test_compositing_split_associativity():
    rng = np.random.default_rng(0)
    a = rng.random(40)
    w_all, _ = rd.composite_weights(a)
    w_a, _ = rd.composite_weights(a[:17])
    w_b, _ = rd.composite_weights(a[17:])
    t_mid = np.prod(1 - a[:17])
    recombined = np.concatenate([w_a.data, t_mid * w_b.data])
    np.testing.assert_allclose(w_all.data, recombined, atol=1e-15)


def test_weight_concentration_with_zeta():
    # fixed ray crossing a zero level set: higher zeta -> lower weight entropy
    s = np.linspace(0.5, -0.5, 33)  # crossing mid-way
    dt = np.full(32, 1.0 / 32)
    ent = []
    for zeta in (10.0, 100.0):
        a = rd.compute_alpha(s[:-1], s[1:], np.zeros((32, 3)), np.array([0, 0, 1.0]),
                             dt, zeta)
        w, _ = rd.composite_weights(a.data)
        p = w.data / w.data.sum()
        p = p[p > 0]
        ent.append(-(p * np.log(p)).sum())
    assert ent[1] < ent[0]


def test_render_ray_empty_batch_is_background():
    _, fs = small_field_setup(seed=21)
    out = rd.render_ray(fs, np.array([0.0, -3.0, 2.5]), np.array([0.0, 1.0, 0.0]), 0,
                        n_fg=16, n_bg=8)
    assert out.acc == 0.0
    assert out.e_grad == 0.0 and out.e_curv == 0.0
    assert np.all(out.rgb >= 0) and np.all(out.rgb <= 1)


def test_render_ray_black_background_zero_alpha():
    store, fs = small_field_setup(seed=22)
    # force foreground far from surface: big positive SDF via override
    fs.sdf_override = lambda xs: np.full(len(xs), 2.0)
    # black background: zero weights, large negative rgb bias, zero density bias
    for i in range(fs.bg_mlp.n_layers):
        store.data(f"background/w{i}")[...] = 0.0
        store.data(f"background/b{i}")[...] = 0.0
    store.data(f"background/b{fs.bg_mlp.n_layers - 1}")[...] = np.array([-20.0, -20.0, -20.0, 5.0])
    out = rd.render_ray(fs, np.array([0.0, -3.0, 0.0]), np.array([0.0, 1.0, 0.0]), 0)
    assert out.acc < 1e-6
    np.testing.assert_allclose(out.rgb, 0.0, atol=1e-6)


def test_render_depth_matches_analytic_sphere():
    _, fs = small_field_setup(seed=23)
    radius = 0.5
    fs.sdf_override = lambda xs: np.linalg.norm(xs, axis=1) - radius
    fs.store.data("deviation/raw")[...] = 2000.0  # drive zeta large
    origin = np.array([0.0, -2.5, 0.0])
    direction = np.array([0.0, 1.0, 0.0])
    n_fg = 64
    out = rd.render_ray(fs, origin, direction, 0, n_fg=n_fg)
    t_hit = 2.5 - radius
    spacing = 2.0 / n_fg  # chord length / samples
    assert abs(out.depth - t_hit) < 0.5 * spacing
    assert out.acc > 0.99


def test_render_image_is_chunk_and_thread_invariant():
    _, fs = small_field_setup(seed=24)
    cam = look_at_camera([0.0, -2.2, 0.9], size=8, fx=10.0)
    im1 = rd.render_image(fs, cam, 0, n_fg=16, n_bg=8, chunk=64, threads=1)
    im2 = rd.render_image(fs, cam, 0, n_fg=16, n_bg=8, chunk=16, threads=2)
    for key in ("rgb", "acc", "depth", "e_grad", "e_curv"):
        assert np.array_equal(im1[key], im2[key]), key


def test_render_image_matches_render_ray():
    _, fs = small_field_setup(seed=25)
    cam = look_at_camera([0.0, -2.2, 0.5], size=2, fx=2.0)
    im = rd.render_image(fs, cam, 0, n_fg=16, n_bg=8)
    for v in range(2):
        for u in range(2):
            o, d = rd.generate_rays(cam, np.array([[u, v]]))
            single = rd.render_ray(fs, o[0], d[0], 0, n_fg=16, n_bg=8)
            np.testing.assert_allclose(im["rgb"][v, u], single.rgb, atol=1e-12)
