import numpy as np
import pytest

from sdfview import diffmath as dm
from sdfview import fields as fl
from sdfview import geometry_grid as gg


def small_field_setup(depth=3, width=4, n_images=3, seed=0, **fs_kw):
    store = dm.ParameterStore()
    rng = np.random.default_rng(seed)
    fg = gg.build(depth, width, store, name="fg_grid", rng=rng)
    bg = gg.build(2, width, store, name="bg_grid", bounds=(-2.0, 2.0), rng=rng)
    kw = dict(geom_dim=4, appearance_dim=3, dir_freqs=2,
              sdf_hidden=(16, 16), color_hidden=(16,), bg_hidden=(16,))
    kw.update(fs_kw)
    fs = fl.FieldSet(store, fg, bg, n_images=n_images, rng=rng, **kw)
    return store, fs


def adam_fit(store, loss_fn, steps, lr=1e-2, params=None):
    """Minimal Adam loop used by tests that need a fitted field."""
    names = params if params is not None else store.trainable_names()
    m = {n: np.zeros_like(store.data(n)) for n in names}
    v = {n: np.zeros_like(store.data(n)) for n in names}
    last = None
    for t in range(1, steps + 1):
        store.zero_grads()
        loss = loss_fn(t)
        dm.backward(loss)
        last = loss.item()
        for n in names:
            g = store.get(n).grad
            m[n] = 0.9 * m[n] + 0.1 * g
            v[n] = 0.999 * v[n] + 0.001 * g * g
            mhat = m[n] / (1 - 0.9**t)
            vhat = v[n] / (1 - 0.999**t)
            store.data(n)[...] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
    return last


def mixed_ball_points(rng, n, extent=0.95):
    """Half uniform in the cube, half radius-uniform (dense near center)."""
    half = n // 2
    cube = rng.uniform(-extent, extent, size=(half, 3))
    dirs = rng.standard_normal((n - half, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ball = dirs * rng.uniform(0.0, extent, (n - half, 1))
    return np.concatenate([cube, ball])


@pytest.fixture
def sphere_fitted_field():
    """FieldSet trained so the SDF approximates ||x|| - 0.5."""
    store, fs = small_field_setup(depth=3, width=4, seed=1)
    rng = np.random.default_rng(2)

    def loss_fn(t):
        pts = mixed_ball_points(rng, 512)
        s, _, _ = fs.sdf_value_batch(pts)
        target = np.linalg.norm(pts, axis=1) - 0.5
        return dm.tmean(dm.square(dm.sub(s, target)))

    final = adam_fit(store, loss_fn, steps=400, lr=1e-2)
    assert final < 1e-3
    return store, fs
