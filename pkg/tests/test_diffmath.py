import math

import numpy as np
import pytest

from sdfview import diffmath as dm
from sdfview.errors import ConfigurationError, UsageError


def loop_mlp_forward(store, mlp, x):
    """Independent oracle: forward as plain Python loops."""
    h = [float(v) for v in x]
    for i in range(mlp.n_layers):
        w = store.data(f"{mlp.name}/w{i}")
        b = store.data(f"{mlp.name}/b{i}")
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for k in range(w.shape[0]):
                acc += h[k] * w[k, j]
            out.append(acc)
        act = mlp.activations[i]
        if act == "relu":
            out = [max(0.0, v) for v in out]
        elif act == "softplus":
            out = [math.log1p(math.exp(v)) for v in out]
        elif act == "sigmoid":
            out = [1.0 / (1.0 + math.exp(-v)) for v in out]
        h = out
    return np.array(h)


def test_identity_linear_net():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [3, 3], ["none"], np.random.default_rng(0))
    store.set_data("net/w0", np.eye(3))
    out = mlp.forward(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_zero_weight_net_returns_bias():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [4, 2], ["none"], np.random.default_rng(0))
    store.set_data("net/w0", np.zeros((4, 2)))
    store.set_data("net/b0", np.array([0.3, -0.7]))
    out = mlp.forward(np.random.default_rng(1).standard_normal((5, 4)))
    np.testing.assert_array_equal(out.data, np.tile([0.3, -0.7], (5, 1)))


def test_forward_matches_loop_oracle():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [2, 16, 16, 1], ["softplus", "softplus", "none"],
                 np.random.default_rng(42))
    x = np.array([0.37, -1.2])
    got = mlp.forward(x[None, :]).data[0]
    want = loop_mlp_forward(store, mlp, x)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_forward_width_mismatch():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [3, 2], ["none"], np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        mlp.forward(np.zeros((4, 5)))


def test_backward_square():
    store = dm.ParameterStore()
    theta = store.register("theta", np.array(3.0))
    loss = dm.square(theta)
    dm.backward(loss)
    assert theta.grad == pytest.approx(6.0, abs=0)


def test_backward_sigmoid_at_zero():
    store = dm.ParameterStore()
    theta = store.register("theta", np.array(0.0))
    dm.backward(dm.sigmoid(theta))
    assert theta.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_without_forward_raises():
    store = dm.ParameterStore()
    theta = store.register("theta", np.array(1.0))
    with pytest.raises(UsageError):
        dm.backward(theta)
    with pytest.raises(UsageError):
        dm.backward(dm.Tensor(np.array(2.0)))


def test_mlp_l1_loss_gradients_match_fd():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [3, 8, 8, 2], ["softplus", "softplus", "none"],
                 np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal((5, 3))
    target = np.random.default_rng(9).standard_normal((5, 2))

    def loss_fn():
        return dm.tmean(dm.absolute(mlp.forward(x) - target))

    err = dm.finite_difference_check(loss_fn, store, h=1e-5)
    assert err < 1e-6


def test_fd_check_linear_is_exact():
    store = dm.ParameterStore()
    store.register("a", np.array([1.0, -2.0, 0.5]))

    def loss_fn():
        return dm.tsum(dm.mul(store.get("a"), np.array([2.0, 3.0, -1.0])))

    assert dm.finite_difference_check(loss_fn, store, h=1e-5) < 1e-9


def test_fd_check_quadratic():
    store = dm.ParameterStore()
    store.register("a", np.array([0.3, 1.7]))

    def loss_fn():
        return dm.tsum(dm.square(store.get("a")))

    assert dm.finite_difference_check(loss_fn, store, h=1e-5) < 1e-8


def test_forward_is_deterministic():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [4, 16, 3], ["relu", "sigmoid"], np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((11, 4))
    a = mlp.forward(x).data
    b = mlp.forward(x).data
    assert np.array_equal(a, b)


def test_gradient_accumulation_additive():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [2, 6, 1], ["softplus", "none"], np.random.default_rng(5))
    x1 = np.random.default_rng(6).standard_normal((4, 2))
    x2 = np.random.default_rng(7).standard_normal((4, 2))

    def l1():
        return dm.tmean(dm.square(mlp.forward(x1)))

    def l2():
        return dm.tmean(dm.absolute(mlp.forward(x2)))

    store.zero_grads()
    dm.backward(l1())
    g1 = {n: store.get(n).grad.copy() for n in store.trainable_names()}
    store.zero_grads()
    dm.backward(l2())
    g2 = {n: store.get(n).grad.copy() for n in store.trainable_names()}
    store.zero_grads()
    dm.backward(dm.add(l1(), l2()))
    for n in store.trainable_names():
        assert np.array_equal(store.get(n).grad, g1[n] + g2[n]), n


def test_matmul_and_gather_gradients():
    store = dm.ParameterStore()
    table = store.register("table", np.random.default_rng(0).standard_normal((7, 3)))
    idx = np.array([0, 3, 3, 6, 1])

    def loss_fn():
        return dm.tsum(dm.square(dm.gather_rows(store.get("table"), idx)))

    assert dm.finite_difference_check(loss_fn, store, h=1e-6) < 1e-7
    store.zero_grads()
    dm.backward(loss_fn())
    # row 3 used twice: gradient must accumulate both contributions
    assert np.allclose(table.grad[3], 4.0 * table.data[3])


def test_trilinear_gather_matches_manual():
    rng = np.random.default_rng(11)
    store = dm.ParameterStore()
    table = store.register("t", rng.standard_normal((20, 4)))
    idx = rng.integers(0, 20, size=(9, 8))
    w = rng.random((9, 8))
    out = dm.trilinear_gather(store.get("t"), idx, w)
    want = np.einsum("nkf,nk->nf", table.data[idx], w)
    np.testing.assert_allclose(out.data, want, atol=1e-14)

    def loss_fn():
        return dm.tsum(dm.square(dm.trilinear_gather(store.get("t"), idx, w)))

    assert dm.finite_difference_check(loss_fn, store, h=1e-6) < 1e-7


def test_exclusive_cumprod_forward_backward():
    rng = np.random.default_rng(2)
    store = dm.ParameterStore()
    a = store.register("a", rng.random((3, 6)))
    out = dm.exclusive_cumprod(store.get("a"))
    want = np.ones((3, 6))
    for i in range(1, 6):
        want[:, i] = want[:, i - 1] * a.data[:, i - 1]
    np.testing.assert_allclose(out.data, want, atol=1e-15)

    def loss_fn():
        return dm.tsum(dm.mul(dm.exclusive_cumprod(store.get("a")),
                              np.arange(18.0).reshape(3, 6)))

    assert dm.finite_difference_check(loss_fn, store, h=1e-6) < 1e-7


def test_exclusive_cumprod_backward_with_zeros():
    store = dm.ParameterStore()
    store.register("a", np.array([[0.5, 0.0, 0.7, 0.2]]))

    def loss_fn():
        return dm.tsum(dm.mul(dm.exclusive_cumprod(store.get("a")),
                              np.array([[1.0, 2.0, 3.0, 4.0]])))

    assert dm.finite_difference_check(loss_fn, store, h=1e-7) < 1e-6


def test_lipschitz_mlp_bound_and_rescale():
    store = dm.ParameterStore()
    mlp = dm.Mlp(store, "net", [3, 8, 8, 2], ["relu", "relu", "none"],
                 np.random.default_rng(1), lipschitz=True)
    for i in range(3):
        store.set_data(f"net/c{i}", np.array(0.0))
    bound = mlp.lipschitz_bound()
    assert bound.item() == pytest.approx(math.log(2.0) ** 3, rel=1e-12)
    # rows of the effective operator obey the bound
    x = np.random.default_rng(2).standard_normal((6, 3))
    y = mlp.forward(x)
    assert np.all(np.isfinite(y.data))

    def loss_fn():
        return dm.tmean(dm.square(mlp.forward(x)))

    assert dm.finite_difference_check(loss_fn, store, h=1e-6) < 1e-6


def test_no_grad_blocks_graph():
    store = dm.ParameterStore()
    theta = store.register("theta", np.array(2.0))
    with dm.no_grad():
        y = dm.square(theta)
    assert not y.requires_grad
    with pytest.raises(UsageError):
        dm.backward(y)
