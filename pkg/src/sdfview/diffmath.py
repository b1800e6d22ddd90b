"""Differentiable-computation substrate.

A small reverse-mode tape over float64 numpy arrays: enough to express
dense MLP decoders, trilinear feature gathers, and the compositing /
loss arithmetic of the rest of the package. Not a general tensor
library; broadcasting support is limited to what dense MLPs need.

Determinism matters here: forward is purely functional given parameter
values, and backward accumulates gradients in reverse creation order of
the (deterministically constructed) graph, so repeated runs are
bit-identical.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NumericError, UsageError

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (cheaper inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g to `shape` by summing over broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * data / b.data, b.data.shape))

    return _make(data, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to `a` (subgradient pick)."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)

    def bw(g):
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return _make(data, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)

    def bw(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return _make(data, (a, b), bw)


# -- transcendental --------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _make(data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bw(g):
        a._accumulate(g * expit(a.data))

    return _make(data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)

    def bw(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bw)


# -- shape / reduction ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bw)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), bw)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, ts, bw)


def cols(a, lo: int, hi: int) -> Tensor:
    """Column slice [:, lo:hi] of a 2-D tensor."""
    a = as_tensor(a)
    data = a.data[:, lo:hi]

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        a._accumulate(full)

    return _make(data.copy(), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def gather_rows(table, idx) -> Tensor:
    """Rows table[idx] of a 2-D table; backward scatter-adds per row."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    data = table.data[idx]

    def bw(g):
        acc = np.zeros_like(table.data)
        ncols = table.data.shape[1]
        flat_idx = (idx[:, None] * ncols + np.arange(ncols)).ravel()
        acc += np.bincount(
            flat_idx, weights=g.reshape(-1), minlength=acc.size
        ).reshape(acc.shape)
        table._accumulate(acc)

    return _make(data, (table,), bw)


def trilinear_gather(table, idx, weights) -> Tensor:
    """Weighted corner gather: out[n] = sum_k weights[n,k] * table[idx[n,k]].

    `table` is (C, F), `idx` is (N, 8), `weights` is (N, 8) (Tensor when
    position gradients are wanted, plain array otherwise).
    """
    table = as_tensor(table)
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    idx = np.asarray(idx, dtype=np.intp)
    gathered = table.data[idx]  # (N, 8, F)
    data = np.einsum("nkf,nk->nf", gathered, w.data, optimize=True)

    def bw(g):
        if table.requires_grad:
            contrib = w.data[:, :, None] * g[:, None, :]  # (N, 8, F)
            ncols = table.data.shape[1]
            flat_idx = (idx[:, :, None] * ncols + np.arange(ncols)).ravel()
            acc = np.bincount(
                flat_idx, weights=contrib.ravel(), minlength=table.data.size
            ).reshape(table.data.shape)
            table._accumulate(acc)
        if w.requires_grad:
            w._accumulate(np.einsum("nkf,nf->nk", gathered, g, optimize=True))

    return _make(data, (table, w), bw)


def scatter_to(src, dst_idx, n_rows: int) -> Tensor:
    """Place rows of src (M, k) at positions dst_idx of a zero (n_rows, k) array.

    Indices must be unique (packing layout, not accumulation).
    """
    src = as_tensor(src)
    dst_idx = np.asarray(dst_idx, dtype=np.intp)
    data = np.zeros((n_rows, src.data.shape[1]))
    data[dst_idx] = src.data

    def bw(g):
        src._accumulate(g[dst_idx])

    return _make(data, (src,), bw)


def segment_sum(src, seg_ids, n_segments: int) -> Tensor:
    """Per-segment sums of a vector: out[s] = sum over i with seg_ids[i]==s."""
    src = as_tensor(src)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    data = np.bincount(seg_ids, weights=src.data, minlength=n_segments)

    def bw(g):
        src._accumulate(g[seg_ids])

    return _make(data, (src,), bw)


def exclusive_cumprod(a) -> Tensor:
    """T[:, i] = prod_{j<i} a[:, j] along axis 1 (T[:, 0] = 1).

    Backward uses the suffix recurrence, which stays exact when entries
    are zero (no division by a).
    """
    a = as_tensor(a)
    n = a.data.shape[1]
    data = np.ones_like(a.data)
    if n > 1:
        np.cumprod(a.data[:, :-1], axis=1, out=data[:, 1:])

    def bw(g):
        # dL/da[:,k] = data[:,k] * R_k, R_k = sum_{i>k} g_i * prod_{k<j<i} a_j
        grad = np.zeros_like(a.data)
        r = np.zeros(a.data.shape[0])
        for k in range(n - 2, -1, -1):
            r = g[:, k + 1] + a.data[:, k + 1] * r
            grad[:, k] = data[:, k] * r
        a._accumulate(grad)

    return _make(data, (a,), bw)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- backward ---------------------------------------------------------


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar; accumulates into leaf .grad buffers."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward requires a scalar Tensor")
    if not loss.requires_grad or loss._backward is None and not loss._parents:
        raise UsageError("backward called on a tensor with no recorded forward graph")
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss: {float(loss.data)}")

    # Iterative post-order topological sort (deterministic: order depends
    # only on graph structure).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior activations are not needed after their pass
                node.grad = None


# -- parameters --------------------------------------------------------


class ParameterStore:
    """Named registry of learnable tensors.

    Each parameter is a persistent leaf Tensor; `fresh_leaves` hands out
    per-worker views (shared data, private grad buffers) so chunked
    forward/backward passes never race on gradient accumulation.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, init: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"parameter {name!r} already registered")
        t = Tensor(np.array(init, dtype=np.float64), requires_grad=trainable)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"unknown parameter {name!r}") from None

    def data(self, name: str) -> np.ndarray:
        return self.get(name).data

    def set_data(self, name: str, value: np.ndarray):
        t = self.get(name)
        if t.data.shape != np.shape(value):
            raise ConfigurationError(
                f"shape mismatch for {name!r}: {t.data.shape} vs {np.shape(value)}"
            )
        t.data[...] = value

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, tr in self._trainable.items() if tr]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def fresh_leaves(self, trainable_only: set[str] | None = None) -> dict[str, Tensor]:
        """Thread-private leaves sharing this store's data arrays.

        If `trainable_only` is given, only those names get requires_grad;
        everything else is treated as constant (cheaper backward).
        """
        out = {}
        for name, t in self._params.items():
            want = self._trainable[name] if trainable_only is None else name in trainable_only
            leaf = Tensor(np.empty(0))
            leaf.data = t.data  # share, do not copy
            leaf.requires_grad = want
            out[name] = leaf
        return out

    def accumulate_grads(self, grads: dict[str, np.ndarray]):
        """Fixed-order reduction of per-worker gradient dicts."""
        for name in self._params:
            g = grads.get(name)
            if g is not None:
                t = self._params[name]
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


# -- dense MLPs ---------------------------------------------------------

_ACTIVATIONS = {
    "none": lambda t: t,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
}


class Mlp:
    """Dense multi-layer perceptron with parameters held in a ParameterStore.

    `widths` gives [in, h1, ..., out]; `activations` one entry per layer.
    With `lipschitz=True` every layer carries a learnable bound c and its
    weight rows are rescaled during forward so each row 1-norm stays at
    or below softplus(c), following the per-layer Lipschitz scheme used
    for smooth color networks.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        widths: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        final_scale: float = 1.0,
        lipschitz: bool = False,
    ):
        if len(widths) < 2:
            raise ConfigurationError("Mlp needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"non-positive layer width in {list(widths)}")
        if len(activations) != len(widths) - 1:
            raise ConfigurationError(
                f"need {len(widths) - 1} activations, got {len(activations)}"
            )
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        self.store = store
        self.name = name
        self.widths = list(widths)
        self.activations = list(activations)
        self.lipschitz = lipschitz
        self.n_layers = len(widths) - 1
        for i in range(self.n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == self.n_layers - 1:
                w *= final_scale
            store.register(f"{name}/w{i}", w)
            store.register(f"{name}/b{i}", np.zeros(fan_out))
            if lipschitz:
                # start slack: bound above initial per-output-unit row norms
                row_norm = float(np.abs(w).sum(axis=0).max())
                init_c = _inverse_softplus(max(1.0, 2.0 * max(row_norm, 1e-3)))
                store.register(f"{name}/c{i}", np.array(init_c))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def weight_names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out.append(f"{self.name}/w{i}")
            out.append(f"{self.name}/b{i}")
            if self.lipschitz:
                out.append(f"{self.name}/c{i}")
        return out

    def _layer_weight(self, i: int, leaves: dict[str, Tensor] | None) -> Tensor:
        src = leaves if leaves is not None else self.store._params
        return src[f"{self.name}/w{i}"]

    def _layer(self, i: int, leaves: dict[str, Tensor] | None, kind: str) -> Tensor:
        src = leaves if leaves is not None else self.store._params
        return src[f"{self.name}/{kind}{i}"]

    def forward(self, x, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Evaluate on a batch (N, in_width) -> (N, out_width)."""
        t = as_tensor(x)
        if t.data.ndim != 2 or t.data.shape[1] != self.in_width:
            raise ConfigurationError(
                f"{self.name}: expected input (N, {self.in_width}), got {t.data.shape}"
            )
        for i in range(self.n_layers):
            w = self._layer(i, leaves, "w")
            b = self._layer(i, leaves, "b")
            if self.lipschitz:
                c = self._layer(i, leaves, "c")
                # rows of the (out x in) operator = columns of stored (in x out) w
                row_norm = tsum(absolute(w), axis=0, keepdims=True)  # (1, out)
                scale = minimum(div(softplus(c), maximum(row_norm, 1e-12)), 1.0)
                w = mul(w, scale)
            t = add(matmul(t, w), b)
            t = _ACTIVATIONS[self.activations[i]](t)
        return t

    def lipschitz_bound(self, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Product over layers of softplus(c_i)."""
        if not self.lipschitz:
            raise UsageError(f"{self.name} was built without Lipschitz bounds")
        out = None
        for i in range(self.n_layers):
            term = softplus(self._layer(i, leaves, "c"))
            out = term if out is None else mul(out, term)
        return out


def _inverse_softplus(y: float) -> float:
    # inverse of log(1 + e^x); stable for y not tiny
    return float(y + math.log(-math.expm1(-y)))


# -- finite-difference oracle -------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    h: float = 1e-5,
    params: Iterable[str] | None = None,
) -> float:
    """Max over parameter entries of |analytic - central FD| / max(1, |FD|).

    `loss_fn` must rebuild its graph from the store's persistent leaves on
    every call; this routine perturbs parameter data in place.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    names = list(params) if params is not None else store.trainable_names()

    store.zero_grads()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")
    backward(loss)
    analytic = {n: store.get(n).grad.copy() for n in names}

    worst = 0.0
    for name in names:
        data = store.data(name)
        flat = data.reshape(-1)
        an = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                fp = float(loss_fn().data)
            flat[j] = orig - h
            with no_grad():
                fm = float(loss_fn().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while probing {name}[{j}]")
            fd = (fp - fm) / (2.0 * h)
            err = abs(an[j] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
