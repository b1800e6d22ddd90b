"""Sparse octree feature volumes and background coordinate contraction.

Two grids back the scene: a foreground octree over the unit cube whose
leaves carry shared corner feature vectors (queried with trilinear
interpolation) and a background octree over the contracted outer shell.
Corners live on a global lattice keyed by integer coordinates, so
adjacent cells reference the same parameters and the feature field is
C0-continuous across faces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParameterStore, Tensor
from .errors import ConfigurationError, DomainError, PrunedRegionError


class OctreeFeatureGrid:
    """Dense-at-build octree of depth D over a cube, prunable afterwards.

    Leaves are the cells of the level-D lattice (resolution 2^D per
    axis). `active[ℓ]` holds one boolean array per level; a node exists
    only while it has at least one active descendant leaf. All corner
    features of the full lattice are registered up front as a single
    (n_corners, F) parameter; pruning only unlinks cells, parameters are
    never unregistered.
    """

    def __init__(
        self,
        depth: int,
        feature_width: int,
        store: ParameterStore,
        name: str = "fg_grid",
        bounds: tuple[float, float] = (-1.0, 1.0),
        init_scale: float = 1e-2,
        rng: np.random.Generator | None = None,
    ):
        if depth < 1:
            raise ConfigurationError("octree depth must be >= 1")
        if feature_width < 1:
            raise ConfigurationError("feature width must be >= 1")
        self.depth = depth
        self.feature_width = feature_width
        self.store = store
        self.name = name
        self.lo, self.hi = float(bounds[0]), float(bounds[1])
        self.res = 2**depth
        self.cell_size = (self.hi - self.lo) / self.res
        self.corner_param = f"{name}/corners"
        rng = rng if rng is not None else np.random.default_rng(0)
        n_corners = (self.res + 1) ** 3
        store.register(
            self.corner_param,
            rng.uniform(-init_scale, init_scale, size=(n_corners, feature_width)),
        )
        # per-level activity, level 0 (root) .. level depth (leaves)
        self.active = [np.ones((2**lvl,) * 3, dtype=bool) for lvl in range(depth + 1)]
        # sign of the field recorded when a cell was pruned (+1/-1, 0 unknown)
        self.pruned_sign = np.zeros((self.res,) * 3, dtype=np.int8)

    # -- structure ---------------------------------------------------

    @property
    def leaf_active(self) -> np.ndarray:
        return self.active[self.depth]

    def n_active_leaves(self) -> int:
        return int(self.leaf_active.sum())

    def leaf_centers(self) -> np.ndarray:
        """(n_active, 3) world-space centers of active leaves."""
        idx = np.argwhere(self.leaf_active)
        return self.lo + (idx + 0.5) * self.cell_size

    def cell_index(self, xs: np.ndarray) -> np.ndarray:
        """Integer leaf coordinates for points inside bounds."""
        ijk = np.floor((xs - self.lo) / self.cell_size).astype(np.int64)
        return np.clip(ijk, 0, self.res - 1)

    def corner_linear_index(self, ijk: np.ndarray) -> np.ndarray:
        r1 = self.res + 1
        return (ijk[..., 0] * r1 + ijk[..., 1]) * r1 + ijk[..., 2]

    def prune(self, keep, record_sign: np.ndarray | None = None) -> int:
        """Drop active leaves failing `keep(centers, cell_size) -> bool mask`.

        `record_sign` optionally supplies a per-removed-leaf field sign
        (same order as `leaf_centers()` of the removed set) used later to
        fill pruned regions during mesh extraction. Returns the number of
        removed leaves. Root survives even if everything is pruned.
        """
        leaf = self.leaf_active
        idx = np.argwhere(leaf)
        centers = self.lo + (idx + 0.5) * self.cell_size
        keep_mask = np.asarray(keep(centers, self.cell_size), dtype=bool)
        if keep_mask.shape != (len(idx),):
            raise ConfigurationError("keep predicate must return one bool per active leaf")
        removed = idx[~keep_mask]
        leaf[tuple(removed.T)] = False
        if record_sign is not None:
            self.pruned_sign[tuple(removed.T)] = np.sign(record_sign[~keep_mask]).astype(np.int8)
        self._refresh_parents()
        return int(len(removed))

    def _refresh_parents(self):
        # propagate emptiness upwards; root (level 0) always retained
        for lvl in range(self.depth - 1, 0, -1):
            child = self.active[lvl + 1]
            r = child.shape[0] // 2
            blocks = child.reshape(r, 2, r, 2, r, 2)
            self.active[lvl] = blocks.any(axis=(1, 3, 5))

    # -- queries -----------------------------------------------------

    def _check_bounds(self, xs: np.ndarray):
        if np.any(xs < self.lo) or np.any(xs > self.hi):
            bad = xs[np.any((xs < self.lo) | (xs > self.hi), axis=-1)][0]
            raise DomainError(f"{self.name}: point {bad} outside bounds [{self.lo}, {self.hi}]^3")

    def query_mask(self, xs: np.ndarray) -> np.ndarray:
        """True where the containing leaf is active (no feature fetch)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        self._check_bounds(xs)
        ijk = self.cell_index(xs)
        return self.leaf_active[tuple(ijk.T)]

    def query_features_batch(
        self,
        xs,
        corners: Tensor | None = None,
        on_oob: str = "raise",
    ) -> tuple[Tensor, np.ndarray]:
        """Trilinear features for a batch of points.

        Returns (features (N, F), active mask (N,)). Rows landing in
        pruned cells get zero features and mask False. Points outside
        bounds raise DomainError, or are masked out like pruned cells
        when on_oob="mask". Pass `corners` to evaluate against a
        worker-private parameter leaf; defaults to the store's tensor.

        When `xs` is a Tensor requiring grad, the interpolation weights
        are built on the tape so d(feature)/d(position) flows too.
        """
        xs_t = xs if isinstance(xs, Tensor) else None
        raw = np.atleast_2d(xs_t.data if xs_t is not None else np.asarray(xs, dtype=np.float64))
        if on_oob == "mask":
            oob = np.any((raw < self.lo) | (raw > self.hi), axis=-1)
            if oob.any():
                raw = np.clip(raw, self.lo, self.hi)
        else:
            self._check_bounds(raw)
            oob = None
        ijk = self.cell_index(raw)
        mask = self.leaf_active[tuple(ijk.T)]
        if oob is not None and oob.any():
            mask = mask & ~oob

        cell_lo = self.lo + ijk * self.cell_size
        if corners is None:
            corners = self.store.get(self.corner_param)

        offs = _CORNER_OFFSETS  # (8, 3)
        corner_ijk = ijk[:, None, :] + offs[None, :, :]
        cidx = self.corner_linear_index(corner_ijk)  # (N, 8)

        if xs_t is not None and xs_t.requires_grad:
            u = dm.mul(dm.sub(xs_t, cell_lo), 1.0 / self.cell_size)
            w = None
            ws = []
            for k in range(8):
                wk = None
                for ax in range(3):
                    f = dm.cols(u, ax, ax + 1)
                    term = f if offs[k, ax] else dm.sub(1.0, f)
                    wk = term if wk is None else dm.mul(wk, term)
                ws.append(wk)
            w = dm.concat(ws, axis=1)  # (N, 8)
        else:
            u = (raw - cell_lo) / self.cell_size
            w = np.ones((len(raw), 8))
            for ax in range(3):
                f = u[:, ax]
                w *= np.where(offs[None, :, ax], f[:, None], 1.0 - f[:, None])

        feats = dm.trilinear_gather(corners, cidx, w)
        if not mask.all():
            feats = dm.mul(feats, mask[:, None].astype(np.float64))
        return feats, mask

    def query_features(self, x, corners: Tensor | None = None) -> Tensor:
        """Single-point query; raises PrunedRegionError in pruned cells."""
        feats, mask = self.query_features_batch(
            x if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)[None, :],
            corners=corners,
        )
        if not mask[0]:
            raise PrunedRegionError(f"{self.name}: point lies in a pruned cell")
        return feats

    # -- serialization -----------------------------------------------

    def structure_state(self) -> dict:
        return {
            "depth": self.depth,
            "feature_width": self.feature_width,
            "bounds": (self.lo, self.hi),
            "leaf_active": self.leaf_active.copy(),
            "pruned_sign": self.pruned_sign.copy(),
        }

    def load_structure(self, state: dict):
        if state["depth"] != self.depth or state["feature_width"] != self.feature_width:
            raise ConfigurationError("checkpoint octree shape differs from configuration")
        self.active[self.depth][...] = state["leaf_active"]
        self.pruned_sign[...] = state["pruned_sign"]
        self._refresh_parents()


_CORNER_OFFSETS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def build(depth: int, feature_width: int, store: ParameterStore, **kw) -> OctreeFeatureGrid:
    """Fully dense octree at level `depth`; pruning happens later."""
    return OctreeFeatureGrid(depth, feature_width, store, **kw)


# -- background contraction -------------------------------------------


@dataclass
class ContractedPoint:
    coord: np.ndarray  # inside the shell 1 < ||c|| < 2
    distance: float  # original ||x|| >= 1


def contract_batch(xs: np.ndarray) -> np.ndarray:
    """Inverted-sphere mapping x -> (2 - 1/||x||) * x/||x|| for ||x|| > 1."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    r = np.linalg.norm(xs, axis=-1)
    if np.any(r <= 1.0):
        raise DomainError("contract requires ||x|| > 1")
    scale = (2.0 - 1.0 / r) / r
    return xs * scale[:, None]


def contract(x: np.ndarray) -> ContractedPoint:
    x = np.asarray(x, dtype=np.float64)
    c = contract_batch(x[None, :])[0]
    return ContractedPoint(coord=c, distance=float(np.linalg.norm(x)))


def invert_contraction(c: np.ndarray) -> np.ndarray:
    """Inverse of `contract`; defined on the open shell 1 < ||c|| < 2."""
    arr = np.asarray(c, dtype=np.float64)
    single = arr.ndim == 1
    cc = np.atleast_2d(arr)
    n = np.linalg.norm(cc, axis=-1)
    if np.any(n <= 1.0) or np.any(n >= 2.0):
        raise DomainError("inverse contraction needs 1 < ||c|| < 2")
    r = 1.0 / (2.0 - n)
    out = cc * (r / n)[:, None]
    return out[0] if single else out
