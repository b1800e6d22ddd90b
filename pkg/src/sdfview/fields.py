"""Neural field decoders over the feature grids.

The foreground SDF decoder consumes grid features plus the raw point,
the color decoder is conditioned on geometric features, view direction,
surface normal and a per-image appearance embedding, and the background
decoder produces radiance + density for contracted outer-shell points.
Spatial derivatives of the SDF come from central finite differences
(6-point gradient, 7-point Laplacian), never from autodiff through the
grid: the stencil step is tied to the octree cell size and shrinks on a
coarse-to-fine schedule.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from . import geometry_grid as gg
from .diffmath import Mlp, ParameterStore, Tensor
from .errors import ConfigurationError, PrunedRegionError, UsageError


def fourier_encode(x: np.ndarray, n_freqs: int, omega0: float = 1.0) -> np.ndarray:
    """[x, sin(2^k w0 x), cos(2^k w0 x)] for k = 0..n_freqs-1."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = [x]
    for k in range(n_freqs):
        w = omega0 * (2.0**k)
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    return np.concatenate(parts, axis=1)


def fourier_width(dim: int, n_freqs: int) -> int:
    return dim * (1 + 2 * n_freqs)


class FieldSet:
    """All learnable decoders plus the global deviation and appearance table."""

    def __init__(
        self,
        store: ParameterStore,
        fg_grid: gg.OctreeFeatureGrid,
        bg_grid: gg.OctreeFeatureGrid,
        n_images: int,
        rng: np.random.Generator,
        geom_dim: int = 16,
        appearance_dim: int = 8,
        dir_freqs: int = 4,
        sdf_hidden: tuple[int, ...] = (32, 32),
        color_hidden: tuple[int, ...] = (48, 48),
        bg_hidden: tuple[int, ...] = (32, 32),
        deviation_init: float = 20.0,
    ):
        self.store = store
        self.fg_grid = fg_grid
        self.bg_grid = bg_grid
        self.n_images = n_images
        self.geom_dim = geom_dim
        self.appearance_dim = appearance_dim
        self.dir_freqs = dir_freqs
        self.sdf_override = None  # test hook: callable (N,3)->(N,) replacing the decoder
        self.fd_eps = fg_grid.cell_size

        F = fg_grid.feature_width
        dir_dim = fourier_width(3, dir_freqs)
        self.sdf_mlp = Mlp(
            store, "sdf", [F + 3, *sdf_hidden, 1 + geom_dim],
            ["softplus"] * len(sdf_hidden) + ["none"], rng, final_scale=1e-4,
        )
        self.color_mlp = Mlp(
            store, "color",
            [geom_dim + dir_dim + 3 + appearance_dim, *color_hidden, 3],
            ["relu"] * len(color_hidden) + ["sigmoid"], rng, lipschitz=True,
        )
        self.bg_mlp = Mlp(
            store, "background",
            [bg_grid.feature_width + 3 + dir_dim + appearance_dim, *bg_hidden, 4],
            ["relu"] * len(bg_hidden) + ["none"], rng,
        )
        store.register("deviation/raw", np.array(_softplus_inv(deviation_init)))
        store.register(
            "appearance/table", 0.01 * rng.standard_normal((n_images, appearance_dim))
        )

    # -- parameter access ---------------------------------------------

    def _leaf(self, name: str, leaves: dict[str, Tensor] | None) -> Tensor:
        return (leaves or self.store._params)[name]

    def deviation(self, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Strictly positive sharpness of the SDF-to-alpha sigmoid."""
        return dm.softplus(self._leaf("deviation/raw", leaves))

    def appearance_rows(self, image_ids, leaves: dict[str, Tensor] | None = None) -> Tensor:
        ids = np.asarray(image_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_images):
            raise ConfigurationError(f"image id out of range 0..{self.n_images - 1}")
        return dm.gather_rows(self._leaf("appearance/table", leaves), ids)

    # -- SDF ------------------------------------------------------------

    def sdf_value_batch(
        self, xs: np.ndarray, leaves: dict[str, Tensor] | None = None
    ) -> tuple[Tensor, Tensor, np.ndarray]:
        """(s (N,), geometric feature (N,G), valid mask (N,)).

        Invalid rows (pruned cell or outside bounds) carry zeros; callers
        drop them. Deterministic given parameters.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if self.sdf_override is not None:
            s = Tensor(np.asarray(self.sdf_override(xs), dtype=np.float64))
            geom = Tensor(np.zeros((len(xs), self.geom_dim)))
            return s, geom, np.ones(len(xs), dtype=bool)
        feats, mask = self.fg_grid.query_features_batch(
            xs, corners=self._leaf(self.fg_grid.corner_param, leaves), on_oob="mask"
        )
        out = self.sdf_mlp.forward(dm.concat([feats, Tensor(xs)], axis=1), leaves=leaves)
        s = dm.reshape(dm.cols(out, 0, 1), (len(xs),))
        geom = dm.cols(out, 1, 1 + self.geom_dim)
        return s, geom, mask

    def sdf_value(self, x, leaves=None) -> tuple[Tensor, Tensor]:
        s, geom, mask = self.sdf_value_batch(np.asarray(x, dtype=np.float64)[None, :], leaves)
        if not mask[0]:
            raise PrunedRegionError("SDF query in pruned or out-of-bounds region")
        return s, geom

    def sdf_with_derivatives(
        self,
        xs: np.ndarray,
        eps: float | None = None,
        leaves: dict[str, Tensor] | None = None,
    ) -> dict:
        """SDF value, FD gradient and FD Laplacian for a point batch.

        One batched decoder evaluation covers the centers and all six
        stencil points. A sample is valid only if the full 7-point
        stencil is evaluable. Returns dict with Tensors s (N,), geom
        (N,G), grad (N,3), lap (N,), and ndarray mask (N,).
        """
        eps = self.fd_eps if eps is None else float(eps)
        if eps <= 0:
            raise ConfigurationError("finite-difference step must be positive")
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        n = len(xs)
        offsets = np.concatenate([np.eye(3), -np.eye(3)]) * eps  # +x,+y,+z,-x,-y,-z
        stencil = (xs[None, :, :] + offsets[:, None, :]).reshape(6 * n, 3)
        all_pts = np.concatenate([xs, stencil], axis=0)
        s_all, geom_all, mask_all = self.sdf_value_batch(all_pts, leaves)
        mask = mask_all.reshape(7, n).all(axis=0)

        # row blocks of s_all: 0 center, 1..3 +eps e_k, 4..6 -eps e_k
        s_rows = dm.reshape(s_all, (7, n))
        center = _row(s_rows, 0)  # (1, n)
        plus = [_row(s_rows, 1 + k) for k in range(3)]
        minus = [_row(s_rows, 4 + k) for k in range(3)]
        grad = dm.concat(
            [dm.reshape(dm.mul(dm.sub(plus[k], minus[k]), 1.0 / (2.0 * eps)), (n, 1))
             for k in range(3)],
            axis=1,
        )
        lap_sum = None
        for k in range(3):
            t = dm.add(plus[k], minus[k])
            lap_sum = t if lap_sum is None else dm.add(lap_sum, t)
        lap = dm.mul(dm.sub(lap_sum, dm.mul(center, 6.0)), 1.0 / (eps * eps))
        return {
            "s": dm.reshape(center, (n,)),
            "geom": _first_rows(geom_all, n),
            "grad": grad,
            "lap": dm.reshape(lap, (n,)),
            "mask": mask,
        }

    def sdf_gradient(self, x, eps: float | None = None, leaves=None) -> Tensor:
        out = self.sdf_with_derivatives(np.asarray(x, dtype=np.float64)[None, :], eps, leaves)
        if not out["mask"][0]:
            raise PrunedRegionError("stencil point in pruned or out-of-bounds region")
        return dm.reshape(out["grad"], (3,))

    def sdf_laplacian(self, x, eps: float | None = None, leaves=None) -> Tensor:
        out = self.sdf_with_derivatives(np.asarray(x, dtype=np.float64)[None, :], eps, leaves)
        if not out["mask"][0]:
            raise PrunedRegionError("stencil point in pruned or out-of-bounds region")
        return dm.reshape(out["lap"], ())

    # -- color ----------------------------------------------------------

    def color(
        self,
        geom: Tensor,
        directions: np.ndarray,
        normals: Tensor,
        appearance: Tensor,
        leaves: dict[str, Tensor] | None = None,
    ) -> Tensor:
        """Sigmoid-bounded rgb for surface samples."""
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        enc = fourier_encode(d, self.dir_freqs)
        inp = dm.concat([geom, Tensor(enc), normals, appearance], axis=1)
        return self.color_mlp.forward(inp, leaves=leaves)

    def background_radiance(
        self,
        xs: np.ndarray,
        directions: np.ndarray,
        appearance: Tensor,
        leaves: dict[str, Tensor] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """(rgb (N,3), density (N,)) for points outside the unit sphere."""
        contracted = gg.contract_batch(xs)
        return self.background_radiance_contracted(contracted, directions, appearance, leaves)

    def background_radiance_contracted(
        self, contracted: np.ndarray, directions, appearance, leaves=None
    ) -> tuple[Tensor, Tensor]:
        feats, _ = self.bg_grid.query_features_batch(
            contracted, corners=self._leaf(self.bg_grid.corner_param, leaves), on_oob="mask"
        )
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        enc = fourier_encode(d, self.dir_freqs)
        out = self.bg_mlp.forward(
            dm.concat([feats, Tensor(np.atleast_2d(contracted)), Tensor(enc), appearance], axis=1),
            leaves=leaves,
        )
        rgb = dm.sigmoid(dm.cols(out, 0, 3))
        sigma = dm.reshape(dm.softplus(dm.cols(out, 3, 4)), (len(d),))
        return rgb, sigma

    @staticmethod
    def safe_normals(grad: Tensor) -> Tensor:
        """Normalize FD gradients; all-zero rows stay zero."""
        norm_sq = dm.tsum(dm.square(grad), axis=1, keepdims=True)
        norm = dm.sqrt(dm.maximum(norm_sq, 1e-16))
        unit = dm.div(grad, norm)
        keep = (norm.data >= 1e-8).astype(np.float64)
        return dm.mul(unit, keep)


def _row(t2d: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor as a (1, n) tensor."""
    n = t2d.data.shape[1]
    flat = dm.reshape(t2d, (1, t2d.data.shape[0] * n))
    return dm.cols(flat, i * n, (i + 1) * n)


def _first_rows(t2d: Tensor, n: int) -> Tensor:
    flat = dm.reshape(t2d, (1, t2d.data.size))
    width = t2d.data.shape[1]
    return dm.reshape(dm.cols(flat, 0, n * width), (n, width))


def _softplus_inv(y: float) -> float:
    import math

    return float(y + math.log(-math.expm1(-y)))


# -- mesh extraction ----------------------------------------------------


def extract_mesh(
    fs: FieldSet, resolution: int, chunk: int = 65536
) -> tuple[np.ndarray, np.ndarray]:
    """Marching-cubes triangulation of the zero level set over [-1,1]^3.

    Lattice points outside the unit sphere or in pruned cells are filled
    with a constant of the recorded sign (+1 when unknown) so no false
    crossings appear at domain boundaries. Returns (vertices (V,3),
    faces (F,3)); both empty when the field has no zero crossing.
    """
    if resolution < 8:
        raise ConfigurationError("mesh resolution must be >= 8")
    from skimage import measure

    r1 = resolution + 1
    axis = np.linspace(-1.0, 1.0, r1)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(len(pts))
    inside = np.linalg.norm(pts, axis=1) < 1.0 - 1e-9
    values[~inside] = 1.0

    grid = fs.fg_grid
    idx_in = np.nonzero(inside)[0]
    with dm.no_grad():
        for lo in range(0, len(idx_in), chunk):
            sel = idx_in[lo : lo + chunk]
            s, _, mask = fs.sdf_value_batch(pts[sel])
            vals = s.data.copy()
            if not mask.all():
                bad = ~mask
                ijk = grid.cell_index(pts[sel][bad])
                sign = grid.pruned_sign[tuple(ijk.T)].astype(np.float64)
                sign[sign == 0] = 1.0
                vals[bad] = sign
            values[sel] = vals
    volume = values.reshape(r1, r1, r1)
    if volume.min() >= 0.0 or volume.max() <= 0.0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    h = 2.0 / resolution
    verts, faces, _, _ = measure.marching_cubes(volume, level=0.0, spacing=(h, h, h))
    verts = verts + np.array([-1.0, -1.0, -1.0])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def mesh_area(verts: np.ndarray, faces: np.ndarray) -> float:
    if len(faces) == 0:
        return 0.0
    a = verts[faces[:, 1]] - verts[faces[:, 0]]
    b = verts[faces[:, 2]] - verts[faces[:, 0]]
    return float(0.5 * np.linalg.norm(np.cross(a, b), axis=1).sum())


def save_obj(path, verts: np.ndarray, faces: np.ndarray):
    """ASCII OBJ export (1-based face indices)."""
    with open(path, "w") as f:
        f.write("# sdfview mesh export\n")
        for v in verts:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
