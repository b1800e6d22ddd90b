"""Ray generation, sphere-bounded sampling, and SDF-to-alpha rendering.

Foreground samples live on the ray's chord through the unit sphere and
are converted to opacities with the sigmoid-difference rule

    alpha_i = max(0, sigmoid(z*s_i + beta_i) - sigmoid(z*s_{i+1} + beta_i)),
    beta_i  = <grad s_i, d> * dt_i / 2,

then composited front-to-back (w_i = T_i alpha_i). Whatever transmits
through the foreground is filled by a conventional density-based render
of the contracted background field. Per-ray eikonal / curvature
averages come out of the same pass so the geometry-preservation
indicator needs no extra field queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import fields as fl
from . import geometry_grid as gg
from .diffmath import Tensor
from .errors import DomainError, ValidationError

FG_RADIUS = 1.0


@dataclass
class Camera:
    """Pinhole camera with a world-from-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, columns: right / down / forward in world
    translation: np.ndarray  # camera center in world
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError("camera pose must be 3x3 rotation + 3-vector translation")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValidationError(
                f"camera rotation not orthonormal (max deviation {err:.3e})"
            )

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]


def generate_rays(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origins, unit directions) through pixel centers (u, v)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u, v = pixels[:, 0], pixels[:, 1]
    if (u < 0).any() or (u > camera.width - 1).any() or (v < 0).any() or (v > camera.height - 1).any():
        raise DomainError("pixel index outside image")
    d_cam = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=1
    )
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.translation, d_world.shape).copy()
    return origins, d_world


def ray_sphere_span(origins: np.ndarray, dirs: np.ndarray, radius: float = FG_RADIUS):
    """(t_near, t_far, hit) of each ray against the centered sphere."""
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = np.maximum(-b - sq, 0.0)
    t_far = -b + sq
    hit &= t_far > 0.0
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


@dataclass
class RaySampleBatch:
    """Ordered samples of one ray inside the foreground sphere."""

    origin: np.ndarray
    direction: np.ndarray
    t: np.ndarray  # (N,), strictly increasing
    x: np.ndarray  # (N, 3)
    s: np.ndarray | None = None
    grad: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)


def stencil_valid_mask(grid: gg.OctreeFeatureGrid, pts: np.ndarray, eps: float) -> np.ndarray:
    """True where the 7-point FD stencil around pts is fully evaluable."""
    ok = grid.query_mask(pts)
    for k in range(3):
        for sgn in (1.0, -1.0):
            q = pts.copy()
            q[:, k] += sgn * eps
            inside = np.all((q >= grid.lo) & (q <= grid.hi), axis=1)
            ok = ok & inside
            if inside.any():
                ok[inside] &= grid.query_mask(q[inside])
    return ok


def sample_ray(
    origin: np.ndarray,
    direction: np.ndarray,
    n_samples: int,
    grid: gg.OctreeFeatureGrid,
    stratified: bool = False,
    rng_seed: int = 0,
    fd_eps: float | None = None,
) -> RaySampleBatch:
    """Stratified chord samples for one ray; pruned-cell samples dropped.

    Rays missing the sphere produce an empty (fully background) batch.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tn, tf, hit = ray_sphere_span(origin[None, :], direction[None, :])
    if not hit[0]:
        return RaySampleBatch(origin, direction, np.zeros(0), np.zeros((0, 3)))
    jitter = (
        np.random.default_rng(rng_seed).random(n_samples)
        if stratified
        else np.full(n_samples, 0.5)
    )
    u = (np.arange(n_samples) + jitter) / n_samples
    t = tn[0] + (tf[0] - tn[0]) * u
    x = origin[None, :] + t[:, None] * direction[None, :]
    eps = fd_eps if fd_eps is not None else grid.cell_size
    keep = stencil_valid_mask(grid, x, eps)
    return RaySampleBatch(origin, direction, t[keep], x[keep])


# -- Eq. (1) / Eq. (2) --------------------------------------------------


def compute_alpha(s_i, s_next, grad_i, direction, dt, zeta):
    """Opacity of the interval [i, i+1] from its endpoint SDF values.

    Accepts Tensors or arrays; the raw sigmoid difference is clamped at
    zero so weights stay in [0, 1] when the SDF increases along the ray.
    """
    s_i, s_next, grad_i = dm.as_tensor(s_i), dm.as_tensor(s_next), dm.as_tensor(grad_i)
    direction = np.asarray(direction, dtype=np.float64)
    cos = dm.tsum(dm.mul(grad_i, direction), axis=-1) if grad_i.data.ndim > 1 else dm.tsum(dm.mul(grad_i, direction))
    beta = dm.mul(dm.mul(cos, dm.as_tensor(dt)), 0.5)
    a_i = dm.sigmoid(dm.add(dm.mul(s_i, zeta), beta))
    a_next = dm.sigmoid(dm.add(dm.mul(s_next, zeta), beta))
    return dm.maximum(dm.sub(a_i, a_next), 0.0)


def composite_weights(alphas):
    """(weights, transmittances) from per-interval opacities along axis -1."""
    a = dm.as_tensor(alphas)
    squeeze = a.data.ndim == 1
    if squeeze:
        a = dm.reshape(a, (1, a.data.size))
    trans = dm.exclusive_cumprod(dm.sub(1.0, a))
    w = dm.mul(a, trans)
    if squeeze:
        return dm.reshape(w, (w.data.size,)), dm.reshape(trans, (trans.data.size,))
    return w, trans


# -- batched rendering ---------------------------------------------------


@dataclass
class RenderOutput:
    """Per-ray results (arrays over the ray batch)."""

    rgb: np.ndarray
    acc: np.ndarray
    depth: np.ndarray
    e_grad: np.ndarray
    e_curv: np.ndarray
    normal: np.ndarray | None = None


@dataclass
class RenderTensors:
    """Tape-connected per-ray results used by the training losses."""

    rgb: Tensor
    acc: Tensor
    e_grad: Tensor
    e_curv: Tensor
    depth: np.ndarray
    n_fg_samples: np.ndarray
    eik_sum: Tensor | None = None  # sum over fg samples of (||grad||-1)^2
    curv_sum: Tensor | None = None  # sum over fg samples of |lap|


@dataclass
class RayBatchPlan:
    """Sampling geometry precomputed in numpy land (no tape work).

    Building the plan is cheap and deterministic; the heavy decode and
    compositing read everything they need from it, so worker threads
    never touch shared rngs or grids' mutable state.
    """

    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray  # (B, n) left-packed valid samples then padding
    n_valid: np.ndarray  # (B,)
    pts: np.ndarray  # (M, 3) flat valid sample positions
    dst: np.ndarray  # (M,) flat index row*n + col
    ray_id: np.ndarray  # (M,)
    pair_valid: np.ndarray  # (B, n-1) floats 0/1
    t_bg: np.ndarray  # (B, n_bg)
    bg_pts: np.ndarray  # (B*n_bg, 3)
    n: int
    n_bg: int


def plan_ray_batch(
    fs: fl.FieldSet,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_fg: int,
    n_bg: int,
    fg_jitter: np.ndarray | None = None,
    bg_jitter: np.ndarray | None = None,
    bg_far: float = 100.0,
) -> RayBatchPlan:
    b = len(origins)
    tn, tf, hit = ray_sphere_span(origins, dirs)
    if fg_jitter is None:
        fg_jitter = np.full((b, n_fg), 0.5)
    u = (np.arange(n_fg)[None, :] + fg_jitter) / n_fg
    t = tn[:, None] + (tf - tn)[:, None] * u
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    valid = np.broadcast_to(hit[:, None], (b, n_fg)).copy()
    flat_x = x.reshape(-1, 3)
    check = valid.reshape(-1)
    if check.any():
        sub = stencil_valid_mask(fs.fg_grid, flat_x[check], fs.fd_eps)
        check2 = check.copy()
        check2[check] = sub
        valid = check2.reshape(b, n_fg)

    # left-pack valid samples, keep order
    order = np.argsort(~valid, axis=1, kind="stable")
    t_packed = np.take_along_axis(t, order, axis=1)
    n_valid = valid.sum(axis=1)
    col = np.arange(n_fg)[None, :]
    packed_valid = col < n_valid[:, None]
    x_packed = origins[:, None, :] + t_packed[..., None] * dirs[:, None, :]
    rows, cols_idx = np.nonzero(packed_valid)
    pts = x_packed[rows, cols_idx]
    dst = rows * n_fg + cols_idx
    pair_valid = (col[:, : n_fg - 1] + 1 < n_valid[:, None]).astype(np.float64)

    # background: inverse-distance spacing beyond the sphere (or beyond
    # the closest approach for rays that miss it)
    t_ca = -np.einsum("ij,ij->i", origins, dirs)
    t_start = np.where(hit, tf, np.maximum(t_ca, 0.0)) + 1e-3
    if bg_jitter is None:
        bg_jitter = np.full((b, n_bg), 0.5)
    ub = (np.arange(n_bg)[None, :] + bg_jitter) / n_bg
    inv = (1.0 - ub) / t_start[:, None] + ub / bg_far
    t_bg = 1.0 / inv
    bg_pts = (origins[:, None, :] + t_bg[..., None] * dirs[:, None, :]).reshape(-1, 3)
    # numerical guard: contraction requires ||x|| > 1
    nrm = np.linalg.norm(bg_pts, axis=1)
    bad = nrm <= 1.0 + 1e-9
    if bad.any():
        bg_pts[bad] *= ((1.0 + 1e-6) / nrm[bad])[:, None]

    return RayBatchPlan(
        origins=origins, dirs=dirs, t=t_packed, n_valid=n_valid, pts=pts, dst=dst,
        ray_id=rows, pair_valid=pair_valid, t_bg=t_bg, bg_pts=bg_pts, n=n_fg, n_bg=n_bg,
    )


def render_planned(
    fs: fl.FieldSet,
    plan: RayBatchPlan,
    image_ids: np.ndarray,
    leaves: dict[str, Tensor] | None = None,
    want_normals: bool = False,
) -> RenderTensors | tuple[RenderTensors, np.ndarray]:
    """Decode + composite a planned ray batch on the tape."""
    b, n = plan.t.shape
    m = len(plan.pts)
    zeta = fs.deviation(leaves)
    app_flat = fs.appearance_rows(np.asarray(image_ids)[plan.ray_id], leaves) if m else None

    if m:
        der = fs.sdf_with_derivatives(plan.pts, leaves=leaves)
        s_pad = dm.reshape(dm.scatter_to(dm.reshape(der["s"], (m, 1)), plan.dst, b * n), (b, n))
        g_pad = [
            dm.reshape(dm.scatter_to(dm.cols(der["grad"], k, k + 1), plan.dst, b * n), (b, n))
            for k in range(3)
        ]
        s_i, s_j = dm.cols(s_pad, 0, n - 1), dm.cols(s_pad, 1, n)
        dt = np.diff(plan.t, axis=1)
        cos = None
        for k in range(3):
            term = dm.mul(dm.cols(g_pad[k], 0, n - 1), plan.dirs[:, k : k + 1])
            cos = term if cos is None else dm.add(cos, term)
        beta = dm.mul(dm.mul(cos, dt), 0.5)
        raw = dm.sub(dm.sigmoid(dm.add(dm.mul(s_i, zeta), beta)),
                     dm.sigmoid(dm.add(dm.mul(s_j, zeta), beta)))
        alpha = dm.mul(dm.maximum(raw, 0.0), plan.pair_valid)
        w, _ = composite_weights(alpha)
        acc = dm.tsum(w, axis=1)

        normals = fl.FieldSet.safe_normals(der["grad"])
        c = fs.color(der["geom"], plan.dirs[plan.ray_id], normals, app_flat, leaves)
        fg_rgb = []
        for k in range(3):
            ch = dm.reshape(dm.scatter_to(dm.cols(c, k, k + 1), plan.dst, b * n), (b, n))
            fg_rgb.append(dm.reshape(dm.tsum(dm.mul(dm.cols(ch, 0, n - 1), w), axis=1), (b, 1)))
        fg_rgb = dm.concat(fg_rgb, axis=1)

        # per-ray eikonal / curvature averages over the foreground samples
        gnorm = dm.sqrt(dm.maximum(dm.tsum(dm.square(der["grad"]), axis=1), 1e-300))
        eik = dm.square(dm.sub(gnorm, 1.0))
        lap_abs = dm.absolute(der["lap"])
        denom = np.maximum(plan.n_valid, 1).astype(np.float64)
        e_grad = dm.div(dm.segment_sum(eik, plan.ray_id, b), denom)
        e_curv = dm.div(dm.segment_sum(lap_abs, plan.ray_id, b), denom)
        eik_sum = dm.tsum(eik)
        curv_sum = dm.tsum(lap_abs)

        t_mid = 0.5 * (plan.t[:, : n - 1] + plan.t[:, 1:])  # interval midpoints
        wt = dm.tsum(dm.mul(w, t_mid), axis=1)
        depth = wt.data / np.maximum(acc.data, 1e-6)
    else:
        zero_b = Tensor(np.zeros(b))
        fg_rgb = Tensor(np.zeros((b, 3)))
        acc, e_grad, e_curv = zero_b, zero_b, Tensor(np.zeros(b))
        depth = np.zeros(b)
        w = None

    # background
    dirs_rep = np.repeat(plan.dirs, plan.n_bg, axis=0)
    app_bg = fs.appearance_rows(np.repeat(np.asarray(image_ids), plan.n_bg), leaves)
    bg_rgb_flat, sigma = fs.background_radiance(plan.bg_pts, dirs_rep, app_bg, leaves)
    dt_bg = np.diff(plan.t_bg, axis=1)
    dt_bg = np.concatenate([dt_bg, dt_bg[:, -1:]], axis=1)  # last interval reuses spacing
    sig2d = dm.reshape(sigma, (b, plan.n_bg))
    alpha_bg = dm.sub(1.0, dm.exp(dm.mul(dm.mul(sig2d, dt_bg), -1.0)))
    w_bg, _ = composite_weights(alpha_bg)
    bg_rgb = []
    for k in range(3):
        ch = dm.reshape(dm.cols(bg_rgb_flat, k, k + 1), (b, plan.n_bg))
        bg_rgb.append(dm.reshape(dm.tsum(dm.mul(ch, w_bg), axis=1), (b, 1)))
    bg_rgb = dm.concat(bg_rgb, axis=1)

    one_minus_acc = dm.reshape(dm.sub(1.0, acc), (b, 1))
    rgb = dm.add(fg_rgb, dm.mul(one_minus_acc, bg_rgb))

    out = RenderTensors(
        rgb=rgb, acc=acc, e_grad=e_grad, e_curv=e_curv, depth=depth,
        n_fg_samples=plan.n_valid,
    )
    if want_normals:
        normal_map = np.zeros((b, 3))
        if m and w is not None:
            ns = np.zeros((b * n, 3))
            ns[plan.dst] = fl.FieldSet.safe_normals(der["grad"]).data
            ns = ns.reshape(b, n, 3)
            nm = (ns[:, : n - 1, :] * w.data[..., None]).sum(axis=1)
            lg = np.linalg.norm(nm, axis=1, keepdims=True)
            normal_map = np.where(lg > 1e-9, nm / np.maximum(lg, 1e-9), 0.0)
        return out, normal_map
    return out


def render_ray(
    fs: fl.FieldSet,
    origin: np.ndarray,
    direction: np.ndarray,
    image_id: int,
    n_fg: int = 64,
    n_bg: int = 32,
    stratified: bool = False,
    rng_seed: int = 0,
) -> RenderOutput:
    """Render a single ray (convenience wrapper over the batched path)."""
    origins = np.asarray(origin, dtype=np.float64)[None, :]
    dirs = np.asarray(direction, dtype=np.float64)[None, :]
    fg_j = bg_j = None
    if stratified:
        rng = np.random.default_rng(rng_seed)
        fg_j, bg_j = rng.random((1, n_fg)), rng.random((1, n_bg))
    plan = plan_ray_batch(fs, origins, dirs, n_fg, n_bg, fg_j, bg_j)
    with dm.no_grad():
        rt = render_planned(fs, plan, np.array([image_id]))
    return RenderOutput(
        rgb=rt.rgb.data[0], acc=float(rt.acc.data[0]), depth=float(rt.depth[0]),
        e_grad=float(rt.e_grad.data[0]), e_curv=float(rt.e_curv.data[0]),
    )


def render_image(
    fs: fl.FieldSet,
    camera: Camera,
    image_id: int,
    n_fg: int = 64,
    n_bg: int = 32,
    chunk: int = 2048,
    threads: int = 1,
    gpl_indicator=None,
) -> dict:
    """Full-frame render returning rgb plus auxiliary maps.

    Deterministic: midpoint (non-jittered) sampling, fixed chunk order.
    `gpl_indicator(e_grad, e_curv) -> phi` fills the "phi" map when given.
    """
    from concurrent.futures import ThreadPoolExecutor

    w, h = camera.width, camera.height
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    origins, dirs = generate_rays(camera, pixels)
    nrays = len(pixels)
    ids = np.full(nrays, image_id)

    def run_chunk(lo):
        hi = min(lo + chunk, nrays)
        plan = plan_ray_batch(fs, origins[lo:hi], dirs[lo:hi], n_fg, n_bg)
        with dm.no_grad():
            rt, normals = render_planned(fs, plan, ids[lo:hi], want_normals=True)
        return rt, normals

    starts = list(range(0, nrays, chunk))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_chunk, starts))
    else:
        results = [run_chunk(lo) for lo in starts]

    rgb = np.concatenate([r.rgb.data for r, _ in results])
    acc = np.concatenate([r.acc.data for r, _ in results])
    depth = np.concatenate([r.depth for r, _ in results])
    e_grad = np.concatenate([r.e_grad.data for r, _ in results])
    e_curv = np.concatenate([r.e_curv.data for r, _ in results])
    normal = np.concatenate([n for _, n in results])
    out = {
        "rgb": rgb.reshape(h, w, 3),
        "acc": acc.reshape(h, w),
        "depth": depth.reshape(h, w),
        "e_grad": e_grad.reshape(h, w),
        "e_curv": e_curv.reshape(h, w),
        "normal": normal.reshape(h, w, 3),
    }
    if gpl_indicator is not None:
        out["phi"] = np.asarray(
            gpl_indicator(Tensor(e_grad), Tensor(e_curv)).data
        ).reshape(h, w)
    return out
