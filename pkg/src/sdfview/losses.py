"""Every term of the composite training objective, individually testable.

The geometry-preservation term couples the transient mask to an edge
indicator built from per-ray eikonal error and curvature, penalizing
masks that fire on rays crossing geometrically significant regions.
Each term accepts an optional `denom` so a batch split across workers
reduces to exactly the same mean as the unsplit computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import diffmath as dm
from .diffmath import Mlp, Tensor
from .errors import ConfigurationError

TERM_ORDER = ("rgb", "eik", "curv", "mask", "gpl", "lps", "off", "sphere")


@dataclass
class LossWeights:
    """Composite-loss weights; gpl/gpl_grad/gpl_curv follow the published values."""

    rgb: float = 1.0
    eik: float = 0.1
    curv: float = 5e-4
    mask: float = 0.01
    gpl: float = 0.05
    lps: float = 1e-5
    off: float = 0.01
    sphere: float = 1.0
    gpl_grad: float = 10.0
    gpl_curv: float = 2.0
    gpl_k: float = 1.0
    gpl_c: float = 0.0
    gpl_detach_phi: bool = False
    bimodal: float = 0.5
    off_sharpness: float = 100.0

    def term_weight(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass
class LossBreakdown:
    """Raw term values plus the weighted total for one step."""

    terms: dict = field(default_factory=dict)  # name -> unweighted value
    weights: dict = field(default_factory=dict)  # name -> lambda
    total: float = 0.0

    def weighted(self, name: str) -> float:
        return self.weights[name] * self.terms[name]


def rgb_l1(rendered: Tensor, target: np.ndarray, mask_values: Tensor | None = None,
           denom: float | None = None) -> Tensor:
    """Transient-down-weighted photometric L1: mean (1-M) * ||C - target||_1."""
    if rendered.data.size == 0:
        raise ConfigurationError("rgb loss needs a nonempty ray batch")
    target = np.asarray(target, dtype=np.float64)
    per_ray = dm.tsum(dm.absolute(dm.sub(rendered, target)), axis=1)
    if mask_values is not None:
        per_ray = dm.mul(per_ray, dm.sub(1.0, mask_values))
    d = float(denom) if denom is not None else float(per_ray.data.size)
    return dm.mul(dm.tsum(per_ray), 1.0 / d)


def eikonal(grads: Tensor, denom: float | None = None) -> Tensor:
    """mean (||grad s|| - 1)^2 over sampled points."""
    if grads.data.size == 0:
        raise ConfigurationError("eikonal loss needs a nonempty sample set")
    norms = dm.sqrt(dm.maximum(dm.tsum(dm.square(grads), axis=1), 1e-300))
    d = float(denom) if denom is not None else float(norms.data.size)
    return dm.mul(dm.tsum(dm.square(dm.sub(norms, 1.0))), 1.0 / d)


def curvature(laps: Tensor, denom: float | None = None) -> Tensor:
    """mean |laplacian s|."""
    if laps.data.size == 0:
        raise ConfigurationError("curvature loss needs a nonempty sample set")
    d = float(denom) if denom is not None else float(laps.data.size)
    return dm.mul(dm.tsum(dm.absolute(laps)), 1.0 / d)


def gpl_indicator(e_grad: Tensor, e_curv: Tensor, w: LossWeights) -> Tensor:
    """Edge indicator Phi = sigmoid(k * (lg*E_grad + lc*E_curv - c)).

    Monotone nondecreasing in both ray statistics; k and c calibrate the
    operating point (defaults give the plain sigmoid of the weighted sum).
    """
    z = dm.add(dm.mul(e_grad, w.gpl_grad), dm.mul(e_curv, w.gpl_curv))
    return dm.sigmoid(dm.mul(dm.sub(z, w.gpl_c), w.gpl_k))


def gpl(mask_values: Tensor, phi: Tensor, denom: float | None = None) -> Tensor:
    """Geometry-preservation loss: mean over rays of M(r) * Phi(r)."""
    if mask_values.data.shape != phi.data.shape:
        raise ConfigurationError(
            f"mask/indicator length mismatch: {mask_values.data.shape} vs {phi.data.shape}"
        )
    d = float(denom) if denom is not None else float(phi.data.size)
    return dm.mul(dm.tsum(dm.mul(mask_values, phi)), 1.0 / d)


def lipschitz(color_mlp: Mlp, leaves=None) -> Tensor:
    """Product over color-decoder layers of softplus(c_l)."""
    return color_mlp.lipschitz_bound(leaves)


def off_surface(sdf_values: Tensor, sharpness: float = 100.0,
                denom: float | None = None) -> Tensor:
    """mean exp(-a |s|): pushes free-space SDF magnitudes away from zero."""
    d = float(denom) if denom is not None else float(sdf_values.data.size)
    return dm.mul(dm.tsum(dm.exp(dm.mul(dm.absolute(sdf_values), -sharpness))), 1.0 / d)


def sphere_init(sdf_values: Tensor, xs: np.ndarray, radius: float,
                denom: float | None = None) -> Tensor:
    """Warm-up target: mean (s(x) - (||x|| - r))^2."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    target = np.linalg.norm(xs, axis=1) - radius
    d = float(denom) if denom is not None else float(sdf_values.data.size)
    return dm.mul(dm.tsum(dm.square(dm.sub(sdf_values, target))), 1.0 / d)


def total(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum in canonical term order.

    Terms with weight exactly 0 are skipped entirely, which removes
    their gradient contribution bitwise. Unknown term names are
    rejected; missing terms simply don't contribute.
    """
    for name in terms:
        if name not in TERM_ORDER:
            raise ConfigurationError(f"unknown loss term {name!r}")
    bd = LossBreakdown()
    loss = None
    for name in TERM_ORDER:
        if name not in terms:
            continue
        lam = weights.term_weight(name)
        bd.terms[name] = float(terms[name].data)
        bd.weights[name] = lam
        if lam == 0.0:
            continue
        piece = dm.mul(terms[name], lam)
        loss = piece if loss is None else dm.add(loss, piece)
    if loss is None:
        loss = Tensor(np.array(0.0))
    bd.total = float(loss.data)
    return loss, bd
