"""Per-image transient-occluder mask field.

A coordinate MLP over (encoded pixel uv, per-image transient embedding)
standing in for a CNN segmenter: the mask value M(r) in (0,1) is all
the downstream losses ever see, so the producer is swappable. The
output bias starts low so early photometric training is not masked out.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .diffmath import Mlp, ParameterStore, Tensor
from .errors import ConfigurationError
from .fields import fourier_encode, fourier_width


class MaskPredictor:
    def __init__(
        self,
        store: ParameterStore,
        n_images: int,
        rng: np.random.Generator,
        embed_dim: int = 8,
        hidden: tuple[int, ...] = (32, 32),
        uv_freqs: int = 4,
        init_bias: float = -2.0,
    ):
        self.store = store
        self.n_images = n_images
        self.embed_dim = embed_dim
        self.uv_freqs = uv_freqs
        self.mlp = Mlp(
            store, "mask",
            [fourier_width(2, uv_freqs) + embed_dim, *hidden, 1],
            ["relu"] * len(hidden) + ["none"], rng,
        )
        store.data(f"mask/b{len(hidden)}")[...] = init_bias
        store.register("mask/embeddings", 0.01 * rng.standard_normal((n_images, embed_dim)))

    def predict(self, image_ids, uvs, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """M in (0,1) for normalized pixel coordinates uv in [0,1]^2."""
        ids = np.asarray(image_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_images):
            raise ConfigurationError(f"unknown image id (have 0..{self.n_images - 1})")
        uvs = np.atleast_2d(np.asarray(uvs, dtype=np.float64))
        enc = fourier_encode(uvs, self.uv_freqs, omega0=np.pi)
        table = (leaves or self.store._params)["mask/embeddings"]
        emb = dm.gather_rows(table, ids)
        out = self.mlp.forward(dm.concat([Tensor(enc), emb], axis=1), leaves=leaves)
        return dm.reshape(dm.sigmoid(out), (len(uvs),))


def mask_regularizer(m: Tensor, lambda_bimodal: float = 0.5, denom: float | None = None) -> Tensor:
    """Intensity + bimodality penalty: mean(M) + lb * mean(M(1-M)).

    Nonnegative, zero iff M == 0 everywhere. `denom` overrides the batch
    size in the mean (used when a batch is split across workers).
    """
    if m.data.size == 0:
        raise ConfigurationError("mask regularizer needs a nonempty batch")
    d = float(denom) if denom is not None else float(m.data.size)
    intensity = dm.mul(dm.tsum(m), 1.0 / d)
    bimodal = dm.mul(dm.tsum(dm.mul(m, dm.sub(1.0, m))), 1.0 / d)
    return dm.add(intensity, dm.mul(bimodal, lambda_bimodal))
