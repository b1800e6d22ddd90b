"""Flat key-value configuration with dotted keys.

Config files are plain text, one `key = value` per line, `#` comments.
Every field of the training setup is addressable; unknown keys are
rejected with the full list of valid keys. Overrides (`key=value`
strings, e.g. from the command line) apply last-writer-wins.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigurationError

# key -> (type, default, help). Booleans parse true/false/1/0.
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "global rng seed"),
    "threads": (int, 8, "worker threads for rendering/training"),

    "scene.kind": (str, "cube_sphere", "synthetic scene: cube_sphere | sphere"),
    "scene.n_train": (int, 40, "training images"),
    "scene.n_test": (int, 8, "held-out images"),
    "scene.image_size": (int, 64, "square image side in pixels"),
    "scene.orbit_radius": (float, 2.5, "camera orbit radius"),
    "scene.fov_deg": (float, 50.0, "vertical field of view"),
    "scene.tint_min": (float, 0.6, "per-channel tint lower bound"),
    "scene.tint_max": (float, 1.4, "per-channel tint upper bound"),
    "scene.gamma_min": (float, 0.85, "per-image gamma lower bound"),
    "scene.gamma_max": (float, 1.2, "per-image gamma upper bound"),
    "scene.sprite_fraction": (float, 0.5, "fraction of train images with sprites"),
    "scene.sprites_per_image": (int, 1, "transient sprites per affected image"),
    "scene.sprite_size_min": (float, 0.06, "sprite radius, fraction of image size"),
    "scene.sprite_size_max": (float, 0.12, "sprite radius, fraction of image size"),
    "scene.edge_overlap": (float, 0.6, "fraction of sprites centered on edges"),
    "scene.seed": (int, -1, "scene seed; -1 means use the global seed"),

    "octree.fg_depth": (int, 6, "foreground octree depth"),
    "octree.bg_depth": (int, 4, "background octree depth"),
    "octree.feature_width": (int, 8, "corner feature width"),
    "octree.prune_period": (int, 5000, "iterations between pruning passes"),
    "octree.prune_margin": (float, 1.5, "keep cells with |s| < margin * diagonal"),

    "fields.geom_dim": (int, 16, "geometric feature width"),
    "fields.appearance_dim": (int, 8, "per-image appearance embedding width"),
    "fields.dir_freqs": (int, 4, "direction encoding frequencies"),
    "fields.sdf_hidden_layers": (int, 2, "sdf decoder hidden layers"),
    "fields.sdf_hidden_width": (int, 32, "sdf decoder hidden width"),
    "fields.color_hidden_layers": (int, 2, "color decoder hidden layers"),
    "fields.color_hidden_width": (int, 48, "color decoder hidden width"),
    "fields.bg_hidden_layers": (int, 2, "background decoder hidden layers"),
    "fields.bg_hidden_width": (int, 32, "background decoder hidden width"),
    "fields.deviation_init": (float, 20.0, "initial sigmoid sharpness"),

    "mask.embed_dim": (int, 8, "per-image transient embedding width"),
    "mask.hidden_layers": (int, 2, "mask MLP hidden layers"),
    "mask.hidden_width": (int, 32, "mask MLP hidden width"),
    "mask.uv_freqs": (int, 4, "pixel-uv encoding frequencies"),
    "mask.init_bias": (float, -2.0, "mask output bias at init"),

    "render.n_fg_samples": (int, 64, "foreground samples per ray"),
    "render.n_bg_samples": (int, 32, "background samples per ray"),
    "render.chunk_rays": (int, 64, "rays per worker chunk"),
    "render.bg_far": (float, 100.0, "background far distance"),

    "train.warmup_iters": (int, 1000, "sphere-initialization steps"),
    "train.iters": (int, 20000, "total iterations (warm-up included)"),
    "train.batch_rays": (int, 1024, "rays per training step"),
    "train.lr": (float, 5e-4, "initial learning rate"),
    "train.lr_final": (float, 5e-6, "cosine-decayed final learning rate"),
    "train.warmup_points": (int, 1024, "field samples per warm-up step"),
    "train.eik_points": (int, 1024, "extra uniform eikonal/curvature points per step"),
    "train.fd_eps_halve_at": (str, "", "comma-separated iterations halving the FD step"),
    "train.checkpoint_period": (int, 5000, "iterations between checkpoints"),
    "train.log_period": (int, 50, "iterations between metrics rows"),
    "train.eval_appearance_steps": (int, 100, "left-half embedding fit steps"),
    "train.eval_appearance_lr": (float, 5e-2, "embedding fit learning rate"),
    "train.psnr_cap": (float, 100.0, "PSNR cap for zero-MSE images"),

    "loss.rgb": (float, 1.0, "photometric weight"),
    "loss.eik": (float, 0.1, "eikonal weight"),
    "loss.curv": (float, 5e-4, "curvature weight"),
    "loss.mask": (float, 0.01, "mask regularizer weight"),
    "loss.gpl": (float, 0.05, "geometry-preservation weight"),
    "loss.lps": (float, 1e-5, "color Lipschitz weight"),
    "loss.off": (float, 0.01, "off-surface penalty weight (warm-up)"),
    "loss.sphere": (float, 1.0, "sphere-initialization weight (warm-up)"),
    "loss.gpl_grad": (float, 10.0, "indicator weight on per-ray eikonal error"),
    "loss.gpl_curv": (float, 2.0, "indicator weight on per-ray curvature"),
    "loss.gpl_k": (float, 1.0, "indicator sigmoid scale"),
    "loss.gpl_c": (float, 0.0, "indicator sigmoid offset"),
    "loss.gpl_detach_phi": (bool, False, "stop indicator gradients into the SDF"),
    "loss.bimodal": (float, 0.5, "bimodality weight inside the mask regularizer"),
    "loss.off_sharpness": (float, 100.0, "off-surface exp sharpness"),
    "loss.sphere_radius": (float, 0.5, "warm-up target sphere radius"),

    "energy.power_command": (str, "", "external command printing watts"),
    "energy.constant_watts": (float, 65.0, "fallback constant power model"),
    "energy.sample_period": (float, 5.0, "seconds between power samples"),
    "energy.virtual_clock": (bool, False, "derive time from iterations (bitwise-reproducible logs)"),
    "energy.virtual_dt": (float, 0.05, "virtual seconds per iteration"),
}


class Config:
    """Validated flat configuration over SCHEMA."""

    def __init__(self, values: dict | None = None):
        self._values = {k: spec[1] for k, spec in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigurationError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(SCHEMA))}"
            )
        typ = SCHEMA[key][0]
        if isinstance(value, str) and typ is not str:
            value = _parse_value(key, typ, value)
        if typ is bool and not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected bool, got {value!r}")
        try:
            self._values[key] = typ(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: cannot convert {value!r} to {typ.__name__}") from None

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigurationError(f"unknown config key {key!r}") from None

    def as_dict(self) -> dict:
        return dict(self._values)

    def validate(self):
        if self["train.warmup_iters"] >= self["train.iters"]:
            raise ConfigurationError("train.warmup_iters must be < train.iters")
        if self["train.batch_rays"] < 1:
            raise ConfigurationError("train.batch_rays must be >= 1")
        marks = self.fd_eps_milestones()
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ConfigurationError("train.fd_eps_halve_at must be strictly ascending")
        if self["render.n_fg_samples"] < 2 or self["render.n_bg_samples"] < 2:
            raise ConfigurationError("need at least 2 samples per ray segment")
        return self

    def fd_eps_milestones(self) -> list[int]:
        raw = self["train.fd_eps_halve_at"].strip()
        if not raw:
            return []
        try:
            return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
        except ValueError:
            raise ConfigurationError(
                f"train.fd_eps_halve_at: expected comma-separated integers, got {raw!r}"
            ) from None

    def hash(self) -> str:
        canon = "\n".join(f"{k}={self._values[k]!r}" for k in sorted(self._values))
        return hashlib.sha256(canon.encode()).hexdigest()


def _parse_value(key: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    return raw


def load_config(path) -> Config:
    cfg = Config()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            cfg.set(key.strip(), value.strip())
    return cfg


def apply_overrides(cfg: Config, overrides: list[str]) -> list[str]:
    """Apply key=value overrides; returns warnings for duplicate keys."""
    warnings = []
    seen = set()
    for ov in overrides:
        if "=" not in ov:
            raise ConfigurationError(f"override {ov!r} must look like key=value")
        key, value = ov.split("=", 1)
        key = key.strip()
        if key in seen:
            warnings.append(f"duplicate override for {key}; last value wins")
        seen.add(key)
        cfg.set(key, value.strip())
    return warnings


def save_config(cfg: Config, path):
    with open(path, "w") as fh:
        for key in sorted(SCHEMA):
            fh.write(f"{key} = {cfg[key]}\n")
