"""Dataset model, loaders, and the synthetic in-the-wild scene generator.

Synthetic scenes are the oracle for every end-to-end test: an analytic
SDF composite rendered by brute-force sphere tracing with Lambertian
shading, a per-image color tint and gamma standing in for exposure and
illumination variation, and screen-space sprites standing in for
transient occluders. Sprites never touch the 3D scene, so ground-truth
static geometry, transient masks and edge maps are all exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imgio
from .errors import ValidationError
from .renderer import Camera

# -- analytic SDF expression tree ---------------------------------------


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5


@dataclass
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.3, 0.3, 0.3)


@dataclass
class Torus:
    center: tuple = (0.0, 0.0, 0.0)
    major_radius: float = 0.4
    minor_radius: float = 0.12


@dataclass
class Union:
    parts: list = field(default_factory=list)


@dataclass
class Intersection:
    parts: list = field(default_factory=list)


@dataclass
class Subtraction:
    base: object = None
    cut: object = None


def analytic_sdf(node, xs: np.ndarray) -> np.ndarray:
    """Exact SDF for primitives; min/max bound for composites."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if isinstance(node, Sphere):
        return np.linalg.norm(xs - node.center, axis=1) - node.radius
    if isinstance(node, Box):
        q = np.abs(xs - node.center) - np.asarray(node.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if isinstance(node, Torus):
        p = xs - node.center
        ring = np.hypot(np.hypot(p[:, 0], p[:, 1]) - node.major_radius, p[:, 2])
        return ring - node.minor_radius
    if isinstance(node, Union):
        return np.min([analytic_sdf(p, xs) for p in node.parts], axis=0)
    if isinstance(node, Intersection):
        return np.max([analytic_sdf(p, xs) for p in node.parts], axis=0)
    if isinstance(node, Subtraction):
        return np.maximum(analytic_sdf(node.base, xs), -analytic_sdf(node.cut, xs))
    raise ValidationError(f"unknown SDF node {type(node).__name__}")


def sdf_to_dict(node) -> dict:
    if isinstance(node, Sphere):
        return {"type": "sphere", "center": list(node.center), "radius": node.radius}
    if isinstance(node, Box):
        return {"type": "box", "center": list(node.center),
                "half_extents": list(node.half_extents)}
    if isinstance(node, Torus):
        return {"type": "torus", "center": list(node.center),
                "major_radius": node.major_radius, "minor_radius": node.minor_radius}
    if isinstance(node, Union):
        return {"type": "union", "parts": [sdf_to_dict(p) for p in node.parts]}
    if isinstance(node, Intersection):
        return {"type": "intersection", "parts": [sdf_to_dict(p) for p in node.parts]}
    if isinstance(node, Subtraction):
        return {"type": "subtraction", "base": sdf_to_dict(node.base),
                "cut": sdf_to_dict(node.cut)}
    raise ValidationError(f"unknown SDF node {type(node).__name__}")


def sdf_from_dict(d: dict):
    t = d.get("type")
    if t == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if t == "box":
        return Box(tuple(d["center"]), tuple(d["half_extents"]))
    if t == "torus":
        return Torus(tuple(d["center"]), float(d["major_radius"]), float(d["minor_radius"]))
    if t == "union":
        return Union([sdf_from_dict(p) for p in d["parts"]])
    if t == "intersection":
        return Intersection([sdf_from_dict(p) for p in d["parts"]])
    if t == "subtraction":
        return Subtraction(sdf_from_dict(d["base"]), sdf_from_dict(d["cut"]))
    raise ValidationError(f"scene.json: unknown sdf node type {t!r}")


# -- scene specification -------------------------------------------------


@dataclass
class SpriteSpec:
    kind: str  # "disk" | "rect"
    center: tuple  # (u, v) pixels
    size: float  # radius (disk) or half side (rect), pixels
    color: tuple  # rgb in [0,1]


@dataclass
class SyntheticSceneSpec:
    sdf: object
    n_train: int = 40
    n_test: int = 8
    image_size: int = 64
    fov_deg: float = 50.0
    orbit_radius: float = 2.5
    elevation_deg: tuple = (10.0, 45.0)
    tint_range: tuple = (0.6, 1.4)
    gamma_range: tuple = (0.85, 1.2)
    sprite_fraction: float = 0.5  # fraction of train images carrying sprites
    sprites_per_image: int = 1
    sprite_size_range: tuple = (0.06, 0.12)  # fraction of image size
    edge_overlap_fraction: float = 0.6
    light_dir: tuple = (0.4, -0.7, 0.59)
    seed: int = 0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_train", "n_test", "image_size", "fov_deg", "orbit_radius",
            "elevation_deg", "tint_range", "gamma_range", "sprite_fraction",
            "sprites_per_image", "sprite_size_range", "edge_overlap_fraction",
            "light_dir", "seed")}
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        d["sdf"] = sdf_to_dict(self.sdf)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        kw = {k: v for k, v in d.items() if k != "sdf"}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in kw.items()}
        return cls(sdf=sdf_from_dict(d["sdf"]), **kw)


def default_scene_spec(**overrides) -> SyntheticSceneSpec:
    """Cube-union-sphere composite: sharp edges for the edge indicator."""
    shape = Union([
        Box(center=(0.0, 0.0, -0.12), half_extents=(0.42, 0.42, 0.3)),
        Sphere(center=(0.0, 0.0, 0.28), radius=0.34),
    ])
    return SyntheticSceneSpec(sdf=shape, **overrides)


# -- dataset model --------------------------------------------------------


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # (H, W, 3) float in [0,1]
    camera: Camera
    split: str  # "train" | "test"


@dataclass
class SceneDataset:
    images: list
    bounds_radius: float = 1.0
    scene_spec: SyntheticSceneSpec | None = None

    def split_ids(self, split: str) -> list[int]:
        return [i for i, im in enumerate(self.images) if im.split == split]

    @property
    def n_images(self) -> int:
        return len(self.images)


@dataclass
class GroundTruth:
    """Oracle outputs, index-aligned with the dataset image list."""

    masks: list  # (H, W) bool, sprite coverage
    depths: list  # (H, W) float, 0 where background
    edges: list  # (H, W) bool, static geometry edges
    untinted: list  # (H, W, 3) float, before tint/gamma/sprites
    finals: list  # (H, W, 3) float, after tint/gamma/sprites (pre-quantization)
    tints: np.ndarray  # (K, 3)
    gammas: np.ndarray  # (K,)
    sprites: list  # list of SpriteSpec per image
    sdf: object  # analytic handle


# -- oracle renderer -------------------------------------------------------


def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1), position


def sphere_trace(sdf_node, origins: np.ndarray, dirs: np.ndarray,
                 t_max: float = 8.0, iters: int = 256, tol: float = 1e-6):
    """March rays against the analytic SDF. Returns (t, hit)."""
    n = len(origins)
    t = np.zeros(n)
    live = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(iters):
        if not live.any():
            break
        x = origins[live] + t[live, None] * dirs[live]
        d = analytic_sdf(sdf_node, x)
        conv = d < tol
        idx = np.nonzero(live)[0]
        hit[idx[conv]] = True
        t[live] += np.maximum(d, 0.0)
        done = conv | (t[live] > t_max)
        live[idx[done]] = False
    return t, hit


def _albedo(xs: np.ndarray) -> np.ndarray:
    """Smooth spatial texture, componentwise in [0.05, 0.65]."""
    r = 0.35 + 0.3 * np.sin(3.0 * xs[:, 0]) * np.cos(2.0 * xs[:, 1])
    g = 0.35 + 0.3 * np.sin(2.0 * xs[:, 1] + 1.3) * np.cos(3.0 * xs[:, 2])
    b = 0.35 + 0.3 * np.sin(2.5 * xs[:, 2] + 2.1) * np.cos(2.5 * xs[:, 0])
    return np.clip(np.stack([r, g, b], axis=1), 0.05, 0.65)


def _environment(dirs: np.ndarray) -> np.ndarray:
    """Smooth directional background, componentwise in (0, 0.7)."""
    z = dirs[:, 2]
    base = 0.32 + 0.22 * z
    warm = 0.05 * dirs[:, 0]
    return np.clip(np.stack([base + warm, base, base - warm + 0.04], axis=1), 0.02, 0.68)


def oracle_render(spec: SyntheticSceneSpec, camera: Camera):
    """Sphere-traced image: (untinted rgb, depth, hit mask, normals)."""
    w, h = camera.width, camera.height
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
    from .renderer import generate_rays

    origins, dirs = generate_rays(camera, pix)
    t, hit = sphere_trace(spec.sdf, origins, dirs)
    rgb = _environment(dirs)
    normals = np.zeros_like(dirs)
    if hit.any():
        x = origins[hit] + t[hit, None] * dirs[hit]
        eps = 1e-5
        n = np.zeros_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            n[:, k] = analytic_sdf(spec.sdf, x + e) - analytic_sdf(spec.sdf, x - e)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        light = np.asarray(spec.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = 0.25 + 0.75 * np.maximum(0.0, n @ light)
        rgb[hit] = _albedo(x) * lambert[:, None]
        normals[hit] = n
    depth = np.where(hit, t, 0.0)
    return (rgb.reshape(h, w, 3), depth.reshape(h, w), hit.reshape(h, w),
            normals.reshape(h, w, 3))


def edge_mask(depth: np.ndarray, hit: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Static-geometry edge pixels: silhouettes, depth jumps, normal creases."""
    edges = np.zeros_like(hit)
    for axis in (0, 1):
        sil = np.diff(hit.astype(np.int8), axis=axis) != 0
        dj = (np.abs(np.diff(depth, axis=axis)) > 0.05) & hit[:-1, :] if axis == 0 else \
             (np.abs(np.diff(depth, axis=axis)) > 0.05) & hit[:, :-1]
        ncos = (normals[1:, :] * normals[:-1, :]).sum(-1) if axis == 0 else \
               (normals[:, 1:] * normals[:, :-1]).sum(-1)
        crease = (ncos < np.cos(np.deg2rad(35.0)))
        crease &= hit[1:, :] & hit[:-1, :] if axis == 0 else hit[:, 1:] & hit[:, :-1]
        comb = sil | dj | crease
        if axis == 0:
            edges[:-1, :] |= comb
            edges[1:, :] |= comb
        else:
            edges[:, :-1] |= comb
            edges[:, 1:] |= comb
    return ndimage.binary_dilation(edges, iterations=1)


def _apply_appearance(rgb: np.ndarray, tint: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(np.clip(rgb * tint, 0.0, 1.0), gamma)


def _invert_appearance(final: np.ndarray, tint: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(np.clip(final, 0.0, 1.0), 1.0 / gamma) / tint


def _composite_sprites(img: np.ndarray, sprites: list) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape[:2]
    out = img.copy()
    cover = np.zeros((h, w), dtype=bool)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    for sp in sprites:
        cu, cv = sp.center
        if sp.kind == "disk":
            m = (uu - cu) ** 2 + (vv - cv) ** 2 <= sp.size**2
        elif sp.kind == "rect":
            m = (np.abs(uu - cu) <= sp.size) & (np.abs(vv - cv) <= sp.size)
        else:
            raise ValidationError(f"unknown sprite kind {sp.kind!r}")
        out[m] = np.asarray(sp.color)
        cover |= m
    return out, cover


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[SceneDataset, GroundTruth]:
    """Render the full dataset plus its ground-truth bundle, deterministically."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    f = size / (2.0 * np.tan(np.deg2rad(spec.fov_deg) / 2.0))
    c = (size - 1) / 2.0
    k = spec.n_train + spec.n_test
    azim = np.linspace(0.0, 2.0 * np.pi, k, endpoint=False) + rng.uniform(0, 0.1, k)
    elev = np.deg2rad(rng.uniform(*spec.elevation_deg, k))
    order = rng.permutation(k)
    azim, elev = azim[order], elev[order]

    tints = rng.uniform(*spec.tint_range, size=(k, 3))
    gammas = rng.uniform(*spec.gamma_range, size=k)
    n_sprited = int(round(spec.sprite_fraction * spec.n_train))
    sprited = set(rng.choice(spec.n_train, size=n_sprited, replace=False).tolist())

    images, masks, depths, edges_l, untinted_l, finals, sprites_l = [], [], [], [], [], [], []
    for i in range(k):
        split = "train" if i < spec.n_train else "test"
        pos = spec.orbit_radius * np.array([
            np.cos(elev[i]) * np.cos(azim[i]),
            np.cos(elev[i]) * np.sin(azim[i]),
            np.sin(elev[i]),
        ])
        rot, tr = look_at_pose(pos)
        cam = Camera(fx=f, fy=f, cx=c, cy=c, rotation=rot, translation=tr,
                     width=size, height=size)
        untinted, depth, hit, normals = oracle_render(spec, cam)
        final = _apply_appearance(untinted, tints[i], gammas[i])
        edge = edge_mask(depth, hit, normals)

        sprites = []
        if split == "train" and i in sprited:
            edge_px = np.argwhere(edge)  # (n, [v, u])
            for _ in range(spec.sprites_per_image):
                on_edge = rng.random() < spec.edge_overlap_fraction and len(edge_px) > 0
                if on_edge:
                    v, u = edge_px[rng.integers(len(edge_px))]
                else:
                    u, v = rng.integers(0, size, 2)
                radius = rng.uniform(*spec.sprite_size_range) * size
                color = rng.uniform(0.1, 0.9, 3)
                kind = "disk" if rng.random() < 0.5 else "rect"
                sprites.append(SpriteSpec(kind, (int(u), int(v)), float(radius),
                                          tuple(color)))
        final_sprited, cover = _composite_sprites(final, sprites)
        # store on the 8-bit grid so disk round-trips are exact
        quantized = np.round(np.clip(final_sprited, 0.0, 1.0) * 255.0) / 255.0

        image_id = f"{split}_{i if split == 'train' else i - spec.n_train:03d}"
        images.append(ImageRecord(image_id, quantized, cam, split))
        masks.append(cover)
        depths.append(depth)
        edges_l.append(edge)
        untinted_l.append(untinted)
        finals.append(final_sprited)
        sprites_l.append(sprites)

    ds = SceneDataset(images=images, bounds_radius=1.0, scene_spec=spec)
    gt = GroundTruth(masks=masks, depths=depths, edges=edges_l, untinted=untinted_l,
                     finals=finals, tints=tints, gammas=gammas, sprites=sprites_l,
                     sdf=spec.sdf)
    return ds, gt


# -- persistence -----------------------------------------------------------


def save_dataset(ds: SceneDataset, path, gt: GroundTruth | None = None):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    cams = []
    for im in ds.images:
        imgio.save_png_rgb(os.path.join(path, "images", f"{im.image_id}.png"), im.pixels)
        cams.append({
            "id": im.image_id,
            "fx": im.camera.fx, "fy": im.camera.fy,
            "cx": im.camera.cx, "cy": im.camera.cy,
            "width": im.camera.width, "height": im.camera.height,
            "rotation": im.camera.rotation.tolist(),
            "translation": im.camera.translation.tolist(),
            "split": im.split,
        })
    with open(os.path.join(path, "cameras.json"), "w") as fh:
        json.dump({"images": cams}, fh, indent=1)
    scene = {"bounds_radius": ds.bounds_radius}
    if ds.scene_spec is not None:
        scene["synthetic_spec"] = ds.scene_spec.to_dict()
    with open(os.path.join(path, "scene.json"), "w") as fh:
        json.dump(scene, fh, indent=1)
    if gt is not None:
        for sub in ("masks", "depth", "edges"):
            os.makedirs(os.path.join(path, "gt", sub), exist_ok=True)
        for im, mask, depth, edge in zip(ds.images, gt.masks, gt.depths, gt.edges):
            imgio.save_png_gray(os.path.join(path, "gt", "masks", f"{im.image_id}.png"),
                                mask.astype(np.float64))
            imgio.write_rawmap(os.path.join(path, "gt", "depth", f"{im.image_id}.raw"), depth)
            imgio.save_png_gray(os.path.join(path, "gt", "edges", f"{im.image_id}.png"),
                                edge.astype(np.float64))


def load_dataset(path) -> SceneDataset:
    """Load and validate the documented directory layout."""
    cam_path = os.path.join(path, "cameras.json")
    if not os.path.isfile(cam_path):
        raise ValidationError(f"{cam_path}: missing cameras manifest")
    with open(cam_path) as fh:
        manifest = json.load(fh)
    entries = manifest.get("images")
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{cam_path}: field 'images' must be a nonempty list")

    seen = set()
    images = []
    for e in entries:
        iid = e.get("id")
        if iid in seen:
            raise ValidationError(f"{cam_path}: duplicate image id {iid!r}")
        seen.add(iid)
        if e.get("split") not in ("train", "test"):
            raise ValidationError(f"{cam_path}: image {iid!r} field 'split' must be train|test")
        img_path = os.path.join(path, "images", f"{iid}.png")
        if not os.path.isfile(img_path):
            raise ValidationError(f"{cam_path}: image {iid!r} file missing: {img_path}")
        try:
            cam = Camera(
                fx=float(e["fx"]), fy=float(e["fy"]), cx=float(e["cx"]), cy=float(e["cy"]),
                rotation=np.asarray(e["rotation"], dtype=np.float64),
                translation=np.asarray(e["translation"], dtype=np.float64),
                width=int(e["width"]), height=int(e["height"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"{cam_path}: image {iid!r} field 'rotation': {exc}") from None
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{cam_path}: image {iid!r} missing camera field {exc}") from None
        pixels = imgio.load_png_rgb(img_path)
        if pixels.shape[:2] != (cam.height, cam.width):
            raise ValidationError(
                f"{img_path}: size {pixels.shape[1]}x{pixels.shape[0]} does not match "
                f"manifest {cam.width}x{cam.height}"
            )
        images.append(ImageRecord(iid, pixels, cam, e["split"]))

    bounds = 1.0
    spec = None
    scene_path = os.path.join(path, "scene.json")
    if os.path.isfile(scene_path):
        with open(scene_path) as fh:
            scene = json.load(fh)
        bounds = float(scene.get("bounds_radius", 1.0))
        if "synthetic_spec" in scene:
            spec = SyntheticSceneSpec.from_dict(scene["synthetic_spec"])
    return SceneDataset(images=images, bounds_radius=bounds, scene_spec=spec)
