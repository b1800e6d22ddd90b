"""End-to-end optimization: warm-up, main loop, schedules, checkpoints, eval.

Training is deterministic for a given (config, seed, dataset): all
randomness flows through one generator owned by the state, every batch
is planned in the main thread, worker chunks are pure functions of the
plan, and gradients are reduced in fixed chunk order. BLAS pools are
pinned to one thread inside fit/evaluate so the worker count never
changes results.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import diffmath as dm
from . import fields as fl
from . import geometry_grid as gg
from . import losses as ls
from . import masks as mk
from . import renderer as rd
from .config import Config
from .data import SceneDataset
from .errors import ConfigurationError, NumericError, UsageError
from .metrics_energy import EnergyMeter, MetricsWriter, psnr, ssim

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainState:
    cfg: Config
    dataset: SceneDataset
    store: dm.ParameterStore
    fs: fl.FieldSet
    mask_pred: mk.MaskPredictor
    rng: np.random.Generator
    meter: EnergyMeter
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    iteration: int = 0
    wall_offset: float = 0.0
    _wall_base: float = field(default_factory=time.perf_counter)

    def wall_seconds(self) -> float:
        if self.cfg["energy.virtual_clock"]:
            return self.iteration * self.cfg["energy.virtual_dt"]
        return self.wall_offset + (time.perf_counter() - self._wall_base)

    @property
    def train_image_indices(self) -> list[int]:
        return self.dataset.split_ids("train")

    def weights(self) -> ls.LossWeights:
        c = self.cfg
        return ls.LossWeights(
            rgb=c["loss.rgb"], eik=c["loss.eik"], curv=c["loss.curv"],
            mask=c["loss.mask"], gpl=c["loss.gpl"], lps=c["loss.lps"],
            off=c["loss.off"], sphere=c["loss.sphere"],
            gpl_grad=c["loss.gpl_grad"], gpl_curv=c["loss.gpl_curv"],
            gpl_k=c["loss.gpl_k"], gpl_c=c["loss.gpl_c"],
            gpl_detach_phi=c["loss.gpl_detach_phi"], bimodal=c["loss.bimodal"],
            off_sharpness=c["loss.off_sharpness"],
        )


def build_state(cfg: Config, dataset: SceneDataset) -> TrainState:
    cfg.validate()
    if not dataset.split_ids("train"):
        raise ConfigurationError("dataset has no training images")
    rng = np.random.default_rng(cfg["seed"])
    store = dm.ParameterStore()
    fg = gg.build(cfg["octree.fg_depth"], cfg["octree.feature_width"], store,
                  name="fg_grid", rng=rng)
    bg = gg.build(cfg["octree.bg_depth"], cfg["octree.feature_width"], store,
                  name="bg_grid", bounds=(-2.0, 2.0), rng=rng)
    fs = fl.FieldSet(
        store, fg, bg, n_images=dataset.n_images, rng=rng,
        geom_dim=cfg["fields.geom_dim"], appearance_dim=cfg["fields.appearance_dim"],
        dir_freqs=cfg["fields.dir_freqs"],
        sdf_hidden=(cfg["fields.sdf_hidden_width"],) * cfg["fields.sdf_hidden_layers"],
        color_hidden=(cfg["fields.color_hidden_width"],) * cfg["fields.color_hidden_layers"],
        bg_hidden=(cfg["fields.bg_hidden_width"],) * cfg["fields.bg_hidden_layers"],
        deviation_init=cfg["fields.deviation_init"],
    )
    mask_pred = mk.MaskPredictor(
        store, dataset.n_images, rng, embed_dim=cfg["mask.embed_dim"],
        hidden=(cfg["mask.hidden_width"],) * cfg["mask.hidden_layers"],
        uv_freqs=cfg["mask.uv_freqs"], init_bias=cfg["mask.init_bias"],
    )
    meter = EnergyMeter(
        power_command=cfg["energy.power_command"],
        constant_watts=cfg["energy.constant_watts"],
        sample_period=cfg["energy.sample_period"],
    )
    state = TrainState(cfg=cfg, dataset=dataset, store=store, fs=fs,
                       mask_pred=mask_pred, rng=rng, meter=meter)
    for name in store.trainable_names():
        state.adam_m[name] = np.zeros_like(store.data(name))
        state.adam_v[name] = np.zeros_like(store.data(name))
    fs.fd_eps = fd_eps_at(cfg, fg.cell_size, 0)
    return state


# -- schedules ------------------------------------------------------------


def lr_at(cfg: Config, iteration: int) -> float:
    t = min(max(iteration, 0), cfg["train.iters"]) / cfg["train.iters"]
    lo, hi = cfg["train.lr_final"], cfg["train.lr"]
    return lo + 0.5 * (hi - lo) * (1.0 + np.cos(np.pi * t))


def fd_eps_at(cfg: Config, base_cell: float, iteration: int) -> float:
    eps = base_cell
    for mark in cfg.fd_eps_milestones():
        if iteration >= mark:
            eps *= 0.5
    return eps


def adam_update(state: TrainState, lr: float):
    state.adam_t += 1
    t = state.adam_t
    bias1 = 1.0 - ADAM_B1**t
    bias2 = 1.0 - ADAM_B2**t
    for name in state.store.trainable_names():
        g = state.store.get(name).grad
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        state.store.data(name)[...] -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


# -- warm-up ----------------------------------------------------------------


def _warmup_points(rng: np.random.Generator, n: int, extent: float) -> np.ndarray:
    """Half cube-uniform, half radius-uniform (dense near the origin)."""
    half = n // 2
    cube = rng.uniform(-extent, extent, size=(half, 3))
    dirs = rng.standard_normal((n - half, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ball = dirs * rng.uniform(0.0, extent, (n - half, 1))
    return np.concatenate([cube, ball])


def warmup_step(state: TrainState) -> ls.LossBreakdown:
    """One step of sphere-initialization + eikonal (+ off-surface) fitting."""
    cfg, fs = state.cfg, state.fs
    w = state.weights()
    extent = min(0.95, 1.0 - fs.fd_eps - 1e-6)
    pts = _warmup_points(state.rng, cfg["train.warmup_points"], extent)
    state.store.zero_grads()
    der = fs.sdf_with_derivatives(pts)
    terms = {
        "sphere": ls.sphere_init(der["s"], pts, cfg["loss.sphere_radius"]),
        "eik": ls.eikonal(der["grad"]),
    }
    band = 2.0 * fs.fg_grid.cell_size
    free = np.abs(der["s"].data) > band
    if free.any() and w.off > 0.0:
        sel = dm.gather_rows(dm.reshape(der["s"], (len(pts), 1)), np.nonzero(free)[0])
        terms["off"] = ls.off_surface(dm.reshape(sel, (int(free.sum()),)),
                                      w.off_sharpness)
    loss, bd = ls.total(terms, w)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite warm-up loss: {bd.terms}")
    dm.backward(loss)
    adam_update(state, lr_at(cfg, state.iteration))
    return bd


def warmup(state: TrainState) -> TrainState:
    """Run the warm-up phase to its configured end (no-op if W = 0)."""
    while state.iteration < state.cfg["train.warmup_iters"]:
        state.iteration += 1
        state.fs.fd_eps = fd_eps_at(state.cfg, state.fs.fg_grid.cell_size, state.iteration)
        warmup_step(state)
    return state


# -- main training step ------------------------------------------------------


@dataclass
class RayBatch:
    image_indices: np.ndarray  # (B,) global dataset indices
    pixels: np.ndarray  # (B, 2) integer (u, v)
    targets: np.ndarray  # (B, 3)
    uvs: np.ndarray  # (B, 2) normalized
    origins: np.ndarray
    dirs: np.ndarray
    fg_jitter: np.ndarray
    bg_jitter: np.ndarray
    extra_points: np.ndarray  # (P, 3) uniform ball points for eik/curv


def draw_ray_batch(state: TrainState) -> RayBatch:
    cfg = state.cfg
    b = cfg["train.batch_rays"]
    rng = state.rng
    train_ids = np.asarray(state.train_image_indices)
    img = train_ids[rng.integers(0, len(train_ids), b)]
    first = state.dataset.images[train_ids[0]]
    w, h = first.camera.width, first.camera.height
    u = rng.integers(0, w, b)
    v = rng.integers(0, h, b)
    fg_jitter = rng.random((b, cfg["render.n_fg_samples"]))
    bg_jitter = rng.random((b, cfg["render.n_bg_samples"]))
    p = cfg["train.eik_points"]
    dirs = rng.standard_normal((p, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    extent = min(0.95, 1.0 - state.fs.fd_eps - 1e-6)
    radii = extent * rng.random(p) ** (1.0 / 3.0)
    extra = dirs * radii[:, None]

    origins = np.empty((b, 3))
    ray_dirs = np.empty((b, 3))
    targets = np.empty((b, 3))
    pixels = np.stack([u, v], axis=1).astype(np.float64)
    for gi in np.unique(img):
        sel = img == gi
        rec = state.dataset.images[gi]
        o, d = rd.generate_rays(rec.camera, pixels[sel])
        origins[sel] = o
        ray_dirs[sel] = d
        targets[sel] = rec.pixels[v[sel], u[sel]]
    uvs = np.stack([u / max(w - 1, 1), v / max(h - 1, 1)], axis=1)
    return RayBatch(img, pixels, targets, uvs, origins, ray_dirs,
                    fg_jitter, bg_jitter, extra)


def _slice_plan(plan: rd.RayBatchPlan, lo: int, hi: int) -> rd.RayBatchPlan:
    i0 = np.searchsorted(plan.ray_id, lo)
    i1 = np.searchsorted(plan.ray_id, hi)
    nb = plan.n_bg
    return rd.RayBatchPlan(
        origins=plan.origins[lo:hi], dirs=plan.dirs[lo:hi],
        t=plan.t[lo:hi], n_valid=plan.n_valid[lo:hi],
        pts=plan.pts[i0:i1], dst=plan.dst[i0:i1] - lo * plan.n,
        ray_id=plan.ray_id[i0:i1] - lo,
        pair_valid=plan.pair_valid[lo:hi],
        t_bg=plan.t_bg[lo:hi],
        bg_pts=plan.bg_pts.reshape(-1, nb, 3)[lo:hi].reshape(-1, 3),
        n=plan.n, n_bg=nb,
    )


def train_step(state: TrainState, batch: RayBatch | None = None) -> ls.LossBreakdown:
    """One forward/backward/update over a ray batch (drawn if not given)."""
    cfg, fs, store = state.cfg, state.fs, state.store
    w = state.weights()
    if batch is None:
        batch = draw_ray_batch(state)
    b = len(batch.origins)
    plan = rd.plan_ray_batch(
        fs, batch.origins, batch.dirs, cfg["render.n_fg_samples"],
        cfg["render.n_bg_samples"], batch.fg_jitter, batch.bg_jitter,
        bg_far=cfg["render.bg_far"],
    )
    extra = batch.extra_points
    n_points = len(plan.pts) + len(extra)
    denom_pts = float(max(n_points, 1))

    store.zero_grads()
    # color-net Lipschitz bound lives outside the ray chunks
    partials = {name: 0.0 for name in ls.TERM_ORDER}
    if w.lps > 0.0:
        lps = ls.lipschitz(fs.color_mlp)
        partials["lps"] = float(lps.data)
        dm.backward(dm.mul(lps, w.lps))

    chunk = max(1, cfg["render.chunk_rays"])
    ranges = [(lo, min(lo + chunk, b)) for lo in range(0, b, chunk)]

    def run_chunk(span):
        lo, hi = span
        leaves = store.fresh_leaves()
        sub = _slice_plan(plan, lo, hi)
        rt = rd.render_planned(fs, sub, batch.image_indices[lo:hi], leaves)
        m = state.mask_pred.predict(batch.image_indices[lo:hi], batch.uvs[lo:hi], leaves)
        eg, ec = rt.e_grad, rt.e_curv
        if w.gpl_detach_phi:
            eg, ec = eg.detach(), ec.detach()
        phi = ls.gpl_indicator(eg, ec, w)
        terms = {
            "rgb": ls.rgb_l1(rt.rgb, batch.targets[lo:hi], m, denom=b),
            "mask": mk.mask_regularizer(m, w.bimodal, denom=b),
            "gpl": ls.gpl(m, phi, denom=b),
        }
        if rt.eik_sum is not None:
            terms["eik"] = dm.mul(rt.eik_sum, 1.0 / denom_pts)
            terms["curv"] = dm.mul(rt.curv_sum, 1.0 / denom_pts)
        loss, bd = ls.total(terms, w)
        if loss.requires_grad:
            dm.backward(loss)
        grads = {n: leaves[n].grad for n in store.trainable_names()
                 if leaves[n].grad is not None}
        return grads, bd

    def run_extra(_):
        leaves = store.fresh_leaves()
        der = fs.sdf_with_derivatives(extra, leaves=leaves)
        gnorm = dm.sqrt(dm.maximum(dm.tsum(dm.square(der["grad"]), axis=1), 1e-300))
        eik_sum = dm.tsum(dm.square(dm.sub(gnorm, 1.0)))
        curv_sum = dm.tsum(dm.absolute(der["lap"]))
        terms = {"eik": dm.mul(eik_sum, 1.0 / denom_pts),
                 "curv": dm.mul(curv_sum, 1.0 / denom_pts)}
        loss, bd = ls.total(terms, w)
        if loss.requires_grad:
            dm.backward(loss)
        grads = {n: leaves[n].grad for n in store.trainable_names()
                 if leaves[n].grad is not None}
        return grads, bd

    jobs = [(run_chunk, r) for r in ranges]
    if len(extra):
        jobs.append((run_extra, None))
    threads = max(1, cfg["threads"])
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda ja: ja[0](ja[1]), jobs))
    else:
        results = [fn(arg) for fn, arg in jobs]

    for grads, bd in results:  # fixed chunk order
        store.accumulate_grads(grads)
        for name, value in bd.terms.items():
            partials[name] += value

    breakdown = ls.LossBreakdown()
    total = 0.0
    for name in ls.TERM_ORDER:
        if name in ("off", "sphere"):
            continue  # warm-up-only terms
        lam = w.term_weight(name)
        breakdown.terms[name] = partials[name]
        breakdown.weights[name] = lam
        total += lam * partials[name]
    breakdown.total = total
    if not np.isfinite(total):
        dump = {n: breakdown.terms.get(n) for n in breakdown.terms}
        raise NumericError(f"non-finite loss at iteration {state.iteration}: {dump}")

    adam_update(state, lr_at(cfg, state.iteration))
    return breakdown


# -- pruning -----------------------------------------------------------------


def prune_foreground(state: TrainState) -> int:
    """Drop leaves far from the current zero level set; record their signs."""
    fs = state.fs
    grid = fs.fg_grid
    centers = grid.leaf_centers()
    with dm.no_grad():
        s, _, _ = fs.sdf_value_batch(centers)
    band = grid.cell_size * np.sqrt(3.0) * state.cfg["octree.prune_margin"]
    keep_mask = np.abs(s.data) < band

    def keep(c, size):
        return keep_mask

    return grid.prune(keep, record_sign=s.data)


# -- fit ----------------------------------------------------------------------


def fit(cfg: Config, dataset: SceneDataset, metrics_path=None,
        checkpoint_path=None, resume_from=None,
        stop_after: int | None = None) -> TrainState:
    """Warm-up then main loop, with schedules, logging and checkpoints."""
    state = build_state(cfg, dataset)
    if resume_from is not None:
        load_state(state, resume_from)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    total_iters = cfg["train.iters"]
    warm = cfg["train.warmup_iters"]
    log_p = cfg["train.log_period"]
    ckpt_p = cfg["train.checkpoint_period"]
    prune_p = cfg["octree.prune_period"]
    limit = total_iters if stop_after is None else min(total_iters, stop_after)

    with threadpool_limits(limits=1, user_api="blas"):
        state.meter.step(state.wall_seconds())
        while state.iteration < limit:
            state.iteration += 1
            it = state.iteration
            state.fs.fd_eps = fd_eps_at(cfg, state.fs.fg_grid.cell_size, it)
            if it <= warm:
                bd = warmup_step(state)
            else:
                bd = train_step(state)
            if prune_p > 0 and it > warm and it % prune_p == 0:
                prune_foreground(state)
            if writer is not None and it % log_p == 0:
                kwh = state.meter.step(state.wall_seconds())
                writer.write_row(it, bd, kwh, state.wall_seconds())
            if checkpoint_path is not None and ckpt_p > 0 and it % ckpt_p == 0:
                save_state(state, checkpoint_path)
        if checkpoint_path is not None:
            save_state(state, checkpoint_path)
    return state


# -- evaluation ----------------------------------------------------------------


def evaluate(state: TrainState, split: str = "test", fit_appearance: bool = True) -> dict:
    """Per-image PSNR/SSIM under the left-half / right-half protocol.

    Test images get a fresh appearance embedding fitted on the left half
    of the image (all other parameters frozen), and metrics are computed
    on the right half only. Train images reuse their trained embedding
    and are scored on the full image.
    """
    cfg = state.cfg
    ids = state.dataset.split_ids(split)
    results = {"ids": [], "psnr": [], "ssim": []}
    with threadpool_limits(limits=1, user_api="blas"):
        for gi in ids:
            rec = state.dataset.images[gi]
            if split == "test" and fit_appearance:
                _fit_appearance_row(state, gi)
            img = rd.render_image(
                state.fs, rec.camera, gi, n_fg=cfg["render.n_fg_samples"],
                n_bg=cfg["render.n_bg_samples"],
                chunk=max(256, cfg["render.chunk_rays"] * 8),
                threads=max(1, cfg["threads"]),
            )["rgb"]
            if split == "test":
                half = rec.camera.width // 2
                pred, target = img[:, half:], rec.pixels[:, half:]
            else:
                pred, target = img, rec.pixels
            results["ids"].append(rec.image_id)
            results["psnr"].append(psnr(pred, target, cap=cfg["train.psnr_cap"]))
            results["ssim"].append(ssim(pred, target))
    results["mean_psnr"] = float(np.mean(results["psnr"]))
    results["mean_ssim"] = float(np.mean(results["ssim"]))
    return results


def _fit_appearance_row(state: TrainState, image_index: int):
    """Optimize one appearance row on the image's left half (rest frozen)."""
    cfg, fs, store = state.cfg, state.fs, state.store
    rec = state.dataset.images[image_index]
    w, h = rec.camera.width, rec.camera.height
    half = w // 2
    table = store.data("appearance/table")
    train_rows = table[state.train_image_indices]
    table[image_index] = train_rows.mean(axis=0)  # deterministic re-init

    local_rng = np.random.default_rng((cfg["seed"], 0xE7A1, image_index))
    uu, vv = np.meshgrid(np.arange(half), np.arange(h))
    pool = np.stack([uu.ravel(), vv.ravel()], axis=1)
    steps = cfg["train.eval_appearance_steps"]
    lr = cfg["train.eval_appearance_lr"]
    bsz = min(256, len(pool))
    m = np.zeros_like(table)
    v = np.zeros_like(table)
    for t in range(1, steps + 1):
        pick = pool[local_rng.integers(0, len(pool), bsz)]
        origins, dirs = rd.generate_rays(rec.camera, pick.astype(np.float64))
        plan = rd.plan_ray_batch(fs, origins, dirs, cfg["render.n_fg_samples"],
                                 cfg["render.n_bg_samples"],
                                 bg_far=cfg["render.bg_far"])
        leaves = store.fresh_leaves(trainable_only={"appearance/table"})
        rt = rd.render_planned(fs, plan, np.full(bsz, image_index), leaves)
        targets = rec.pixels[pick[:, 1], pick[:, 0]]
        loss = ls.rgb_l1(rt.rgb, targets)
        dm.backward(loss)
        g = leaves["appearance/table"].grad
        if g is None:
            break
        m = ADAM_B1 * m + (1 - ADAM_B1) * g
        v = ADAM_B2 * v + (1 - ADAM_B2) * g * g
        mh = m / (1 - ADAM_B1**t)
        vh = v / (1 - ADAM_B2**t)
        table[...] -= lr * mh / (np.sqrt(vh) + ADAM_EPS)


# -- checkpoint glue -------------------------------------------------------------


def save_state(state: TrainState, path):
    rng_state = state.rng.bit_generator.state
    meta = {
        "iteration": state.iteration,
        "adam_t": state.adam_t,
        "config_hash": state.cfg.hash(),
        "rng_state": json.loads(json.dumps(rng_state)),
        "cumulative_kwh": state.meter.cumulative_kwh,
        "wall_offset": state.wall_seconds(),
        "format": "sdfview-train-state",
    }
    arrays = {}
    for name in state.store.names():
        arrays[f"param/{name}"] = state.store.data(name)
    for name, arr in state.adam_m.items():
        arrays[f"adam_m/{name}"] = arr
    for name, arr in state.adam_v.items():
        arrays[f"adam_v/{name}"] = arr
    for tag, grid in (("fg", state.fs.fg_grid), ("bg", state.fs.bg_grid)):
        st = grid.structure_state()
        arrays[f"grid/{tag}/leaf_active"] = st["leaf_active"].astype(np.uint8)
        arrays[f"grid/{tag}/pruned_sign"] = st["pruned_sign"]
    ckpt.save_checkpoint(path, meta, arrays)


def load_state(state: TrainState, path):
    meta, arrays = ckpt.load_checkpoint(path)
    if meta.get("config_hash") != state.cfg.hash():
        raise ConfigurationError(
            "checkpoint was produced by a different configuration "
            f"(hash {meta.get('config_hash', '?')[:12]} != {state.cfg.hash()[:12]})"
        )
    for name in state.store.names():
        state.store.set_data(name, arrays[f"param/{name}"])
    for name in state.adam_m:
        state.adam_m[name][...] = arrays[f"adam_m/{name}"]
        state.adam_v[name][...] = arrays[f"adam_v/{name}"]
    for tag, grid in (("fg", state.fs.fg_grid), ("bg", state.fs.bg_grid)):
        grid.load_structure({
            "depth": grid.depth, "feature_width": grid.feature_width,
            "leaf_active": arrays[f"grid/{tag}/leaf_active"].astype(bool),
            "pruned_sign": arrays[f"grid/{tag}/pruned_sign"],
        })
    state.iteration = int(meta["iteration"])
    state.adam_t = int(meta["adam_t"])
    state.rng.bit_generator.state = meta["rng_state"]
    state.meter.cumulative_kwh = float(meta.get("cumulative_kwh", 0.0))
    state.wall_offset = float(meta.get("wall_offset", 0.0))
    state._wall_base = time.perf_counter()
    state.fs.fd_eps = fd_eps_at(state.cfg, state.fs.fg_grid.cell_size, state.iteration)
    return state
