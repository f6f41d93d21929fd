"""Progressive two-stage trainer.

Stage 1 fits surfels only (geometry and color) with adaptive density
control; error-based selection then spawns 3D children on the worst-
rendered surfels; stage 2 fine-tunes the children plus the surfel colors
and the perturbation tables while the surfel geometry stays frozen.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, RenderError, SceneError
from .losses import LossWeights, total_stage1, total_stage2
from .optim import Adam
from .rasterizer.backward import (DensifyStats, Upstream,
                                  accumulate_densify_stats, backward)
from .rasterizer.forward import render
from .rigging import FrameCache, PerturbationField
from .rotations import normalize_quat, quat_to_mat
from .scene import MixedScene, init_scene, spawn_children
from .selection import run_selection, save_selection
from .serialization import save_perturbation, save_scene

PSNR_EVAL_CAP = 8   # views averaged when evaluating PSNR during training


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    lr_position: float = 1.6e-4      # scaled by scene extent
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_perturb: float = 1e-4
    position_lr_decay: float = 1.0   # exponential factor reached at stage end
    densify_interval: int = 100
    densify_start: int = 150
    densify_stop_frac: float = 0.8
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    selection_n: int = 16
    selection_k: int = 32
    sh_degree: int = 1
    tile_size: int = 16
    background: str = "black"
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    disable_children: bool = False       # "no 3D Gaussians" ablation
    disable_perturbation: bool = False   # "no learnable offsets" ablation
    disable_dis_loss: bool = False       # "no distance clamp" ablation
    per_frame_perturbation: bool = False
    train_surfel_opacity_stage2: bool = False

    def validate(self):
        if self.stage1_steps <= 0:
            raise ConfigError("stage1_steps must be > 0")
        if self.stage2_steps < 0:
            raise ConfigError("stage2_steps must be >= 0")
        if self.selection_n < 1:
            raise ConfigError("selection needs n >= 1 iterations")
        if self.selection_k < 0 or self.densify_grad_threshold < 0:
            raise ConfigError("thresholds must be >= 0")
        if not (0 <= self.sh_degree <= 3):
            raise ConfigError("sh_degree must be in 0..3")
        self.weights.validate()
        return self

    def bg(self):
        if isinstance(self.background, str):
            if self.background == "black":
                return np.zeros(3)
            if self.background == "white":
                return np.ones(3)
            raise ConfigError(f"unknown background {self.background!r}")
        return np.asarray(self.background, dtype=np.float64)


STAGE1_LR_GROUPS = {"s_mu": "pos", "s_rot": "rot", "s_scale": "scale",
                    "s_opacity": "opacity", "s_sh": "sh", "p2d": "perturb"}
STAGE2_LR_GROUPS = {"c_mu": "pos", "c_rot": "rot", "c_scale": "scale",
                    "c_opacity": "opacity", "c_sh": "sh", "s_sh": "sh",
                    "p2d": "perturb", "p3d": "perturb"}


def _param_table(scene, perturb):
    return {"s_mu": scene.s_mu, "s_rot": scene.s_rot, "s_scale": scene.s_scale,
            "s_opacity": scene.s_opacity, "s_sh": scene.s_sh,
            "c_mu": scene.c_mu, "c_rot": scene.c_rot, "c_scale": scene.c_scale,
            "c_opacity": scene.c_opacity, "c_sh": scene.c_sh,
            "p2d": perturb.p2d_base, "p3d": perturb.p3d_base}


def _lr(cfg, kind, extent, step, total):
    base = {"pos": cfg.lr_position * extent, "rot": cfg.lr_rotation,
            "scale": cfg.lr_scale, "opacity": cfg.lr_opacity,
            "sh": cfg.lr_sh, "perturb": cfg.lr_perturb}[kind]
    if kind == "pos" and cfg.position_lr_decay != 1.0 and total > 1:
        base *= cfg.position_lr_decay ** (step / (total - 1))
    return base


def psnr(a, b):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0.0 else -10.0 * np.log10(mse)


def evaluate_psnr(scene, perturb, dataset, cfg, mode, frame_cache=None):
    """Mean PSNR over (a cap of) the dataset views."""
    vals = []
    for rec in dataset.records[:PSNR_EVAL_CAP]:
        t, cam, truth = dataset.load(rec)
        frames = frame_cache.get(t) if frame_cache else None
        out = render(scene, perturb, t, cam, mode=mode, tile_size=cfg.tile_size,
                     background=cfg.bg(), frames=frames, keep_cache=False,
                     workers=cfg.workers)
        vals.append(psnr(out.color, truth))
    return float(np.mean(vals))


def _abort_dump(outdir, scene, step, stage):
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, f"abort_{stage}_step{step}.mxgs")
        save_scene(path, scene)
        return path
    return None


class _CsvLog:
    def __init__(self, path, fields):
        self.rows = []
        self.path = path
        self.fields = fields
        if path:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=fields)
            self._writer.writeheader()
        else:
            self._writer = None

    def append(self, **row):
        self.rows.append(row)
        if self._writer:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self):
        if self._writer:
            self._fh.close()


# ----------------------------------------------------------------------
def _densify_and_prune(scene, perturb, opt, stats, cfg, extent):
    """Clone small high-gradient surfels, split large ones along their
    major tangential axis, prune low opacity. Offspring inherit the
    parent's triangle binding and perturbation rows; every triangle keeps
    at least one surfel. Fully deterministic (splits are symmetric
    offsets, not samples)."""
    from .scene import sigmoid

    mean_grad = stats.mean_grad()
    hot = mean_grad >= cfg.densify_grad_threshold
    frames = FrameCache(scene.mesh).get(0)   # canonical pose sizes the rule
    lam = frames[1][scene.s_parent_tri]
    world = lam * np.exp(scene.s_scale).max(axis=1)
    big = world > cfg.percent_dense * extent
    clone_rows = np.nonzero(hot & ~big)[0]
    split_rows = np.nonzero(hot & big)[0]

    def grow(rows, mu, scale):
        if not len(rows):
            return
        for name, arr in _param_table(scene, perturb).items():
            if name.startswith("c_") or name == "p3d":
                continue
            opt.grow_rows(name, parent_rows=rows)
        scene.s_mu = np.concatenate([scene.s_mu, mu])
        scene.s_rot = np.concatenate([scene.s_rot, scene.s_rot[rows]])
        scene.s_scale = np.concatenate([scene.s_scale, scale])
        scene.s_opacity = np.concatenate([scene.s_opacity, scene.s_opacity[rows]])
        scene.s_sh = np.concatenate([scene.s_sh, scene.s_sh[rows]])
        scene.s_parent_tri = np.concatenate([scene.s_parent_tri,
                                             scene.s_parent_tri[rows]])
        scene.s_child = np.concatenate([scene.s_child,
                                        np.full(len(rows), -1, dtype=np.int64)])
        perturb.grow_surfels(rows)

    # clones keep the parent's parameters verbatim
    grow(clone_rows, scene.s_mu[clone_rows], scene.s_scale[clone_rows])

    # splits tile the parent's footprint: two offspring at +-0.6 sigma
    # along the major tangential axis, major scale halved
    if len(split_rows):
        act = np.exp(scene.s_scale[split_rows])
        major = np.argmax(act, axis=1)
        new_scale = scene.s_scale[split_rows].copy()
        new_scale[np.arange(len(split_rows)), major] -= np.log(2.0)
        R_l = quat_to_mat(normalize_quat(scene.s_rot[split_rows]))
        axis = R_l[np.arange(len(split_rows)), :, major]
        offset = 0.6 * act[np.arange(len(split_rows)), major][:, None] * axis
        for sgn in (1.0, -1.0):
            grow(split_rows, scene.s_mu[split_rows] + sgn * offset, new_scale)

    # prune: split originals go away, low opacity goes away, but never a
    # triangle's last surfel
    removed_split = np.zeros(scene.n_surfels, dtype=bool)
    removed_split[split_rows] = True
    keep = ~removed_split & (sigmoid(scene.s_opacity) >= cfg.prune_opacity)
    for tri in np.unique(scene.s_parent_tri):
        rows = np.nonzero(scene.s_parent_tri == tri)[0]
        if not keep[rows].any():
            pool = rows[~removed_split[rows]]
            if not len(pool):
                pool = rows
            keep[pool[np.argmax(scene.s_opacity[pool])]] = True
    for name in _param_table(scene, perturb):
        if name.startswith("c_") or name == "p3d":
            continue
        opt.prune_rows(name, keep)
    scene.s_mu = scene.s_mu[keep]
    scene.s_rot = scene.s_rot[keep]
    scene.s_scale = scene.s_scale[keep]
    scene.s_opacity = scene.s_opacity[keep]
    scene.s_sh = scene.s_sh[keep]
    scene.s_parent_tri = scene.s_parent_tri[keep]
    scene.s_child = scene.s_child[keep]
    perturb.prune_surfels(keep)
    return DensifyStats.zeros(scene.n_surfels)


def train_stage1(scene, dataset, cfg: TrainConfig, perturb=None, log_path=None,
                 outdir=None):
    """Stage 1: 2D-only rendering, full surfel training, density control."""
    cfg.validate()
    if scene.n_children:
        raise SceneError("stage 1 expects a scene without children")
    if perturb is None:
        perturb = PerturbationField.zeros_for(scene,
                                              per_frame=cfg.per_frame_perturbation)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam()
    stats = DensifyStats.zeros(scene.n_surfels)
    extent = scene.mesh.extent()
    frame_cache = FrameCache(scene.mesh)
    bg = cfg.bg()
    want_trace = cfg.weights.lambda3 > 0
    densify_stop = int(cfg.densify_stop_frac * cfg.stage1_steps)
    log = _CsvLog(log_path, ["step", "l1", "dssim", "rgb", "pos", "sca",
                             "dist", "normal", "total", "n_surfels"])
    try:
        for step in range(1, cfg.stage1_steps + 1):
            t, cam, truth = dataset.load(dataset.records[
                int(rng.integers(len(dataset.records)))])
            out = render(scene, None if cfg.disable_perturbation else perturb,
                         t, cam, mode="stage1", tile_size=cfg.tile_size,
                         background=bg, want_trace=want_trace,
                         frames=frame_cache.get(t), workers=cfg.workers)
            res = total_stage1(out, truth, scene, cfg.weights)
            if not np.isfinite(res.total):
                dump = _abort_dump(outdir, scene, step, "stage1")
                raise RenderError(f"non-finite stage-1 loss at step {step}"
                                  + (f"; state dumped to {dump}" if dump else ""))
            grads = backward(scene, out, res.upstream, stage="stage1",
                             workers=cfg.workers)
            grads.s_mu += res.direct["s_mu"]
            grads.s_scale += res.direct["s_scale"]
            accumulate_densify_stats(stats, grads)

            table = _param_table(scene, perturb)
            gtable = grads.param_arrays()
            for name, kind in STAGE1_LR_GROUPS.items():
                if name == "p2d" and cfg.disable_perturbation:
                    continue
                opt.step(name, table[name], gtable[name],
                         _lr(cfg, kind, extent, step, cfg.stage1_steps))
            scene.s_rot = normalize_quat(scene.s_rot)

            if (cfg.densify_interval > 0 and cfg.densify_start <= step <= densify_stop
                    and step % cfg.densify_interval == 0):
                stats = _densify_and_prune(scene, perturb, opt, stats, cfg,
                                           extent)
                scene.validate()
            log.append(step=step, l1=res.parts["l1"], dssim=res.parts["dssim"],
                       rgb=res.parts["rgb"], pos=res.parts["pos"],
                       sca=res.parts["sca"], dist=res.parts["dist"],
                       normal=res.parts["normal"], total=res.total,
                       n_surfels=scene.n_surfels)
            if (cfg.checkpoint_every and outdir
                    and step % cfg.checkpoint_every == 0):
                save_scene(os.path.join(outdir, f"stage1_step{step:06d}.mxgs"),
                           scene)
    finally:
        log.close()
    return scene, perturb, log.rows


def train_stage2(scene, dataset, cfg: TrainConfig, perturb, log_path=None,
                 outdir=None):
    """Stage 2: mixed rendering; children, surfel SH and the perturbation
    tables train, surfel geometry stays frozen (hash-verified)."""
    cfg.validate()
    geo_before = scene.geometry_digest()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam()
    extent = scene.mesh.extent()
    frame_cache = FrameCache(scene.mesh)
    bg = cfg.bg()
    weights = cfg.weights
    if cfg.disable_dis_loss:
        weights = replace(weights, lambda5=0.0)
    log = _CsvLog(log_path, ["step", "l1", "dssim", "rgb", "dis", "total",
                             "n_children"])
    if cfg.disable_children:
        groups = {"s_sh": "sh"}     # ablation path: color refinement only
    else:
        groups = dict(STAGE2_LR_GROUPS)
    if cfg.train_surfel_opacity_stage2:
        groups["s_opacity"] = "opacity"
    try:
        for step in range(1, cfg.stage2_steps + 1):
            t, cam, truth = dataset.load(dataset.records[
                int(rng.integers(len(dataset.records)))])
            use_perturb = None if cfg.disable_perturbation else perturb
            out = render(scene, use_perturb, t, cam, mode="mixed",
                         tile_size=cfg.tile_size, background=bg,
                         frames=frame_cache.get(t), workers=cfg.workers)
            p3d = (perturb.offsets_3d(t) if not cfg.disable_perturbation
                   else np.zeros((scene.n_children, 3)))
            res = total_stage2(out, truth, scene, p3d, weights)
            if not np.isfinite(res.total):
                dump = _abort_dump(outdir, scene, step, "stage2")
                raise RenderError(f"non-finite stage-2 loss at step {step}"
                                  + (f"; state dumped to {dump}" if dump else ""))
            grads = backward(scene, out, res.upstream, stage="stage2",
                             workers=cfg.workers)
            if cfg.train_surfel_opacity_stage2:
                # config override of the color-only rule: recompute opacity
                # gradients without the stage mask
                full = backward(scene, out, res.upstream, stage=None,
                                workers=cfg.workers)
                grads.s_opacity[:] = full.s_opacity
            grads.c_mu += res.direct["c_mu"]
            grads.p3d += res.direct["p3d"]

            table = _param_table(scene, perturb)
            gtable = grads.param_arrays()
            for name, kind in groups.items():
                if name in ("p2d", "p3d") and cfg.disable_perturbation:
                    continue
                if table[name].size == 0:
                    continue
                opt.step(name, table[name], gtable[name],
                         _lr(cfg, kind, extent, step, cfg.stage2_steps))
            scene.c_rot = normalize_quat(scene.c_rot) if scene.n_children \
                else scene.c_rot
            log.append(step=step, l1=res.parts["l1"], dssim=res.parts["dssim"],
                       rgb=res.parts["rgb"], dis=res.parts["dis"],
                       total=res.total, n_children=scene.n_children)
            if (cfg.checkpoint_every and outdir
                    and step % cfg.checkpoint_every == 0):
                save_scene(os.path.join(outdir, f"stage2_step{step:06d}.mxgs"),
                           scene)
    finally:
        log.close()
    if scene.geometry_digest() != geo_before:
        raise SceneError("stage 2 mutated frozen surfel geometry")
    return scene, perturb, log.rows


def run_pipeline(cfg: TrainConfig, dataset, outdir):
    """Full progressive run: stage 1, selection, child spawning, stage 2.

    Every artifact is a deterministic function of (config, seed, data)."""
    cfg.validate()
    os.makedirs(outdir, exist_ok=True)
    scene = init_scene(dataset.mesh(), cfg.sh_degree)
    perturb = PerturbationField.zeros_for(scene,
                                          per_frame=cfg.per_frame_perturbation)
    scene, perturb, _ = train_stage1(
        scene, dataset, cfg, perturb,
        log_path=os.path.join(outdir, "stage1.csv"), outdir=outdir)
    save_scene(os.path.join(outdir, "scene_stage1.mxgs"), scene)
    save_perturbation(os.path.join(outdir, "perturbation_stage1.mxpf"), perturb)

    if not cfg.disable_children:
        rng = np.random.default_rng(cfg.seed + 2)

        def sampler(r):
            rec = dataset.records[int(r.integers(len(dataset.records)))]
            return dataset.load(rec)

        U = run_selection(scene, None if cfg.disable_perturbation else perturb,
                          sampler, cfg.selection_n, cfg.selection_k, rng=rng,
                          tile_size=cfg.tile_size, background=cfg.bg(),
                          workers=cfg.workers)
        save_selection(os.path.join(outdir, "selection.txt"), U)
        spawn_children(scene, U)
        perturb.grow_children(scene.n_children)

    if cfg.stage2_steps > 0:
        scene, perturb, _ = train_stage2(
            scene, dataset, cfg, perturb,
            log_path=os.path.join(outdir, "stage2.csv"), outdir=outdir)
    save_scene(os.path.join(outdir, "scene_final.mxgs"), scene)
    save_perturbation(os.path.join(outdir, "perturbation.mxpf"), perturb)
    return {"scene_stage1": os.path.join(outdir, "scene_stage1.mxgs"),
            "scene_final": os.path.join(outdir, "scene_final.mxgs"),
            "perturbation": os.path.join(outdir, "perturbation.mxpf"),
            "selection": os.path.join(outdir, "selection.txt")
                         if not cfg.disable_children else None,
            "scene": scene, "perturb": perturb}
