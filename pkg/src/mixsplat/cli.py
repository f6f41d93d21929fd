"""Command-line entry points.

Subcommands: init, train, select, render, extract-mesh, gradcheck,
metrics, make-synthetic. Configuration comes from a TOML file with CLI
flags taking precedence. Exit status 0 on success, 1 on a categorized
pipeline error, 2 on bad usage.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .errors import MixsplatError


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _config_from(args):
    from .losses import LossWeights
    from .training import TrainConfig

    cfg = TrainConfig()
    if getattr(args, "config", None):
        data = _load_toml(args.config)
        weights = data.pop("weights", {})
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise SystemExit(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        cfg.weights = LossWeights(**weights)
    for k in vars(cfg):
        override = getattr(args, k, None)
        if override is not None:
            setattr(cfg, k, override)
    cfg.validate()
    return cfg


def _add_config_flags(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage1-steps", dest="stage1_steps", type=int)
    p.add_argument("--stage2-steps", dest="stage2_steps", type=int)
    p.add_argument("--selection-n", dest="selection_n", type=int)
    p.add_argument("--selection-k", dest="selection_k", type=int)
    p.add_argument("--sh-degree", dest="sh_degree", type=int)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--background")
    p.add_argument("--workers", type=int)
    p.add_argument("--disable-children", dest="disable_children",
                   action="store_const", const=True)
    p.add_argument("--disable-perturbation", dest="disable_perturbation",
                   action="store_const", const=True)
    p.add_argument("--disable-dis-loss", dest="disable_dis_loss",
                   action="store_const", const=True)


def cmd_init(args):
    from .mesh import load_rigged_mesh
    from .scene import init_scene
    from .serialization import save_scene

    mesh = load_rigged_mesh(args.mesh, args.frames)
    scene = init_scene(mesh, args.sh_degree)
    save_scene(args.out, scene)
    print(f"initialized {scene.n_surfels} surfels -> {args.out}")
    return 0


def cmd_train(args):
    from .datasets import TrainDataset
    from .training import run_pipeline, train_stage1, train_stage2
    from .rigging import PerturbationField
    from .scene import init_scene, spawn_children
    from .selection import load_selection
    from .serialization import (load_perturbation, load_scene,
                                save_perturbation, save_scene)

    cfg = _config_from(args)
    dataset = TrainDataset.open(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.stage == "all":
        run_pipeline(cfg, dataset, args.out)
    elif args.stage == "1":
        scene = init_scene(dataset.mesh(), cfg.sh_degree)
        perturb = PerturbationField.zeros_for(
            scene, per_frame=cfg.per_frame_perturbation)
        scene, perturb, _ = train_stage1(
            scene, dataset, cfg, perturb,
            log_path=os.path.join(args.out, "stage1.csv"), outdir=args.out)
        save_scene(os.path.join(args.out, "scene_stage1.mxgs"), scene)
        save_perturbation(os.path.join(args.out, "perturbation.mxpf"), perturb)
    else:
        if not args.scene:
            raise SystemExit("--stage 2 needs --scene from stage 1")
        scene = load_scene(args.scene, dataset.mesh())
        perturb = (load_perturbation(args.perturbation) if args.perturbation
                   else PerturbationField.zeros_for(
                       scene, per_frame=cfg.per_frame_perturbation))
        if args.selection and not cfg.disable_children:
            spawn_children(scene, load_selection(args.selection))
            perturb.grow_children(scene.n_children)
        scene, perturb, _ = train_stage2(
            scene, dataset, cfg, perturb,
            log_path=os.path.join(args.out, "stage2.csv"), outdir=args.out)
        save_scene(os.path.join(args.out, "scene_final.mxgs"), scene)
        save_perturbation(os.path.join(args.out, "perturbation.mxpf"), perturb)
    print(f"artifacts written to {args.out}")
    return 0


def cmd_select(args):
    from .datasets import TrainDataset
    from .selection import run_selection, save_selection
    from .serialization import load_perturbation, load_scene

    cfg = _config_from(args)
    dataset = TrainDataset.open(args.data)
    scene = load_scene(args.scene, dataset.mesh())
    perturb = load_perturbation(args.perturbation) if args.perturbation else None
    rng = np.random.default_rng(cfg.seed)

    def sampler(r):
        rec = dataset.records[int(r.integers(len(dataset.records)))]
        return dataset.load(rec)

    U = run_selection(scene, perturb, sampler, cfg.selection_n,
                      cfg.selection_k, rng=rng, tile_size=cfg.tile_size,
                      background=cfg.bg(), workers=cfg.workers)
    save_selection(args.out, U)
    print(f"selected {len(U)} surfels -> {args.out}")
    return 0


def cmd_render(args):
    from .camera import Camera
    from .imageio import save_pfm, save_png
    from .mesh import load_rigged_mesh
    from .rasterizer.forward import render
    from .serialization import load_perturbation, load_scene

    mesh = load_rigged_mesh(args.mesh, args.frames)
    scene = load_scene(args.scene, mesh)
    perturb = load_perturbation(args.perturbation) if args.perturbation else None
    cam = Camera.load(args.camera)
    bg = {"black": (0, 0, 0), "white": (1, 1, 1)}[args.background]
    out = render(scene, perturb, args.frame, cam, mode=args.mode,
                 tile_size=args.tile_size, background=bg, workers=args.workers)
    save_png(args.out, out.color)
    if args.depth:
        save_pfm(args.depth, out.median_depth)
    if args.alpha:
        save_pfm(args.alpha, out.alpha)
    print(f"rendered frame {args.frame} -> {args.out}")
    return 0


def cmd_extract_mesh(args):
    from .datasets import TrainDataset
    from .meshing import TsdfVolume, extract_mesh, render_fusion_inputs, save_ply, tsdf_fuse
    from .serialization import load_perturbation, load_scene

    dataset = TrainDataset.open(args.data)
    scene = load_scene(args.scene, dataset.mesh())
    perturb = load_perturbation(args.perturbation) if args.perturbation else None
    cams = []
    frame = None
    for rec in dataset.records:
        t, cam, _ = dataset.load(rec)
        frame = t if frame is None else frame
        cams.append(cam)
    maps = render_fusion_inputs(scene, perturb, frame or 0, cams,
                                mode=args.mode, workers=args.workers)
    mesh = dataset.mesh()
    center = mesh.vertices_canonical.mean(axis=0)
    extent = 1.2 * mesh.extent()
    volume = TsdfVolume.around(center, extent, args.resolution)
    volume = tsdf_fuse(maps, volume, trunc_voxels=args.trunc_voxels)
    out = extract_mesh(volume, min_component_faces=args.min_component)
    save_ply(args.out, out)
    print(f"extracted {len(out.vertices)} vertices, "
          f"{len(out.triangles)} faces -> {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    stages = {"1": ("stage1",), "2": ("stage2",),
              "both": ("stage1", "stage2")}[args.stage]
    report = run_gradcheck(seed=args.seed, n_scenes=args.scenes, stages=stages)
    text = "\n".join(report.lines())
    print(text)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text + "\n")
    return 0 if report.passed else 1


def cmd_metrics(args):
    from .imageio import load_png
    from .metrics import compute_metrics, format_metrics

    def load_dir(d):
        names = sorted(n for n in os.listdir(d) if n.endswith(".png"))
        return [load_png(os.path.join(d, n)) for n in names]

    renders, truths = load_dir(args.renders), load_dir(args.truths)
    rows, mean = compute_metrics(renders, truths)
    print(format_metrics(rows, mean))
    if args.csv:
        import csv
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["index", "l2", "psnr", "ssim", "lpips"])
            w.writeheader()
            for r in rows + [mean]:
                w.writerow(r)
    return 0


def cmd_make_synthetic(args):
    from .datasets import (make_quad_dataset, make_sphere_scene,
                           sphere_cameras, write_dataset, ArrayDataset)
    from .datasets import render_quad_truth

    if args.kind in ("quad", "viewdep"):
        texture = "smooth" if args.kind == "quad" else "viewdep"
        ds = make_quad_dataset(size=args.size, n_views=args.views,
                               texture=texture, seed=args.seed)
        path = write_dataset(args.out, ds)
    else:
        from .rasterizer.forward import render as _render
        scene, mesh = make_sphere_scene(subdivisions=2)
        cams = sphere_cameras(args.views, size=args.size)
        items = []
        for cam in cams:
            out = _render(scene, None, 0, cam, mode="stage1", keep_cache=False)
            items.append((0, cam, out.color))
        ds = ArrayDataset(mesh, items)
        path = write_dataset(args.out, ds)
    print(f"wrote {args.kind} dataset -> {path}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mixsplat",
                                 description="mixed 2D-3D Gaussian splatting")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("init", help="create a scene from a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--frames")
    p.add_argument("--sh-degree", dest="sh_degree", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="run the pipeline or a single stage")
    p.add_argument("--data", required=True, help="dataset manifest json")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["all", "1", "2"], default="all")
    p.add_argument("--scene", help="stage-1 scene (for --stage 2)")
    p.add_argument("--selection", help="selection list (for --stage 2)")
    p.add_argument("--perturbation")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("select", help="error-based surfel selection")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--perturbation")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("render", help="render a frame from a camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--frames")
    p.add_argument("--camera", required=True)
    p.add_argument("--perturbation")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--mode", choices=["stage1", "mixed"], default="mixed")
    p.add_argument("--tile-size", dest="tile_size", type=int, default=16)
    p.add_argument("--background", choices=["black", "white"], default="black")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", help="optional PFM depth output")
    p.add_argument("--alpha", help="optional PFM alpha output")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("extract-mesh", help="TSDF fusion + marching cubes")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--perturbation")
    p.add_argument("--mode", choices=["stage1", "mixed"], default="mixed")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--trunc-voxels", dest="trunc_voxels", type=float, default=4.0)
    p.add_argument("--min-component", dest="min_component", type=int, default=16)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--report", help="write the report to a file")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("metrics", help="L2/PSNR/SSIM between image sets")
    p.add_argument("--renders", required=True)
    p.add_argument("--truths", required=True)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("make-synthetic", help="generate toy datasets")
    p.add_argument("--kind", choices=["quad", "viewdep", "sphere"],
                   default="quad")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_synthetic)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MixsplatError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
