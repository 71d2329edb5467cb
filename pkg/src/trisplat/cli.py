"""Command-line interface.

Subcommands: gen-synthetic, train, render, densify, prune, orient-normals,
extract-planes, eval. Exit code 0 on success; failures print a single
machine-parsable line ``ERROR <ErrorClass>: <message>`` to stderr and exit 1.
Input scene files are never mutated.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .control import ContributionStats, orient_normals, prune_pass, split_pass
from .errors import TriSplatError
from .evaluate import evaluate, report_text, write_report
from .planes import LodSchedule, extract_lod_planes, sample_oriented_points
from .renderer import RenderSettings, cull_and_prepare, render
from .sceneio import (
    SceneBundle,
    load_scene,
    read_checkpoint,
    save_scene,
    write_checkpoint,
    write_image,
    write_pfm,
    write_ply,
)
from .surfels import render_appearance, spawn_gaussians
from .synthetic import KINDS, gen_synthetic
from .train import (
    TrainConfig,
    Trainer,
    init_from_points,
    load_train_state,
    save_train_state,
)


def _add_gen(sub):
    p = sub.add_parser("gen-synthetic", help="generate a synthetic scene bundle")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--depth-scale", type=float, default=1.0)
    p.add_argument("--depth-shift", type=float, default=0.0)
    p.add_argument("--sfm-noise", type=float, default=0.0)
    p.add_argument("--sfm-outlier-frac", type=float, default=0.0)


def _cmd_gen(args) -> int:
    bundle, meta = gen_synthetic(
        args.kind, seed=args.seed, width=args.width, height=args.height,
        n_views=args.views, n_points=args.points,
        depth_scale=args.depth_scale, depth_shift=args.depth_shift,
        sfm_noise=args.sfm_noise, sfm_outlier_frac=args.sfm_outlier_frac,
    )
    out = Path(args.out)
    save_scene(bundle, out)
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {args.kind} scene with {len(bundle.cameras)} views to {out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="run the coarse/fine training loop")
    p.add_argument("--scene", required=True)
    p.add_argument("--stage", choices=("coarse", "fine", "both"), default="both")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="state .npz to resume from")


def _cmd_train(args) -> int:
    bundle = load_scene(args.scene)
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    trainer = Trainer(bundle, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    state = None
    if args.resume:
        state = load_train_state(args.resume, trainer)
        soup = state.soup
    else:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 42]))
        soup = init_from_points(
            bundle.points, rng, radius_factor=config.radius_factor,
            k_offsets=config.k_offsets,
        )

    stages = {"coarse": ("coarse",), "fine": ("fine",), "both": ("coarse", "fine")}[args.stage]
    if state is not None and state.stage in stages:
        stages = stages[stages.index(state.stage):]
    final_state = state
    for stage in stages:
        resume_state = state if (state is not None and state.stage == stage) else None
        if stage == "coarse":
            soup, final_state = trainer.train_coarse(soup, state=resume_state)
        else:
            soup, final_state = trainer.train_fine(soup, state=resume_state)
        state = None
    write_checkpoint(out / "soup.hgs", soup)
    if final_state is not None:
        save_train_state(out / "state.npz", final_state)
    (out / "manifest.json").write_text(
        json.dumps(trainer.manifest, indent=2, default=float) + "\n"
    )
    print(f"trained {len(soup)} triangles -> {out / 'soup.hgs'}")
    return 0


def _add_render(sub):
    p = sub.add_parser("render", help="render depth/normal/rgb from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--camera-id", type=int, required=True)
    p.add_argument("--out-depth", default=None)
    p.add_argument("--out-normal", default=None)
    p.add_argument("--out-rgb", default=None)


def _cmd_render(args) -> int:
    if not (args.out_depth or args.out_normal or args.out_rgb):
        raise TriSplatError("render: request at least one of --out-depth/--out-normal/--out-rgb")
    soup = read_checkpoint(args.checkpoint)
    bundle = load_scene(args.scene)
    cam = bundle.camera_by_id(args.camera_id)
    if args.out_depth or args.out_normal:
        target = render(soup, cam)
        if args.out_depth:
            write_pfm(args.out_depth, target.depth)
        if args.out_normal:
            write_pfm(args.out_normal, target.normal)
    if args.out_rgb:
        app = render_appearance(spawn_gaussians(soup), cam)
        write_image(args.out_rgb, np.clip(app.color, 0.0, 1.0))
    print(f"rendered camera {args.camera_id} from {args.checkpoint}")
    return 0


def _add_densify(sub):
    p = sub.add_parser("densify", help="one gradient-field split pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--field-from-appearance", action="store_true", required=True,
                   help="use the checkpoint's appearance surfels as the density field")
    p.add_argument("--out", required=True)
    p.add_argument("--grad-threshold", type=float, default=None)


def _cmd_densify(args) -> int:
    soup = read_checkpoint(args.checkpoint)
    config = TrainConfig()
    density = config.density()
    if args.grad_threshold is not None:
        density.grad_threshold = args.grad_threshold
    surfels = spawn_gaussians(soup)
    new_soup, _, report = split_pass(soup, surfels, density)
    write_checkpoint(args.out, new_soup)
    print(
        f"split {report.n_split} triangles: {report.n_before} -> {report.n_after} "
        f"(threshold {report.grad_threshold})"
    )
    return 0


def _add_prune(sub):
    p = sub.add_parser("prune", help="contribution/opacity prune pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)


def _cmd_prune(args) -> int:
    soup = read_checkpoint(args.checkpoint)
    bundle = load_scene(args.scene)
    config = TrainConfig()
    stats = ContributionStats.zeros(len(soup))
    for cam in bundle.train_cameras():
        target = render(soup, cam)
        stats.accumulate(target.gamma_partial, target.visible)
    new_soup, _, report = prune_pass(soup, stats, config.density())
    write_checkpoint(args.out, new_soup)
    print(
        f"pruned {report.n_before - report.n_after} triangles "
        f"({report.n_low} low, {report.n_unseen} unseen): "
        f"{report.n_before} -> {report.n_after}"
    )
    return 0


def _add_orient(sub):
    p = sub.add_parser("orient-normals", help="visibility-vote normal orientation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)


def _cmd_orient(args) -> int:
    soup = read_checkpoint(args.checkpoint)
    bundle = load_scene(args.scene)
    cams = bundle.train_cameras()
    visible = np.zeros((len(soup), len(cams)), dtype=bool)
    for ci, cam in enumerate(cams):
        prep = cull_and_prepare(soup, cam, RenderSettings())
        visible[prep.rows, ci] = True
    centers = np.stack([c.center for c in cams])
    new_soup, report = orient_normals(soup, centers, visible)
    write_checkpoint(args.out, new_soup)
    print(f"flipped {report.n_flipped} triangles ({report.n_untouched} unobserved)")
    return 0


def _add_extract(sub):
    p = sub.add_parser("extract-planes", help="LoD planar abstraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lod", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--out", required=True, help="output prefix (.txt and .ply)")
    p.add_argument("--density", type=float, default=2000.0)
    p.add_argument("--seed", type=int, default=0)


def _cmd_extract(args) -> int:
    soup = read_checkpoint(args.checkpoint)
    cloud = sample_oriented_points(soup, args.density, rng=args.seed)
    extraction = extract_lod_planes(cloud, LodSchedule())
    prims = extraction.lod_set(args.lod)
    out = Path(args.out)
    lines = ["# nx ny nz offset inliers lod pass"]
    for p in prims:
        lines.append(
            f"{p.normal[0]:.9g} {p.normal[1]:.9g} {p.normal[2]:.9g} "
            f"{p.offset:.9g} {p.inlier_count} {p.level} {p.pass_index}"
        )
    out.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    keep = {id(p) for p in prims}
    labels = extraction.labels.copy()
    for idx, prim in enumerate(extraction.primitives):
        if id(prim) not in keep:
            labels[labels == idx] = -1
    write_ply(out.with_suffix(".ply"), cloud.points, labels=labels)
    print(f"extracted {len(prims)} planes at LoD{args.lod} -> {out.with_suffix('.txt')}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="chamfer / plane-count / PSNR report")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--density", type=float, default=2000.0)


def _cmd_eval(args) -> int:
    bundle = load_scene(args.scene)
    soup = read_checkpoint(args.checkpoint)
    report = evaluate(bundle, soup, sample_density=args.density)
    write_report(report, args.report)
    print(report_text(report))
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen,
    "train": _cmd_train,
    "render": _cmd_render,
    "densify": _cmd_densify,
    "prune": _cmd_prune,
    "orient-normals": _cmd_orient,
    "extract-planes": _cmd_extract,
    "eval": _cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trisplat",
        description="Triangle-soup splatting, reconstruction and planar abstraction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)
    _add_train(sub)
    _add_render(sub)
    _add_densify(sub)
    _add_prune(sub)
    _add_orient(sub)
    _add_extract(sub)
    _add_eval(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TriSplatError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
