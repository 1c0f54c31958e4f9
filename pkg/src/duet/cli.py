"""Command-line pipeline: synth, train, mesh, render, eval, gsdist.

Config precedence for train: flags > --config JSON > built-in defaults.
The resolved config is written next to every run for provenance. Exit
codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="duet", description="Dual-scaffold surface reconstruction pipeline")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth", parents=[], help="write a synthetic oracle dataset",
                       description="Generate an analytic scene: GT renders, seed points, GT mesh.")
    s.add_argument("--spec", required=True, choices=["sphere", "room", "two_room"])
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--depth-scale", type=float, default=1.0, help="prior depth scale corruption")
    s.add_argument("--depth-shift", type=float, default=0.0, help="prior depth shift corruption")
    s.add_argument("--depth-noise", type=float, default=0.0, help="multiplicative prior depth noise")
    s.add_argument("--normal-noise-deg", type=float, default=0.0, help="prior normal rotation noise")

    t = sub.add_parser("train", help="optimize both scaffolds on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--iters", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--voxel-size", type=float)
    t.add_argument("--anchor-cell", type=float)
    t.add_argument("--no-tether", action="store_true", help="disable band checks and the implicit loss")
    t.add_argument("--threads", type=int, default=1)

    m = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--fusion", action="store_true",
                   help="TSDF-fuse rendered depth instead of meshing the stored SDF")

    r = sub.add_parser("render", help="render checkpointed surfels into PNGs")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", help="dataset dir for cameras (default: checkpoint cameras)")
    r.add_argument("--out", required=True)
    r.add_argument("--index", type=int, help="render a single view")

    e = sub.add_parser("eval", help="mesh reconstruction metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--T", type=float, default=0.05)
    e.add_argument("--samples", type=int, default=100000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write metrics JSON here (default stdout)")

    g = sub.add_parser("gsdist", help="Gaussian-center distance metrics against a GT mesh")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--thresholds", default="0.01:0.11:0.02",
                   help="lo:hi:step sweep or comma list, scene units")
    g.add_argument("--alpha-min", type=float, default=1e-3,
                   help="count only surfels above this opacity")
    g.add_argument("--out", help="write metrics JSON here (default stdout)")
    return p


def _cmd_synth(args) -> int:
    from .scene_io import save_dataset
    from .synth_oracle import corrupt_priors, make_scene

    dataset, _ = make_scene(args.spec, args.res, args.views, seed=args.seed)
    corrupted = (args.depth_scale != 1.0 or args.depth_shift != 0.0
                 or args.depth_noise > 0 or args.normal_noise_deg > 0)
    if corrupted:
        dataset.frames = [
            corrupt_priors(fr, args.depth_scale, args.depth_shift,
                           args.normal_noise_deg, args.seed + 1000 + i,
                           depth_noise=args.depth_noise)
            for i, fr in enumerate(dataset.frames)]
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.frames)} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .scene_io import load_dataset
    from .trainer import TrainConfig, train

    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    cfg = TrainConfig.from_dict(base)
    if args.iters is not None:
        cfg.total_iters = args.iters
    if args.warmup is not None:
        cfg.warm_up = args.warmup
    if args.seed is not None:
        cfg.seed = args.seed
    if args.voxel_size is not None:
        cfg.voxel_size = args.voxel_size
        cfg.truncation = 3.0 * args.voxel_size
    if args.anchor_cell is not None:
        cfg.anchor_cell_size = args.anchor_cell
    cfg.threads = args.threads
    if args.no_tether:
        cfg.tether_enabled = False
        cfg.__post_init__()
    if cfg.warm_up >= cfg.total_iters:
        raise ValueError("warm_up must be smaller than total_iters")
    dataset = load_dataset(args.data)
    result = train(dataset, cfg, out_dir=args.out)
    print(f"trained {cfg.total_iters} iters: {len(result.scaffold)} anchors, "
          f"{result.grid.block_count if result.grid else 0} voxel blocks -> {args.out}")
    return 0


def _load_ckpt(ckpt_dir):
    from .anchor_scaffold import load_scaffold
    from .scene_io import load_cameras
    from .voxel_scaffold import load_grid

    ckpt = Path(ckpt_dir)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    scaffold = load_scaffold(ckpt)
    grid = load_grid(ckpt) if (ckpt / "grid.json").exists() else None
    cams = load_cameras(ckpt / "cameras.json") if (ckpt / "cameras.json").exists() else []
    return scaffold, grid, cams


def _cmd_mesh(args) -> int:
    from .anchor_scaffold import spawn_surfels
    from .meshing import fuse_and_mesh, marching_cubes
    from .scene_io import save_mesh

    scaffold, grid, cams = _load_ckpt(args.ckpt)
    if args.fusion:
        if not cams:
            raise FileNotFoundError(f"checkpoint has no cameras.json: {args.ckpt}")
        surfels = spawn_surfels(scaffold)
        mesh = fuse_and_mesh(surfels, cams, grid.voxel_size if grid else 0.04,
                             grid.truncation if grid else 0.12)
    else:
        if grid is None:
            raise FileNotFoundError(f"checkpoint has no voxel grid: {args.ckpt}")
        mesh = marching_cubes(grid)
    save_mesh(mesh, args.out)
    print(f"wrote mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {args.out}")
    return 0


def _cmd_render(args) -> int:
    from .anchor_scaffold import spawn_surfels
    from .scene_io import _write_depth_png, _write_normal_png, _write_rgb_png, load_dataset
    from .surfel_raster import rasterize

    scaffold, _, cams = _load_ckpt(args.ckpt)
    if args.data:
        cams = [fr.camera for fr in load_dataset(args.data).frames]
    if not cams:
        raise FileNotFoundError("no cameras available; pass --data or checkpoint cameras")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    surfels = spawn_surfels(scaffold)
    indices = [args.index] if args.index is not None else range(len(cams))
    for i in indices:
        r = rasterize(surfels, cams[i])
        _write_rgb_png(out / f"rgb_{i:04d}.png", r.rgb)
        _write_depth_png(out / f"depth_{i:04d}.png", r.depth)
        _write_normal_png(out / f"normal_{i:04d}.png", r.normal)
    print(f"rendered {len(list(indices))} views to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .evalsuite import reconstruction_metrics
    from .scene_io import load_mesh

    for path in (args.pred, args.gt):
        if not Path(path).exists():
            raise FileNotFoundError(f"mesh not found: {path}")
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    m = reconstruction_metrics(pred, gt, args.T, args.samples, args.seed)
    payload = {**m.to_dict(), "n_samples": args.samples, "seed": args.seed}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _parse_thresholds(spec: str) -> list[float]:
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        return [float(t) for t in np.arange(lo, hi + step / 2, step)]
    return [float(x) for x in spec.split(",")]


def _cmd_gsdist(args) -> int:
    from .anchor_scaffold import sigmoid, spawn_surfels
    from .evalsuite import gaussian_distribution_metrics
    from .scene_io import load_mesh

    if not Path(args.gt).exists():
        raise FileNotFoundError(f"mesh not found: {args.gt}")
    scaffold, _, _ = _load_ckpt(args.ckpt)
    surfels = spawn_surfels(scaffold)
    live = sigmoid(scaffold.logit_opacity.reshape(-1)) > args.alpha_min
    centers = surfels.p[live]
    gt = load_mesh(args.gt)
    d_gs, deltas = gaussian_distribution_metrics(centers, gt, _parse_thresholds(args.thresholds))
    payload = {"d_gs": d_gs, "delta": {f"{t:g}": v for t, v in deltas.items()},
               "n_centers": int(live.sum())}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "mesh": _cmd_mesh,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "gsdist": _cmd_gsdist,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if args.command is None:
        parser.print_help()
        return 0
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as e:
        print(f"duet {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
