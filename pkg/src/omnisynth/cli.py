"""Command-line surface.

Subcommands mirror the pipeline stages so each can be run and inspected on
its own: synth-scene, reproject, complete, train, render, path-render,
evaluate. All artifact paths are relative to --out-dir. Exit codes:
0 success, 1 configuration error, 2 stage failure.

Heavy imports happen inside the handlers so that OMNISYNTH_THREADS=0 can
pin the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STAGE = 2


def _configure_threads() -> None:
    """In single-threaded mode, pin BLAS pools before numpy is imported."""
    raw = os.environ.get("OMNISYNTH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"OMNISYNTH_THREADS must be an integer, got {raw!r}")
    if n <= 1:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(var, "1")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config JSON; flags below override it")
    p.add_argument("--out-dir", help="artifact directory")
    p.add_argument("--scene", help="scene description JSON")
    p.add_argument("--input-prefix", help="input panorama prefix (<p>.rgb.png etc.)")
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--grid-count", type=int, dest="grid_count_per_axis")
    p.add_argument("--completer", choices=["neural", "baseline", "oracle"])
    p.add_argument("--no-selection", action="store_true", default=None)
    p.add_argument("--iterations", type=int, help="radiance training iterations")
    p.add_argument("--batch-size", type=int)


def _load_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    for name in ("out_dir", "scene", "input_prefix", "seed", "width", "height",
                 "grid_count_per_axis", "completer"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "no_selection", None):
        cfg.no_selection = True
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    if getattr(args, "batch_size", None) is not None:
        cfg.train.batch_size = args.batch_size
    cfg.validate()
    return cfg


def _parse_vec3(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected x,y,z, got {text!r}")
    return parts


def cmd_synth_scene(args) -> int:
    from .geometry import CameraPose
    from .panorama_io import save_panorama
    from .scenesim import load_scene, render_ground_truth

    scene = load_scene(args.scene)
    pose = CameraPose(_parse_vec3(args.pose))
    pano = render_ground_truth(scene, pose, args.width, args.height)
    paths = save_panorama(args.out, pano)
    print(f"wrote {paths['rgb']}")
    return EXIT_OK


def cmd_reproject(args) -> int:
    from .pipeline import stage_input, stage_reproject

    cfg = _load_config(args)
    pano, _ = stage_input(cfg)
    _, grid, _ = stage_reproject(cfg, pano)
    print(f"reprojected {len(grid)} candidates into {cfg.out_dir}/reproj")
    return EXIT_OK


def cmd_complete(args) -> int:
    from .pipeline import stage_complete, stage_input, stage_reproject

    cfg = _load_config(args)
    pano, scene = stage_input(cfg)
    _, grid, reprojections = stage_reproject(cfg, pano)
    completed, scores, _ = stage_complete(cfg, pano, scene, grid, reprojections)
    print(f"completed {len(completed)} candidates ({cfg.completer}); "
          f"mean score {sum(scores) / len(scores):.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import stage_complete, stage_input, stage_reproject, stage_train

    cfg = _load_config(args)
    pano, scene = stage_input(cfg)
    bounds, grid, reprojections = stage_reproject(cfg, pano)
    completed, scores, net = stage_complete(cfg, pano, scene, grid, reprojections)
    stage_train(cfg, pano, bounds, grid, reprojections, completed, scores, net)
    print(f"checkpoint written to {cfg.out_dir}/field.osnf")
    return EXIT_OK


def cmd_render(args) -> int:
    from .geometry import CameraPose
    from .panorama_io import save_rgb
    from .radiance import EquirectCamera, PinholeCamera, RadianceField, render_view

    field = RadianceField.load(args.checkpoint)
    pose = CameraPose(_parse_vec3(args.pose))
    if args.pinhole:
        cam = PinholeCamera(_parse_vec3(args.view_dir), args.fov, args.render_width, args.render_height)
    else:
        cam = EquirectCamera(args.render_width, args.render_height)
    rgb, _ = render_view(field, pose, cam, args.n_coarse, args.n_fine, seed=args.seed)
    save_rgb(args.out, rgb)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_path_render(args) -> int:
    from .pipeline import path_render
    from .radiance import RadianceField

    field = RadianceField.load(args.checkpoint)
    waypoints = json.loads(args.waypoints) if args.waypoints.strip().startswith("[") else json.loads(open(args.waypoints).read())
    frames = path_render(field, waypoints, args.out_dir, args.frames, args.fov,
                         args.render_width, args.render_height,
                         n_coarse=args.n_coarse, n_fine=args.n_fine, seed=args.seed)
    print(f"wrote {len(frames)} frames to {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load_config(args)
    result = run_pipeline(cfg)
    for row in result.report_rows:
        print(f"{row['scene']},{row['method']}: psnr={row['psnr_db']} dB nllf={row['nllf']}")
    for row in result.heldout_rows:
        print(f"heldout pose {row['pose_index']}: psnr={row['psnr_db']} dB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnisynth",
                                     description="Novel-view synthesis from one RGB-D panorama.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="render analytic ground-truth panoramas")
    p.add_argument("--scene", required=True)
    p.add_argument("--pose", default="0,0,0")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(handler=cmd_synth_scene)

    for name, handler in (("reproject", cmd_reproject), ("complete", cmd_complete),
                          ("train", cmd_train), ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", default="0,0,0")
    p.add_argument("--pinhole", action="store_true")
    p.add_argument("--view-dir", default="1,0,0")
    p.add_argument("--fov", type=float, default=90.0)
    p.add_argument("--render-width", type=int, default=128)
    p.add_argument("--render-height", type=int, default=64)
    p.add_argument("--n-coarse", type=int, default=64)
    p.add_argument("--n-fine", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("path-render", help="render frames along a camera path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--waypoints", required=True, help="JSON list of [x,y,z] or a file containing one")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--fov", type=float, default=90.0)
    p.add_argument("--render-width", type=int, default=128)
    p.add_argument("--render-height", type=int, default=128)
    p.add_argument("--n-coarse", type=int, default=64)
    p.add_argument("--n-fine", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_path_render)

    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .config import ConfigError

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
