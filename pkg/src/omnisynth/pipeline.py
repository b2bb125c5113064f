"""End-to-end orchestration: input, reprojection, completion, selected
training, rendering, and evaluation reports.

Every intermediate artifact is written under the run directory and reused
on rerun (reprojections, completions, checkpoints), so stages can be run
piecemeal from the CLI. All randomness derives from the run seed; with
OMNISYNTH_THREADS=0 two runs with the same seed produce byte-identical
reports and checkpoints.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import panorama_io
from .completion import (
    CompletionNet,
    complete,
    discriminator_score,
    train_completion,
)
from .config import ConfigError, RunConfig
from .geometry import (
    CameraPose,
    CandidateGrid,
    DepthBounds,
    RgbdPanorama,
    densify_depth,
    depth_bounds,
    evaluation_points,
    panorama_to_points,
    perspective_crop,
    reproject,
    reprojection_grid,
)
from .metrics import baseline_extractor, fit_feature_gaussian, nllf, psnr
from .radiance import (
    EquirectCamera,
    PinholeCamera,
    RadianceField,
    SupervisionImage,
    render_view,
    train,
)
from .scenesim import BoxScene, load_scene, oracle_completion, render_ground_truth
from .selection import PositionPrior, SelectionState, selection_step

__all__ = ["StageError", "PipelineResult", "run_pipeline", "path_render", "evaluate_field", "stage_reproject", "stage_complete", "stage_input", "stage_train"]


class StageError(Exception):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineResult:
    field: RadianceField
    report_rows: list[dict]
    out_dir: Path
    heldout_rows: list[dict] = dc_field(default_factory=list)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as e:  # surface with stage tag, keep traceback
                raise StageError(name, f"{type(e).__name__}: {e}") from e

        inner.__name__ = fn.__name__
        return inner

    return wrap


def _rng(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_seq))


def _rng_children(seed: int, n: int) -> list[np.random.Generator]:
    return [_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@_stage("input")
def stage_input(cfg: RunConfig) -> tuple[RgbdPanorama, BoxScene | None]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(cfg.scene) if cfg.scene else None
    prefix = out / "input"
    if prefix.with_suffix(".rgb.png").exists():
        return panorama_io.load_panorama(prefix, cfg.depth_scale), scene
    if cfg.input_prefix:
        pano = panorama_io.load_panorama(cfg.input_prefix, cfg.depth_scale)
        if (pano.width, pano.height) != (cfg.width, cfg.height):
            raise StageError("input", f"input panorama is {pano.width}x{pano.height}, config wants {cfg.width}x{cfg.height}")
    else:
        pano = render_ground_truth(scene, CameraPose(np.zeros(3)), cfg.width, cfg.height)
    panorama_io.save_panorama(prefix, pano, cfg.depth_scale)
    # reload so downstream sees exactly the quantized artifact
    return panorama_io.load_panorama(prefix, cfg.depth_scale), scene


@_stage("reproject")
def stage_reproject(cfg: RunConfig, pano: RgbdPanorama) -> tuple[DepthBounds, CandidateGrid, list[RgbdPanorama]]:
    out = Path(cfg.out_dir)
    bounds = depth_bounds(pano)
    grid = reprojection_grid(bounds, cfg.grid_count_per_axis)
    reproj_dir = out / "reproj"
    reproj_dir.mkdir(parents=True, exist_ok=True)
    cloud = panorama_to_points(pano)
    reprojections = []
    for i, pose in enumerate(grid.poses):
        prefix = reproj_dir / f"cand_{i:03d}"
        if prefix.with_suffix(".rgb.png").exists():
            reprojections.append(panorama_io.load_panorama(prefix, cfg.depth_scale))
            continue
        rp = reproject(cloud, pose, pano.width, pano.height)
        depth, valid_d = densify_depth(rp.depth, rp.valid, cfg.median_window)
        rp = RgbdPanorama(rp.rgb, np.where(rp.valid, depth, 0.0), rp.valid)
        panorama_io.save_panorama(prefix, rp, cfg.depth_scale)
        reprojections.append(panorama_io.load_panorama(prefix, cfg.depth_scale))
    return bounds, grid, reprojections


def _completion_corpus(cfg: RunConfig) -> list[RgbdPanorama]:
    """Synthetic rooms standing in for a completion training split."""
    from .scenesim import random_room

    panos = []
    for k in range(cfg.completion_corpus):
        rng = _rng_children(cfg.seed * 131 + 17 + k, 1)[0]
        scene = random_room(cfg.seed * 131 + 17 + k)
        pose = CameraPose(rng.uniform(-0.3, 0.3, 3))
        panos.append(render_ground_truth(scene, pose, cfg.width, cfg.height))
    return panos


@_stage("complete")
def stage_complete(cfg: RunConfig, pano: RgbdPanorama, scene: BoxScene | None,
                   grid: CandidateGrid, reprojections: list[RgbdPanorama],
                   ) -> tuple[list[RgbdPanorama], list[float], CompletionNet | None]:
    out = Path(cfg.out_dir)
    comp_dir = out / "completed"
    comp_dir.mkdir(parents=True, exist_ok=True)
    scores_path = comp_dir / "scores.json"

    net: CompletionNet | None = None
    net_path = out / "completion.osnf"
    if cfg.completer == "neural" or (cfg.completer == "baseline" and cfg.train_discriminator):
        if net_path.exists():
            net = CompletionNet.load(net_path)
        else:
            dataset = [pano] + _completion_corpus(cfg)
            result = train_completion(dataset, cfg.completion)
            net = result.net
            net.save(net_path)

    completed: list[RgbdPanorama] = []
    scores: list[float] = []
    cached_scores = json.loads(scores_path.read_text()) if scores_path.exists() else None
    for i, pose in enumerate(grid.poses):
        prefix = comp_dir / f"cand_{i:03d}"
        if prefix.with_suffix(".rgb.png").exists() and cached_scores is not None:
            completed.append(panorama_io.load_panorama(prefix, cfg.depth_scale))
            scores.append(float(cached_scores[i]))
            continue
        rp = reprojections[i]
        if cfg.completer == "oracle":
            filled = oracle_completion(scene, pose, rp)
            score = discriminator_score(net, filled.rgb) if net is not None else 0.5
        else:
            res = complete(rp, rp.valid, method=cfg.completer, net=net)
            filled, score = res.pano, res.score
        panorama_io.save_panorama(prefix, filled, cfg.depth_scale)
        completed.append(panorama_io.load_panorama(prefix, cfg.depth_scale))
        scores.append(float(score))
    scores_path.write_text(json.dumps(scores))
    return completed, scores, net


@_stage("train")
def stage_train(cfg: RunConfig, pano: RgbdPanorama, bounds: DepthBounds, grid: CandidateGrid,
                reprojections: list[RgbdPanorama], completed: list[RgbdPanorama],
                comp_scores: list[float], net: CompletionNet | None) -> RadianceField:
    out = Path(cfg.out_dir)
    far = cfg.far_scale * float(pano.depth[pano.valid].max())
    field = RadianceField(cfg.near, far, cfg.l_pos, cfg.l_dir,
                          cfg.field_hidden, cfg.field_depth, seed=cfg.seed)
    ckpt = out / "field.osnf"
    if ckpt.exists():
        return RadianceField.load(ckpt)

    base = [SupervisionImage(pano, CameraPose(np.zeros(3)))]
    base += [SupervisionImage(rp, pose) for rp, pose in zip(reprojections, grid.poses)]

    rng_init, rng_steps = _rng_children(cfg.seed * 2 + 1, 2)
    train_cfg = dataclasses.replace(cfg.train, hook_every=cfg.update_period)
    hook = None
    trace_rows: list[tuple] = []
    if cfg.no_selection:
        supervision = base + [SupervisionImage(cp, pose) for cp, pose in zip(completed, grid.poses)]
    else:
        prior = PositionPrior.from_grid(grid)
        state = SelectionState.initialize(prior, cfg.num_selected, cfg.epsilon,
                                          rng_init, cfg.update_period)
        eval_poses = evaluation_points(bounds)
        eval_cam = EquirectCamera(max(int(pano.width * cfg.eval_render_scale) // 2 * 2, 8),
                                  max(int(pano.height * cfg.eval_render_scale) // 2, 4))

        def score_provider(current: list[int]) -> tuple[list[float], list[float]]:
            if net is None:
                eval_scores = [0.5] * len(eval_poses)
            else:
                eval_scores = []
                for pose in eval_poses:
                    rgb, _ = render_view(field, pose, eval_cam, train_cfg.n_coarse,
                                         train_cfg.n_fine, seed=cfg.seed)
                    eval_scores.append(discriminator_score(net, rgb))
            return eval_scores, [comp_scores[i] for i in current]

        def hook(step: int, f: RadianceField):
            selection_step(state, score_provider, rng_steps, iteration=step)
            row = state.events[-1]
            trace_rows.append((row.iteration, row.elbo, row.best_elbo,
                               " ".join(map(str, row.base)), " ".join(map(str, row.sample))))
            return base + [SupervisionImage(completed[i], grid.poses[i]) for i in state.current]

        supervision = base + [SupervisionImage(completed[i], grid.poses[i]) for i in state.current]

    result = train(field, supervision, train_cfg, selection_hook=hook)
    field.save(ckpt)
    # evaluate from the persisted artifact so cached reruns see identical bits
    field = RadianceField.load(ckpt)

    with open(out / "loss_trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "coarse_loss", "fine_loss", "lr"])
        for row in result.loss_trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    if not cfg.no_selection:
        with open(out / "selection_trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "elbo", "best_elbo", "base_indices", "sample_indices"])
            for row in trace_rows:
                w.writerow([row[0], repr(row[1]), repr(row[2]), row[3], row[4]])
    return field


@_stage("evaluate")
def evaluate_field(cfg: RunConfig, field: RadianceField, pano: RgbdPanorama,
                   bounds: DepthBounds, scene: BoxScene | None) -> tuple[list[dict], list[dict]]:
    out = Path(cfg.out_dir)
    method = ("no-selection" if cfg.no_selection else "selection") + f"+{cfg.completer}"
    scene_name = Path(cfg.scene).stem if cfg.scene else (Path(cfg.input_prefix).stem if cfg.input_prefix else "scene")

    cam = EquirectCamera(pano.width, pano.height)
    rgb_in, _ = render_view(field, CameraPose(np.zeros(3)), cam,
                            cfg.train.n_coarse, cfg.train.n_fine, seed=cfg.seed)
    panorama_io.save_rgb(out / "render_input_pose.png", rgb_in)
    input_psnr = psnr(rgb_in, pano.rgb)

    rng_fit, rng_views = _rng_children(cfg.seed * 2 + 5, 2)
    crops = []
    for _ in range(max(cfg.nllf_fit_crops, 65)):
        yaw = rng_fit.uniform(0, 2 * np.pi)
        pitch = rng_fit.uniform(-np.pi / 4, np.pi / 4)
        d = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
        crops.append(perspective_crop(pano, d, 90.0, cfg.nllf_crop, cfg.nllf_crop))
    gaussian = fit_feature_gaussian(crops, baseline_extractor)

    views = []
    for _ in range(cfg.nllf_views):
        yaw = rng_views.uniform(0, 2 * np.pi)
        pitch = rng_views.uniform(-np.pi / 4, np.pi / 4)
        d = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
        pos = np.array([rng_views.uniform(bounds.x_min / 4, bounds.x_max / 4),
                        rng_views.uniform(bounds.y_min / 4, bounds.y_max / 4), 0.0])
        pin = PinholeCamera(d, 90.0, cfg.nllf_crop, cfg.nllf_crop)
        rgb, _ = render_view(field, CameraPose(pos), pin, cfg.train.n_coarse,
                             cfg.train.n_fine, seed=cfg.seed)
        views.append(rgb)
    score = nllf(views, baseline_extractor, gaussian)

    rows = [{
        "scene": scene_name,
        "method": method,
        "psnr_db": f"{input_psnr:.6f}",
        "nllf": f"{score / 1000.0:.9f}",
    }]
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["scene", "method", "psnr_db", "nllf"])
        w.writeheader()
        w.writerows(rows)

    heldout_rows: list[dict] = []
    if scene is not None:
        for k, pose in enumerate(evaluation_points(bounds)):
            rgb, _ = render_view(field, pose, cam, cfg.train.n_coarse,
                                 cfg.train.n_fine, seed=cfg.seed)
            gt = render_ground_truth(scene, pose, pano.width, pano.height)
            panorama_io.save_rgb(out / f"render_eval_{k}.png", rgb)
            heldout_rows.append({"pose_index": str(k), "psnr_db": f"{psnr(rgb, gt.rgb):.6f}"})
        with open(out / "heldout_psnr.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["pose_index", "psnr_db"])
            w.writeheader()
            w.writerows(heldout_rows)
    return rows, heldout_rows


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Execute all stages; artifacts land under cfg.out_dir."""
    cfg.validate()
    pano, scene = stage_input(cfg)
    bounds, grid, reprojections = stage_reproject(cfg, pano)
    completed, scores, net = stage_complete(cfg, pano, scene, grid, reprojections)
    field = stage_train(cfg, pano, bounds, grid, reprojections, completed, scores, net)
    rows, heldout = evaluate_field(cfg, field, pano, bounds, scene)
    return PipelineResult(field, rows, Path(cfg.out_dir), heldout)


def path_render(field: RadianceField, waypoints: np.ndarray, out_dir, frames: int,
                fov_deg: float = 90.0, width: int = 128, height: int = 128,
                look_dir=None, n_coarse: int = 64, n_fine: int = 128, seed: int = 0) -> list[Path]:
    """Render perspective frames along a linearly interpolated camera path.

    Positions interpolate uniformly in path parameter across the waypoint
    polyline; the view direction follows the motion unless ``look_dir`` is
    given. Frames are written as numbered PNGs.
    """
    waypoints = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if len(waypoints) < 2:
        raise ValueError("need at least 2 waypoints")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ts = np.linspace(0.0, 1.0, frames) if frames > 1 else np.array([0.0])
    seg_count = len(waypoints) - 1
    paths = []
    for k, t in enumerate(ts):
        s = min(int(t * seg_count), seg_count - 1)
        local = t * seg_count - s
        pos = waypoints[s] * (1 - local) + waypoints[s + 1] * local
        if look_dir is not None:
            d = np.asarray(look_dir, dtype=np.float64)
        else:
            d = waypoints[s + 1] - waypoints[s]
            if np.linalg.norm(d) == 0:
                d = np.array([1.0, 0.0, 0.0])
        cam = PinholeCamera(d / np.linalg.norm(d), fov_deg, width, height)
        rgb, _ = render_view(field, CameraPose(pos), cam, n_coarse, n_fine, seed=seed)
        frame_path = out_dir / f"frame_{k:04d}.png"
        panorama_io.save_rgb(frame_path, rgb)
        paths.append(frame_path)
    return paths
