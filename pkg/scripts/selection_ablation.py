#!/usr/bin/env python3
"""Selection-versus-no-selection ablation on the box-room scene.

Runs the pipeline twice per seed with the diffusion completer: once with
the position selector (discriminator-scored) and once training on all
completed panoramas, then compares mean held-out PSNR per seed.

Usage:
    python scripts/selection_ablation.py --out-dir runs/ablation --seeds 5
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from omnisynth.completion import CompletionTrainConfig
from omnisynth.config import RunConfig
from omnisynth.pipeline import run_pipeline
from omnisynth.radiance import TrainConfig
from omnisynth.scenesim import save_scene

from run_box_room import demo_scene  # noqa: E402


def ablation_config(out_dir: str, scene_path: str, seed: int, no_selection: bool,
                    iterations: int = 400) -> RunConfig:
    """Both arms share scene, grid, and completer; the selection arm also
    trains the discriminator that scores completions and rendered views.
    The completion net needs heights divisible by 32, hence 64x32."""
    return RunConfig(
        out_dir=out_dir,
        scene=scene_path,
        width=64,
        height=32,
        grid_count_per_axis=6,
        num_selected=4,
        epsilon=0.25,
        update_period=50,
        completer="baseline",
        train_discriminator=not no_selection,
        no_selection=no_selection,
        seed=seed,
        completion=CompletionTrainConfig(iterations=600, batch_size=4, lr=1e-3, d_lr=1e-3,
                                         base_channels=8, seed=seed,
                                         coverage_min=0.35, coverage_max=0.6),
        completion_corpus=200,
        train=TrainConfig(n_coarse=16, n_fine=24, batch_size=448,
                          iterations=iterations, lr_start=2.0e-3, lr_end=2.0e-4,
                          seed=seed),
        field_hidden=64,
        field_depth=4,
        l_pos=8,
        nllf_views=4,
        nllf_crop=16,
        nllf_fit_crops=70,
        eval_render_scale=0.5,
    )


def heldout_mean(result) -> float:
    return sum(float(r["psnr_db"]) for r in result.heldout_rows) / len(result.heldout_rows)


def run_pair(base_dir: Path, scene_path: Path, seed: int, iterations: int) -> tuple[float, float]:
    sel = run_pipeline(ablation_config(str(base_dir / f"seed{seed}_sel"), str(scene_path),
                                       seed, no_selection=False, iterations=iterations))
    allc = run_pipeline(ablation_config(str(base_dir / f"seed{seed}_all"), str(scene_path),
                                        seed, no_selection=True, iterations=iterations))
    return heldout_mean(sel), heldout_mean(allc)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="runs/ablation")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=500)
    args = ap.parse_args()

    base = Path(args.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    scene_path = base / "scene.json"
    save_scene(scene_path, demo_scene())

    wins = 0
    for seed in range(args.seeds):
        sel, allc = run_pair(base, scene_path, seed, args.iterations)
        win = sel >= allc
        wins += win
        print(f"seed {seed}: selection {sel:.2f} dB vs all-completions {allc:.2f} dB "
              f"{'WIN' if win else 'LOSS'}")
    print(f"selection >= no-selection on {wins}/{args.seeds} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
