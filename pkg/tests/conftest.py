import os

# deterministic single-threaded math; must be set before numpy loads
os.environ.setdefault("OMNISYNTH_THREADS", "0")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from omnisynth.geometry import CameraPose
from omnisynth.scenesim import BoxObstacle, BoxScene, Texture, render_ground_truth


def convex_room() -> BoxScene:
    """Obstacle-free room: every surface point is visible from every
    interior point, so reprojection has no occlusion mismatches."""
    walls = {
        "x_min": Texture("checker", [0.80, 0.10, 0.10], [0.95, 0.95, 0.95], cells=4),
        "x_max": Texture("checker", [0.10, 0.20, 0.80], [0.90, 0.90, 0.20], cells=4),
        "y_min": Texture("checker", [0.10, 0.60, 0.20], [0.95, 0.95, 0.95], cells=4),
        "y_max": Texture("checker", [0.55, 0.15, 0.60], [0.90, 0.85, 0.75], cells=4),
        "z_min": Texture("gradient", [0.25, 0.20, 0.20], [0.65, 0.60, 0.55]),
        "z_max": Texture("solid", [0.92, 0.92, 0.88], [0.92, 0.92, 0.88]),
    }
    return BoxScene(room_min=[-2.0, -2.0, -1.2], room_max=[2.0, 2.0, 1.2], wall_textures=walls)


def cluttered_room() -> BoxScene:
    scene = convex_room()
    return BoxScene(room_min=scene.room_min, room_max=scene.room_max,
                    wall_textures=scene.wall_textures,
                    obstacles=[BoxObstacle([0.5, -0.6, -1.19], [1.1, 0.2, -0.2],
                                           Texture("solid", [0.85, 0.50, 0.10], [0.85, 0.50, 0.10]))])


@pytest.fixture(scope="session")
def room_scene() -> BoxScene:
    return convex_room()


@pytest.fixture(scope="session")
def room_pano(room_scene):
    return render_ground_truth(room_scene, CameraPose(np.zeros(3)), 64, 32)


@pytest.fixture(scope="session")
def cluttered_scene() -> BoxScene:
    return cluttered_room()
