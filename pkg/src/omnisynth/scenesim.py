"""Procedural box-room scenes with analytic RGB-D panoramas.

A scene is an axis-aligned room (camera inside), optional axis-aligned box
obstacles, and a procedural texture per surface. Rays are intersected in
closed form, so ground truth is available at any camera position for
quantitative checks of reprojection, completion, and rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, RgbdPanorama, pixel_to_direction

__all__ = [
    "Texture",
    "BoxObstacle",
    "BoxScene",
    "random_room",
    "trace_rays",
    "render_ground_truth",
    "oracle_completion",
    "scene_to_json",
    "scene_from_json",
    "load_scene",
    "save_scene",
]

_FACES = ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")
# in-plane axes used to parameterize each face, in (u_axis, v_axis) order
_FACE_UV = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


@dataclass
class Texture:
    """Checker or linear-gradient coloring of one surface."""

    kind: str
    color_a: np.ndarray
    color_b: np.ndarray
    cells: int = 8
    axis: str = "u"

    def __post_init__(self):
        if self.kind not in ("checker", "gradient", "solid"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        self.color_a = np.asarray(self.color_a, dtype=np.float64).reshape(3)
        self.color_b = np.asarray(self.color_b, dtype=np.float64).reshape(3)
        if self.kind == "checker" and self.cells < 1:
            raise ValueError("checker cells must be >= 1")
        if self.axis not in ("u", "v"):
            raise ValueError("gradient axis must be 'u' or 'v'")

    def shade(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Color at normalized face coordinates in [0, 1]."""
        if self.kind == "solid":
            return np.broadcast_to(self.color_a, u.shape + (3,)).copy()
        if self.kind == "checker":
            iu = np.floor(np.clip(u, 0, 1 - 1e-12) * self.cells)
            iv = np.floor(np.clip(v, 0, 1 - 1e-12) * self.cells)
            odd = ((iu + iv) % 2).astype(bool)
            out = np.where(odd[..., None], self.color_b, self.color_a)
            return out
        t = (u if self.axis == "u" else v)[..., None]
        return self.color_a * (1 - t) + self.color_b * t


@dataclass
class BoxObstacle:
    box_min: np.ndarray
    box_max: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        if not (self.box_min < self.box_max).all():
            raise ValueError("obstacle box_min must be < box_max componentwise")


@dataclass
class BoxScene:
    """Axis-aligned room with textured walls and optional box obstacles."""

    room_min: np.ndarray
    room_max: np.ndarray
    wall_textures: dict[str, Texture]
    obstacles: list[BoxObstacle] = field(default_factory=list)

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=np.float64).reshape(3)
        self.room_max = np.asarray(self.room_max, dtype=np.float64).reshape(3)
        if not (self.room_min < 0).all() or not (self.room_max > 0).all():
            raise ValueError("room must contain the origin")
        for face in _FACES:
            if face not in self.wall_textures:
                raise ValueError(f"missing texture for face {face}")
        for ob in self.obstacles:
            if not ((ob.box_min > self.room_min).all() and (ob.box_max < self.room_max).all()):
                raise ValueError("obstacles must lie strictly inside the room")

    def contains_free(self, p: np.ndarray) -> bool:
        """True when p is strictly inside the room and outside all obstacles."""
        p = np.asarray(p, dtype=np.float64)
        if not ((p > self.room_min).all() and (p < self.room_max).all()):
            return False
        for ob in self.obstacles:
            if ((p >= ob.box_min) & (p <= ob.box_max)).all():
                return False
        return True


def _room_exit(origin: np.ndarray, dirs: np.ndarray, room_min: np.ndarray,
               room_max: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance to the room shell from inside, plus hit axis and side."""
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    axis_best = np.zeros(n, dtype=np.int64)
    side_best = np.zeros(n, dtype=np.int64)  # 0 -> min face, 1 -> max face
    for axis in range(3):
        d = dirs[:, axis]
        with np.errstate(divide="ignore"):
            t_pos = (room_max[axis] - origin[axis]) / d
            t_neg = (room_min[axis] - origin[axis]) / d
        t = np.where(d > 0, t_pos, np.where(d < 0, t_neg, np.inf))
        side = (d > 0).astype(np.int64)
        better = t < t_best
        t_best = np.where(better, t, t_best)
        axis_best = np.where(better, axis, axis_best)
        side_best = np.where(better, side, side_best)
    return t_best, axis_best, side_best


def _box_entry(origin: np.ndarray, dirs: np.ndarray, bmin: np.ndarray,
               bmax: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-method entry distance into a box from outside (inf when missed)."""
    n = dirs.shape[0]
    t_near = np.full(n, -np.inf)
    t_far = np.full(n, np.inf)
    axis_near = np.zeros(n, dtype=np.int64)
    for axis in range(3):
        d = dirs[:, axis]
        o = origin[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (bmin[axis] - o) / d
            t2 = (bmax[axis] - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = d == 0
        inside_slab = (o >= bmin[axis]) & (o <= bmax[axis])
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
        update = lo > t_near
        t_near = np.where(update, lo, t_near)
        axis_near = np.where(update, axis, axis_near)
        t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_near > 1e-9) & np.isfinite(t_near)
    t_near = np.where(hit, t_near, np.inf)
    return t_near, axis_near, hit


def _face_uv(points: np.ndarray, axis: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = points.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    for ax in range(3):
        sel = axis == ax
        if not sel.any():
            continue
        ua, va = _FACE_UV[ax]
        span_u = hi[ua] - lo[ua]
        span_v = hi[va] - lo[va]
        u[sel] = (points[sel, ua] - lo[ua]) / span_u
        v[sel] = (points[sel, va] - lo[va]) / span_v
    return u, v


def trace_rays(scene: BoxScene, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic nearest-hit query for rays starting in free space.

    Args:
        origin: (3,) camera position.
        dirs: (N, 3) unit ray directions.

    Returns:
        (depth, rgb): hit distances (N,) and surface colors (N, 3).
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_room, axis_room, side_room = _room_exit(origin, dirs, scene.room_min, scene.room_max)
    best_t = t_room
    # surface id: 0..5 room faces, then 6 + obstacle index
    best_surf = axis_room * 2 + side_room
    best_axis = axis_room
    for k, ob in enumerate(scene.obstacles):
        t, axis, hit = _box_entry(origin, dirs, ob.box_min, ob.box_max)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_surf = np.where(closer, 6 + k, best_surf)
        best_axis = np.where(closer, axis, best_axis)

    points = origin[None, :] + dirs * best_t[:, None]
    rgb = np.zeros((points.shape[0], 3))
    for face_idx, face in enumerate(_FACES):
        sel = best_surf == face_idx
        if not sel.any():
            continue
        ax = face_idx // 2
        u, v = _face_uv(points[sel], np.full(sel.sum(), ax), scene.room_min, scene.room_max)
        rgb[sel] = scene.wall_textures[face].shade(u, v)
    for k, ob in enumerate(scene.obstacles):
        sel = best_surf == 6 + k
        if not sel.any():
            continue
        u, v = _face_uv(points[sel], best_axis[sel], ob.box_min, ob.box_max)
        rgb[sel] = ob.texture.shade(u, v)
    return best_t, np.clip(rgb, 0.0, 1.0)


def render_ground_truth(scene: BoxScene, pose: CameraPose, width: int, height: int) -> RgbdPanorama:
    """Analytic equirectangular RGB-D render; every pixel valid.

    Raises:
        ValueError: when the pose is outside the room's free space.
    """
    if not scene.contains_free(pose.position):
        raise ValueError(f"camera position {pose.position} not in free space")
    vv, uu = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    dirs = pixel_to_direction(uu.ravel(), vv.ravel(), width, height)
    depth, rgb = trace_rays(scene, pose.position, dirs)
    return RgbdPanorama(rgb.reshape(height, width, 3), depth.reshape(height, width),
                        np.ones((height, width), dtype=bool))


def random_room(seed: int, min_cells: int = 3, max_cells: int = 6) -> BoxScene:
    """Procedurally textured box room; the seed fixes everything.

    Useful as a stand-in corpus for training the completion network: rooms
    differ in size, checker frequency, and palette.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    tex = {}
    for face in _FACES:
        a = np.clip(rng.random(3) * 0.9, 0.0, 1.0)
        b = np.clip(rng.random(3) * 0.9 + 0.1, 0.0, 1.0)
        tex[face] = Texture("checker", a, b, cells=int(rng.integers(min_cells, max_cells)))
    size = 1.5 + rng.random(3)
    return BoxScene(room_min=-size, room_max=size * (0.8 + 0.4 * rng.random(3)),
                    wall_textures=tex)


def oracle_completion(scene: BoxScene, pose: CameraPose, reprojected: RgbdPanorama) -> RgbdPanorama:
    """Fill the invalid pixels of a reprojection with analytic ground truth."""
    gt = render_ground_truth(scene, pose, reprojected.width, reprojected.height)
    valid = reprojected.valid
    rgb = np.where(valid[..., None], reprojected.rgb, gt.rgb)
    depth = np.where(valid, reprojected.depth, gt.depth)
    return RgbdPanorama(rgb, depth, np.ones_like(valid))


# ---------------------------------------------------------------------------
# JSON scene description
# ---------------------------------------------------------------------------


def _texture_to_dict(t: Texture) -> dict:
    return {
        "kind": t.kind,
        "color_a": [float(c) for c in t.color_a],
        "color_b": [float(c) for c in t.color_b],
        "cells": t.cells,
        "axis": t.axis,
    }


def _texture_from_dict(d: dict) -> Texture:
    return Texture(
        kind=d["kind"],
        color_a=d["color_a"],
        color_b=d.get("color_b", d["color_a"]),
        cells=int(d.get("cells", 8)),
        axis=d.get("axis", "u"),
    )


def scene_to_json(scene: BoxScene) -> dict:
    return {
        "room_min": [float(c) for c in scene.room_min],
        "room_max": [float(c) for c in scene.room_max],
        "wall_textures": {face: _texture_to_dict(t) for face, t in scene.wall_textures.items()},
        "obstacles": [
            {
                "box_min": [float(c) for c in ob.box_min],
                "box_max": [float(c) for c in ob.box_max],
                "texture": _texture_to_dict(ob.texture),
            }
            for ob in scene.obstacles
        ],
    }


def scene_from_json(doc: dict) -> BoxScene:
    return BoxScene(
        room_min=doc["room_min"],
        room_max=doc["room_max"],
        wall_textures={face: _texture_from_dict(t) for face, t in doc["wall_textures"].items()},
        obstacles=[
            BoxObstacle(ob["box_min"], ob["box_max"], _texture_from_dict(ob["texture"]))
            for ob in doc.get("obstacles", [])
        ],
    )


def save_scene(path, scene: BoxScene) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), indent=2))


def load_scene(path) -> BoxScene:
    return scene_from_json(json.loads(Path(path).read_text()))
