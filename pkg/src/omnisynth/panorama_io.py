"""PNG persistence for panoramas.

RGB is 8-bit PNG; depth is 16-bit grayscale PNG storing
``round(depth * depth_scale)`` with 0 meaning invalid; the validity mask is
an 8-bit PNG with 255 = valid. ``depth_scale`` defaults to 1000 units per
meter.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import RgbdPanorama

__all__ = [
    "DEFAULT_DEPTH_SCALE",
    "save_rgb",
    "load_rgb",
    "save_depth",
    "load_depth",
    "save_mask",
    "load_mask",
    "save_panorama",
    "load_panorama",
]

DEFAULT_DEPTH_SCALE = 1000.0


def save_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def load_rgb(path) -> np.ndarray:
    img = Image.open(Path(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_depth(path, depth: np.ndarray, valid: np.ndarray, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    raw = np.round(np.asarray(depth) * depth_scale)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    raw[~np.asarray(valid, dtype=bool)] = 0
    # valid zero-depth pixels would collide with the invalid sentinel; store
    # them at one quantization step instead
    raw[np.asarray(valid, dtype=bool) & (raw == 0)] = 1
    Image.fromarray(raw).save(Path(path), format="PNG")


def load_depth(path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> tuple[np.ndarray, np.ndarray]:
    img = Image.open(Path(path))
    raw = np.asarray(img, dtype=np.uint16)
    valid = raw > 0
    return raw.astype(np.float64) / depth_scale, valid


def save_mask(path, valid: np.ndarray) -> None:
    arr = np.where(np.asarray(valid, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    img = Image.open(Path(path)).convert("L")
    return np.asarray(img) > 127


def save_panorama(prefix, pano: RgbdPanorama, depth_scale: float = DEFAULT_DEPTH_SCALE) -> dict[str, Path]:
    """Write rgb/depth/mask PNGs as ``<prefix>.rgb.png`` etc."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "rgb": prefix.with_suffix(".rgb.png"),
        "depth": prefix.with_suffix(".depth.png"),
        "mask": prefix.with_suffix(".mask.png"),
    }
    save_rgb(paths["rgb"], pano.rgb)
    save_depth(paths["depth"], pano.depth, pano.valid, depth_scale)
    save_mask(paths["mask"], pano.valid)
    return paths


def load_panorama(prefix, depth_scale: float = DEFAULT_DEPTH_SCALE) -> RgbdPanorama:
    prefix = Path(prefix)
    rgb = load_rgb(prefix.with_suffix(".rgb.png"))
    depth, depth_valid = load_depth(prefix.with_suffix(".depth.png"), depth_scale)
    mask_path = prefix.with_suffix(".mask.png")
    valid = load_mask(mask_path) & depth_valid if mask_path.exists() else depth_valid
    rgb = rgb * valid[..., None]
    depth = depth * valid
    return RgbdPanorama(rgb, depth, valid)
