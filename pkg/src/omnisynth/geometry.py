"""Equirectangular panorama geometry: pixel/direction mapping, RGB-D
lifting, z-buffered reprojection, depth densification, and camera grids.

Conventions:
  - Image: u in [0, W), v in [0, H), W = 2H; pixel centers at integer
    coordinates, sample point of pixel (u, v) is (u + 0.5, v + 0.5) in
    normalized raster space.
  - Longitude lam in [-pi, pi), 0 at +X, increasing toward +Y;
    lam = 2*pi*(u + 0.5)/W - pi.
  - Latitude phi in (-pi/2, pi/2), +pi/2 at the top row limit;
    phi = pi/2 - pi*(v + 0.5)/H.
  - Direction (x, y, z) = (cos(phi)cos(lam), cos(phi)sin(lam), sin(phi));
    the world Z axis is parallel to gravity.
  - Camera poses are pure translations in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RgbdPanorama",
    "CameraPose",
    "PointCloud",
    "DepthBounds",
    "CandidateGrid",
    "pixel_to_direction",
    "direction_to_pixel",
    "panorama_to_points",
    "reproject",
    "densify_depth",
    "depth_bounds",
    "reprojection_grid",
    "evaluation_points",
    "sample_equirect_bilinear",
    "perspective_crop",
]


@dataclass
class RgbdPanorama:
    """Equirectangular RGB + metric depth + per-pixel validity.

    rgb is (H, W, 3) in [0, 1], depth is (H, W) meters, valid is (H, W)
    bool (True where depth/color were observed). Width must be 2 * height.
    """

    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        h, w = self.depth.shape
        if w != 2 * h:
            raise ValueError(f"panorama width {w} must equal 2 * height {h}")
        if self.rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} inconsistent with depth {self.depth.shape}")
        if self.valid.shape != (h, w):
            raise ValueError("valid mask shape mismatch")
        if self.valid.any():
            dv = self.depth[self.valid]
            if not np.isfinite(dv).all() or (dv < 0).any():
                raise ValueError("depth must be finite and >= 0 on valid pixels")
        if self.rgb.min() < -1e-9 or self.rgb.max() > 1 + 1e-9:
            raise ValueError("rgb components must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "RgbdPanorama":
        return RgbdPanorama(self.rgb.copy(), self.depth.copy(), self.valid.copy())


@dataclass
class CameraPose:
    """Pure-translation camera pose; Z is parallel to gravity."""

    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.isfinite(self.position).all():
            raise ValueError("pose position must be finite")


@dataclass
class PointCloud:
    """Colored 3-D points: positions (N, 3) meters, colors (N, 3) in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError("positions/colors length mismatch")
        if not np.isfinite(self.positions).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class DepthBounds:
    """Extent of the observed scene on the horizontal axes, input camera at origin."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < 0 < self.x_max and self.y_min < 0 < self.y_max):
            raise ValueError(f"bounds must straddle the origin: {self}")


@dataclass
class CandidateGrid:
    """Camera positions on the two horizontal axes with chain adjacency."""

    poses: list[CameraPose]
    neighbors: list[list[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.position for p in self.poses])


def pixel_to_direction(u, v, width: int, height: int) -> np.ndarray:
    """Unit viewing direction of pixel coordinates (u, v).

    Accepts scalars or arrays; continuous coordinates are allowed. Raises
    for coordinates outside [0, width) x [0, height) (arrays are validated
    elementwise against [-0.5, size - 0.5) to permit sub-pixel sampling).

    Returns:
        Array (..., 3) of unit directions.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < -0.5) or np.any(u >= width) or np.any(v < -0.5) or np.any(v >= height):
        raise ValueError("pixel coordinates out of range")
    lam = 2.0 * np.pi * (u + 0.5) / width - np.pi
    phi = np.pi / 2.0 - np.pi * (v + 0.5) / height
    cp = np.cos(phi)
    return np.stack([cp * np.cos(lam), cp * np.sin(lam), np.sin(phi)], axis=-1)


def direction_to_pixel(direction, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates of unit direction(s); inverse of
    ``pixel_to_direction``. u wraps modulo width (seam at lam = +-pi).

    Raises:
        ValueError: for zero or non-unit directions (|d| - 1 beyond 1e-6).
    """
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm == 0):
        raise ValueError("zero direction vector")
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("direction must be unit length within 1e-6")
    lam = np.arctan2(d[..., 1], d[..., 0])
    phi = np.arcsin(np.clip(d[..., 2] / norm, -1.0, 1.0))
    u = np.mod((lam + np.pi) * width / (2.0 * np.pi) - 0.5, width)
    # np.mod of a tiny negative can round up to exactly `width`
    u = np.where(u >= width, u - width, u)
    v = (np.pi / 2.0 - phi) * height / np.pi - 0.5
    return u, v


def _direction_to_pixel_any(vec: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like direction_to_pixel but for arbitrary-length vectors; also returns norms."""
    norm = np.linalg.norm(vec, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    lam = np.arctan2(vec[..., 1], vec[..., 0])
    phi = np.arcsin(np.clip(vec[..., 2] / safe, -1.0, 1.0))
    u = np.mod((lam + np.pi) * width / (2.0 * np.pi) - 0.5, width)
    u = np.where(u >= width, u - width, u)
    v = (np.pi / 2.0 - phi) * height / np.pi - 0.5
    return u, v, norm


def panorama_to_points(pano: RgbdPanorama) -> PointCloud:
    """Lift every valid pixel to a colored 3-D point at depth * direction."""
    if not pano.valid.any():
        raise ValueError("panorama has no valid pixels to lift")
    h, w = pano.height, pano.width
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = pixel_to_direction(uu[pano.valid], vv[pano.valid], w, h)
    positions = dirs * pano.depth[pano.valid][:, None]
    colors = pano.rgb[pano.valid]
    return PointCloud(positions, colors)


def reproject(cloud: PointCloud, target: CameraPose, width: int, height: int) -> RgbdPanorama:
    """Splat a point cloud into the panorama of a virtual camera.

    Each point lands on the nearest pixel of its viewing direction from
    ``target``; conflicts are resolved nearest-depth-first with stable
    point-index tie-breaking. Pixels receiving no point are invalid.
    """
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    vec = cloud.positions - target.position[None, :]
    u, v, dist = _direction_to_pixel_any(vec, width, height)
    keep = dist > 0
    u, v, dist = u[keep], v[keep], dist[keep]
    colors = cloud.colors[keep]

    ui = np.floor(u + 0.5).astype(np.int64) % width
    vi = np.clip(np.floor(v + 0.5).astype(np.int64), 0, height - 1)
    flat = vi * width + ui

    order = np.lexsort((np.arange(len(flat)), dist, flat))
    flat_sorted = flat[order]
    first = np.ones(len(flat_sorted), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]

    rgb = np.zeros((height * width, 3))
    depth = np.zeros(height * width)
    valid = np.zeros(height * width, dtype=bool)
    rgb[flat[winners]] = colors[winners]
    depth[flat[winners]] = dist[winners]
    valid[flat[winners]] = True
    return RgbdPanorama(rgb.reshape(height, width, 3), depth.reshape(height, width), valid.reshape(height, width))


def densify_depth(depth: np.ndarray, valid: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Median-filter a depth plane, honoring validity and the seam wrap.

    Valid pixels are replaced by the median of valid values inside their
    window; invalid pixels are filled with that median when at least half
    of the in-bounds window is valid, otherwise left invalid. Columns wrap
    horizontally; rows truncate at the poles.

    Returns:
        (filtered_depth, new_valid)
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    h, w = depth.shape
    r = window // 2
    layers = []
    layer_valid = []
    for dv in range(-r, r + 1):
        if dv < 0:
            shifted = np.vstack([np.zeros((-dv, w)), depth[:dv]])
            svalid = np.vstack([np.zeros((-dv, w), dtype=bool), valid[:dv]])
        elif dv > 0:
            shifted = np.vstack([depth[dv:], np.zeros((dv, w))])
            svalid = np.vstack([valid[dv:], np.zeros((dv, w), dtype=bool)])
        else:
            shifted, svalid = depth, valid
        for du in range(-r, r + 1):
            layers.append(np.roll(shifted, -du, axis=1))
            layer_valid.append(np.roll(svalid, -du, axis=1))
    stack = np.stack(layers)
    stack_valid = np.stack(layer_valid)

    big = np.where(stack_valid, stack, np.inf)
    big.sort(axis=0)
    count = stack_valid.sum(axis=0)
    cnt = np.maximum(count, 1)
    lo = np.take_along_axis(big, ((cnt - 1) // 2)[None], axis=0)[0]
    hi = np.take_along_axis(big, (cnt // 2)[None], axis=0)[0]
    med = 0.5 * (lo + hi)

    rows_in = np.minimum(np.arange(h) + r + 1, h) - np.maximum(np.arange(h) - r, 0)
    in_bounds = (rows_in * window)[:, None] * np.ones((1, w), dtype=int)
    fill = (~valid) & (count * 2 >= in_bounds)
    out_valid = valid | fill
    out_depth = np.where(valid | fill, med, 0.0)
    out_depth = np.where(out_valid, out_depth, 0.0)
    return out_depth, out_valid


def depth_bounds(pano: RgbdPanorama) -> DepthBounds:
    """Horizontal extent of the lifted points of a panorama."""
    cloud = panorama_to_points(pano)
    x = cloud.positions[:, 0]
    y = cloud.positions[:, 1]
    return DepthBounds(float(x.min()), float(x.max()), float(y.min()), float(y.max()))


def reprojection_grid(bounds: DepthBounds, count_per_axis: int) -> CandidateGrid:
    """Equally spaced candidate positions on half the depth extent.

    ``count_per_axis`` positions span [x_min/2, x_max/2] on X and the same
    count spans [y_min/2, y_max/2] on Y, all at Z = 0. Adjacency links
    consecutive positions along each axis chain (1 or 2 neighbors each).
    """
    if count_per_axis < 2:
        raise ValueError("count_per_axis must be >= 2")
    xs = np.linspace(bounds.x_min / 2.0, bounds.x_max / 2.0, count_per_axis)
    ys = np.linspace(bounds.y_min / 2.0, bounds.y_max / 2.0, count_per_axis)
    poses = [CameraPose(np.array([x, 0.0, 0.0])) for x in xs]
    poses += [CameraPose(np.array([0.0, y, 0.0])) for y in ys]
    neighbors: list[list[int]] = []
    for chain_start in (0, count_per_axis):
        for i in range(count_per_axis):
            idx = chain_start + i
            nb = []
            if i > 0:
                nb.append(idx - 1)
            if i < count_per_axis - 1:
                nb.append(idx + 1)
            neighbors.append(nb)
    return CandidateGrid(poses, neighbors)


def evaluation_points(bounds: DepthBounds) -> list[CameraPose]:
    """The four likelihood-evaluation positions at quarter extent, Z = 0."""
    qx_lo, qx_hi = bounds.x_min / 4.0, bounds.x_max / 4.0
    qy_lo, qy_hi = bounds.y_min / 4.0, bounds.y_max / 4.0
    return [
        CameraPose(np.array([qx_lo, qy_lo, 0.0])),
        CameraPose(np.array([qx_lo, qy_hi, 0.0])),
        CameraPose(np.array([qx_hi, qy_lo, 0.0])),
        CameraPose(np.array([qx_hi, qy_hi, 0.0])),
    ]


def sample_equirect_bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear sample of an (H, W, C) image at continuous pixel coords.

    u wraps horizontally; v clamps at the poles.
    """
    h, w = image.shape[:2]
    u = np.mod(u, w)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = (u0 + 1) % w
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = image[v0, u0] * (1 - fu) + image[v0, u1] * fu
    bot = image[v1, u0] * (1 - fu) + image[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def _pinhole_directions(view_dir: np.ndarray, fov_deg: float, out_w: int, out_h: int) -> np.ndarray:
    """Unit ray directions of a pinhole camera looking along view_dir."""
    forward = np.asarray(view_dir, dtype=np.float64)
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("zero view direction")
    forward = forward / n
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    down /= np.linalg.norm(down)

    tan_h = np.tan(np.radians(fov_deg) / 2.0)
    tan_v = tan_h * out_h / out_w
    xs = (2.0 * (np.arange(out_w) + 0.5) / out_w - 1.0) * tan_h
    ys = (2.0 * (np.arange(out_h) + 0.5) / out_h - 1.0) * tan_v
    gx, gy = np.meshgrid(xs, ys)
    dirs = forward[None, None] + gx[..., None] * right[None, None] + gy[..., None] * down[None, None]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def perspective_crop(pano: RgbdPanorama, view_dir, fov_deg: float, out_w: int, out_h: int) -> np.ndarray:
    """Gnomonic (pinhole) resampling of a panorama.

    Args:
        view_dir: central viewing direction (any nonzero 3-vector).
        fov_deg: horizontal field of view in (0, 180).
        out_w, out_h: output size in pixels.

    Returns:
        (out_h, out_w, 3) RGB crop, bilinear-sampled with seam wrap.
    """
    if not 0.0 < fov_deg < 180.0:
        raise ValueError("fov must lie strictly between 0 and 180 degrees")
    dirs = _pinhole_directions(view_dir, fov_deg, out_w, out_h)
    u, v = direction_to_pixel(dirs.reshape(-1, 3), pano.width, pano.height)
    rgb = sample_equirect_bilinear(pano.rgb, u, v)
    return rgb.reshape(out_h, out_w, 3)
