"""Radiance-field model and training.

The field is a pair of coarse/fine MLPs mapping positionally-encoded
(position, direction) to (density, color), rendered by alpha compositing
along rays. Rays for equirectangular cameras come one per pixel from the
panorama pixel grid; training samples supervised rays uniformly from the
valid pixels of the supervision set and minimizes the L2 photometric loss
of both passes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Linear, Module, Tape, Tensor, adam_step, lr_schedule
from .geometry import CameraPose, RgbdPanorama, pixel_to_direction
from .runtime import worker_count

__all__ = [
    "TrainConfig",
    "Rays",
    "EquirectCamera",
    "PinholeCamera",
    "NerfMlp",
    "RadianceField",
    "positional_encode",
    "rays_for_panorama",
    "stratified_samples",
    "importance_samples",
    "volume_render",
    "render_view",
    "train",
]


@dataclass
class TrainConfig:
    """Hyperparameters of the photometric training loop."""

    n_coarse: int = 64
    n_fine: int = 128
    batch_size: int = 1400
    iterations: int = 200000
    lr_start: float = 5.0e-4
    lr_end: float = 5.0e-5
    seed: int = 0
    hook_every: int = 500

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("sample counts must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch size and iterations must be positive")
        if self.hook_every < 1:
            raise ValueError("hook_every must be >= 1")


@dataclass
class Rays:
    """A batch of rays; directions unit length, colors optional supervision."""

    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("ray directions must be unit length within 1e-6")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class EquirectCamera:
    width: int
    height: int


@dataclass
class PinholeCamera:
    view_dir: np.ndarray
    fov_deg: float
    width: int
    height: int


def positional_encode(x: np.ndarray, num_freqs: int) -> np.ndarray:
    """Concatenate x with (sin, cos)(2^k x) for k < num_freqs.

    Output feature size is dim * (1 + 2 * num_freqs); num_freqs = 0 is the
    identity.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    x = np.asarray(x)
    if num_freqs == 0:
        return x.copy()
    parts = [x]
    for k in range(num_freqs):
        scaled = x * (2.0 ** k)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def rays_for_panorama(pose: CameraPose, width: int, height: int) -> Rays:
    """One ray per pixel of an equirectangular camera at ``pose``."""
    vv, uu = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    dirs = pixel_to_direction(uu.ravel(), vv.ravel(), width, height)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return Rays(origins, dirs)


def stratified_samples(near: float, far: float, n_rays: int, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per equal-width bin of [near, far], per ray."""
    if not near < far:
        raise ValueError("near must be < far")
    edges = np.linspace(near, far, n_samples + 1)
    width = np.diff(edges)
    u = rng.random((n_rays, n_samples))
    return edges[:-1][None, :] + u * width[None, :]


def importance_samples(coarse_depths: np.ndarray, coarse_weights: np.ndarray,
                       n_fine: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant density over the
    coarse bins, merged with the coarse depths and sorted.

    Bin i spans [depth_i, depth_{i+1}) and carries mass weight_i; when a
    row's total mass vanishes the draw falls back to uniform. Exact
    duplicates after merging are nudged apart so the result is strictly
    increasing.
    """
    depths = np.asarray(coarse_depths, dtype=np.float64)
    weights = np.asarray(coarse_weights, dtype=np.float64)
    if depths.shape != weights.shape:
        raise ValueError("depths/weights shape mismatch")
    if np.any(weights < 0):
        raise ValueError("weights must be >= 0")
    n_rays, n_coarse = depths.shape
    masses = weights[:, :-1].copy()
    totals = masses.sum(axis=1, keepdims=True)
    degenerate = totals[:, 0] <= 1e-12
    if degenerate.any():
        masses[degenerate] = 1.0
        totals = masses.sum(axis=1, keepdims=True)
    pdf = masses / totals
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = rng.random((n_rays, n_fine))
    # bin index of each draw: count of cdf internal edges <= u
    idx = (u[:, :, None] >= cdf[:, None, 1:-1]).sum(axis=2)
    rows = np.arange(n_rays)[:, None]
    lo = depths[rows, idx]
    hi = depths[rows, idx + 1]
    c_lo = cdf[rows, idx]
    span = np.maximum(pdf[rows, idx], 1e-12)
    fine = lo + (u - c_lo) / span * (hi - lo)

    merged = np.sort(np.concatenate([depths, fine], axis=1), axis=1)
    eps = 1e-9 * np.maximum(merged[:, -1] - merged[:, 0], 1e-12)
    for j in range(1, merged.shape[1]):
        clash = merged[:, j] <= merged[:, j - 1]
        if clash.any():
            merged[clash, j] = merged[clash, j - 1] + eps[clash]
    return merged


def volume_render(sigmas, colors, distances: np.ndarray, far: float):
    """Alpha-composite samples along rays.

    Args:
        sigmas: densities (R, N), Tensor or array, >= 0.
        colors: colors (R, N, 3), Tensor or array.
        distances: strictly increasing sample depths (R, N), plain array.
        far: end of the integration interval (defines the last interval).

    Returns:
        (rgb, weights, expected_depth) as Tensors: rgb (R, 3),
        weights (R, N) with sum = 1 - final transmittance, depth (R,).
    """
    distances = np.asarray(distances, dtype=np.float64)
    if np.any(np.diff(distances, axis=1) <= 0):
        raise ValueError("sample distances must be strictly increasing")
    sig = sigmas if isinstance(sigmas, Tensor) else Tensor(sigmas)
    col = colors if isinstance(colors, Tensor) else Tensor(colors)
    if np.any(sig.data < 0):
        raise ValueError("densities must be >= 0")
    if sig.data.shape != distances.shape:
        raise ValueError(f"sigma shape {sig.data.shape} != distances shape {distances.shape}")
    dtype = sig.data.dtype
    last = np.maximum(far - distances[:, -1:], 0.0)
    deltas = np.concatenate([np.diff(distances, axis=1), last], axis=1).astype(dtype)

    s = dc.mul(sig, deltas)
    acc_inc = dc.cumsum(s, axis=1)
    acc_exc = dc.sub(acc_inc, s)
    weights = dc.sub(dc.exp(dc.neg(acc_exc)), dc.exp(dc.neg(acc_inc)))
    w3 = dc.reshape(weights, (*weights.shape, 1))
    rgb = dc.tensor_sum(dc.mul(w3, col), axis=1)
    depth = dc.tensor_sum(dc.mul(weights, distances.astype(dtype)), axis=1)
    return rgb, weights, depth


class NerfMlp(Module):
    """Density/color MLP with positional-encoding inputs.

    The trunk consumes encoded positions (skip re-injection halfway for
    deeper trunks); density is a relu head, color a sigmoid head fed by a
    feature bottleneck concatenated with the encoded direction.
    """

    def __init__(self, pos_dim: int, dir_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.pos_dim = pos_dim
        self.dir_dim = dir_dim
        self.hidden = hidden
        self.depth = depth
        self.skip_at = depth // 2 if depth >= 5 else None
        self.layers: list[Linear] = []
        in_dim = pos_dim
        for i in range(depth):
            layer = Linear(in_dim, hidden, rng, dtype=dtype)
            self.add_child(f"trunk{i}", layer)
            self.layers.append(layer)
            in_dim = hidden + (pos_dim if self.skip_at is not None and i + 1 == self.skip_at else 0)
        self.sigma_head = self.add_child("sigma", Linear(hidden, 1, rng, dtype=dtype))
        self.feature = self.add_child("feature", Linear(hidden, hidden, rng, dtype=dtype))
        self.color1 = self.add_child("color1", Linear(hidden + dir_dim, max(hidden // 2, 8), rng, dtype=dtype))
        self.color2 = self.add_child("color2", Linear(max(hidden // 2, 8), 3, rng, dtype=dtype))

    def __call__(self, pos_enc: Tensor, dir_enc: Tensor) -> tuple[Tensor, Tensor]:
        h = pos_enc
        for i, layer in enumerate(self.layers):
            h = dc.relu(layer(h))
            if self.skip_at is not None and i + 1 == self.skip_at:
                h = dc.concat([h, pos_enc], axis=1)
        sigma = dc.relu(self.sigma_head(h))[:, 0]
        feat = self.feature(h)
        c = dc.relu(self.color1(dc.concat([feat, dir_enc], axis=1)))
        rgb = dc.sigmoid(self.color2(c))
        return sigma, rgb


class RadianceField:
    """Coarse + fine MLP pair with shared architecture and scene bounds."""

    def __init__(self, near: float, far: float, l_pos: int = 10, l_dir: int = 4,
                 hidden: int = 256, depth: int = 8, seed: int = 0, dtype=np.float32):
        if not 0 < near < far:
            raise ValueError("need 0 < near < far")
        # quantize to checkpoint precision so save/load round trips bit-exactly
        self.near = float(np.float32(near))
        self.far = float(np.float32(far))
        self.l_pos = l_pos
        self.l_dir = l_dir
        self.hidden = hidden
        self.depth = depth
        self.dtype = dtype
        pos_dim = 3 * (1 + 2 * l_pos)
        dir_dim = 3 * (1 + 2 * l_dir)
        ss = np.random.SeedSequence(seed)
        rng_c, rng_f = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))
        self.coarse = NerfMlp(pos_dim, dir_dim, hidden, depth, rng_c, dtype)
        self.fine = NerfMlp(pos_dim, dir_dim, hidden, depth, rng_f, dtype)

    def named_params(self) -> dict[str, Tensor]:
        out = {f"coarse.{k}": v for k, v in self.coarse.named_params().items()}
        out.update({f"fine.{k}": v for k, v in self.fine.named_params().items()})
        return out

    def query(self, mlp: NerfMlp, points: np.ndarray, dirs: np.ndarray) -> tuple[Tensor, Tensor]:
        """Run one MLP on flat (N, 3) points/directions."""
        pe = positional_encode(points.astype(self.dtype), self.l_pos)
        de = positional_encode(dirs.astype(self.dtype), self.l_dir)
        return mlp(Tensor(pe), Tensor(de))

    def render_rays(self, mlp: NerfMlp, origins: np.ndarray, dirs: np.ndarray,
                    depths: np.ndarray):
        """Query + composite one MLP over per-ray sample depths."""
        n_rays, n_samples = depths.shape
        points = origins[:, None, :] + dirs[:, None, :] * depths[:, :, None]
        pe = positional_encode(points.reshape(-1, 3).astype(self.dtype), self.l_pos)
        de = np.repeat(positional_encode(dirs.astype(self.dtype), self.l_dir), n_samples, axis=0)
        sigma, rgb = mlp(Tensor(pe), Tensor(de))
        sigma = dc.reshape(sigma, (n_rays, n_samples))
        rgb = dc.reshape(rgb, (n_rays, n_samples, 3))
        return volume_render(sigma, rgb, depths, self.far)

    # --- persistence -----------------------------------------------------

    def save(self, path) -> None:
        params = {"meta.arch": np.array([self.near, self.far, self.l_pos, self.l_dir,
                                         self.hidden, self.depth], dtype=np.float32)}
        params.update(self.named_params())
        dc.save_params(path, params)

    @classmethod
    def load(cls, path) -> "RadianceField":
        state = dc.load_params(path)
        meta = state.pop("meta.arch")
        near, far, l_pos, l_dir, hidden, depth = meta
        field = cls(float(near), float(far), int(l_pos), int(l_dir), int(hidden), int(depth))
        coarse_state = {k[len("coarse."):]: v for k, v in state.items() if k.startswith("coarse.")}
        fine_state = {k[len("fine."):]: v for k, v in state.items() if k.startswith("fine.")}
        field.coarse.load_state(coarse_state)
        field.fine.load_state(fine_state)
        return field


def _camera_rays(pose: CameraPose, camera) -> Rays:
    if isinstance(camera, EquirectCamera):
        return rays_for_panorama(pose, camera.width, camera.height)
    if isinstance(camera, PinholeCamera):
        from .geometry import _pinhole_directions

        dirs = _pinhole_directions(np.asarray(camera.view_dir, dtype=np.float64),
                                   camera.fov_deg, camera.width, camera.height)
        dirs = dirs.reshape(-1, 3)
        origins = np.broadcast_to(pose.position, dirs.shape).copy()
        return Rays(origins, dirs)
    raise TypeError(f"unsupported camera {camera!r}")


def _render_chunk(field: RadianceField, origins, dirs, n_coarse, n_fine, rng):
    t_coarse = stratified_samples(field.near, field.far, len(origins), n_coarse, rng)
    _, w_c, _ = field.render_rays(field.coarse, origins, dirs, t_coarse)
    t_all = importance_samples(t_coarse, w_c.data, n_fine, rng) if n_fine > 0 else t_coarse
    rgb, _, depth = field.render_rays(field.fine, origins, dirs, t_all)
    return rgb.data, depth.data


def render_view(field: RadianceField, pose: CameraPose, camera,
                n_coarse: int = 64, n_fine: int = 128, seed: int = 0,
                chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Hierarchical render of a camera view; returns (rgb, expected depth).

    The fine pass supplies the returned image. Chunks may run on a worker
    pool (see OMNISYNTH_THREADS) and are joined in index order, so the
    output is identical for any worker count.
    """
    rays = _camera_rays(pose, camera)
    n = len(rays)
    chunks = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    rngs = [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(len(chunks))]
    results: list = [None] * len(chunks)

    def run(k: int):
        lo, hi = chunks[k]
        results[k] = _render_chunk(field, rays.origins[lo:hi], rays.directions[lo:hi],
                                   n_coarse, n_fine, rngs[k])

    workers = worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(chunks))))
    else:
        for k in range(len(chunks)):
            run(k)

    rgb = np.concatenate([r[0] for r in results], axis=0)
    depth = np.concatenate([r[1] for r in results], axis=0)
    h, w = camera.height, camera.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


@dataclass
class SupervisionImage:
    """A posed panorama contributing its valid pixels as supervised rays."""

    pano: RgbdPanorama
    pose: CameraPose


@dataclass
class TrainResult:
    field: RadianceField
    loss_trace: list[tuple[int, float, float, float]] = dc_field(default_factory=list)


def _ray_arrays(images: Sequence[SupervisionImage], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    origins, dirs, targets = [], [], []
    for img in images:
        pano, pose = img.pano, img.pose
        if not pano.valid.any():
            continue
        h, w = pano.height, pano.width
        vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d = pixel_to_direction(uu[pano.valid], vv[pano.valid], w, h)
        origins.append(np.broadcast_to(pose.position, d.shape))
        dirs.append(d)
        targets.append(pano.rgb[pano.valid])
    if not origins:
        raise ValueError("supervision set has no valid pixels")
    return (np.concatenate(origins).astype(dtype),
            np.concatenate(dirs).astype(dtype),
            np.concatenate(targets).astype(dtype))


def train(field: RadianceField, supervision: Sequence[SupervisionImage], config: TrainConfig,
          selection_hook: Callable[[int, RadianceField], Sequence[SupervisionImage] | None] | None = None,
          ) -> TrainResult:
    """Photometric training with an optional completion-swap hook.

    Every iteration draws ``batch_size`` rays uniformly from the valid
    pixels of the current supervision set, renders coarse + fine, and takes
    an Adam step on the summed L2 losses with the exponential lr schedule.
    ``selection_hook(step, field)`` runs every ``hook_every`` iterations and
    may return a replacement for the swappable tail of the supervision list
    (the selected completions); returning None keeps the current set.
    """
    if not supervision:
        raise ValueError("supervision must be non-empty")
    dtype = field.dtype
    base = list(supervision)
    origins, dirs, targets = _ray_arrays(base, dtype)

    params = field.named_params()
    adam = AdamState()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    result = TrainResult(field)

    for step in range(1, config.iterations + 1):
        idx = rng.integers(0, len(origins), size=config.batch_size)
        o = origins[idx].astype(np.float64)
        d = dirs[idx].astype(np.float64)
        target = Tensor(targets[idx])

        lr = lr_schedule(step - 1, max(config.iterations, 1), config.lr_start, config.lr_end)
        with Tape() as tape:
            t_coarse = stratified_samples(field.near, field.far, len(o), config.n_coarse, rng)
            rgb_c, w_c, _ = field.render_rays(field.coarse, o, d, t_coarse)
            if config.n_fine > 0:
                t_all = importance_samples(t_coarse, w_c.data, config.n_fine, rng)
            else:
                t_all = t_coarse
            rgb_f, _, _ = field.render_rays(field.fine, o, d, t_all)
            loss_c = dc.mean(dc.square(dc.sub(rgb_c, target)))
            loss_f = dc.mean(dc.square(dc.sub(rgb_f, target)))
            loss = dc.add(loss_c, loss_f)
            grads = tape.backward(loss)

        named_grads = {name: grads[t] for name, t in params.items() if t in grads}
        adam_step(params, named_grads, adam, lr)
        for t in params.values():
            t.grad = None
        result.loss_trace.append((step, loss_c.item(), loss_f.item(), lr))

        if selection_hook is not None and step % config.hook_every == 0 and step < config.iterations:
            replacement = selection_hook(step, field)
            if replacement is not None:
                origins, dirs, targets = _ray_arrays(list(replacement), dtype)

    return result
