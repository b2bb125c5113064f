"""Missing-region completion for reprojected panoramas.

Two completers share one interface: a classical seam-aware diffusion fill,
and a small encoder/decoder/discriminator network built from residual
blocks with circular padding (RBCP). The network cyclically shifts 37.5%
of its feature channels by quarter/half/three-quarter turns, which widens
the receptive field across the panorama seam; the discriminator score of a
completed panorama doubles as its likelihood during position selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Conv2dCircular, Linear, Module, Tape, Tensor, adam_step
from .geometry import RgbdPanorama

__all__ = [
    "CompletionResult",
    "CompletionTrainConfig",
    "CompletionNet",
    "random_mask",
    "cyclic_shift",
    "RbcpBlock",
    "SelfAttention",
    "complete",
    "diffusion_fill",
    "discriminator_score",
    "train_completion",
]

SHIFT_FRACTION = 0.375


@dataclass
class CompletionResult:
    """A fully-valid completed panorama and its discriminator score."""

    pano: RgbdPanorama
    score: float


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def random_mask(width: int, height: int, rng: np.random.Generator,
                coverage_target: float) -> np.ndarray:
    """Observation mask from random free-form strokes and rectangles.

    Shapes are carved (wrap-aware in u) until the observed fraction falls
    to ``coverage_target``; each shape is budgeted against the remaining
    deficit so the final fraction lands within a few pixels below target.
    """
    if not 0.0 < coverage_target < 1.0:
        raise ValueError("coverage_target must lie strictly in (0, 1)")
    observed = np.ones((height, width), dtype=bool)
    total = width * height
    guard = 0
    while observed.sum() / total > coverage_target and guard < 10_000:
        guard += 1
        deficit = observed.sum() / total - coverage_target
        budget = max(int(deficit * total), 4)
        if rng.random() < 0.5:
            _carve_stroke(observed, rng, budget)
        else:
            _carve_rect(observed, rng, budget)
    return observed


def _carve_rect(observed: np.ndarray, rng: np.random.Generator, budget: int):
    h, w = observed.shape
    side = max(int(np.sqrt(budget)), 2)
    rh = int(rng.integers(2, max(3, min(side, h // 2) + 1)))
    rw = int(rng.integers(2, max(3, min(budget // rh + 1, w // 2) + 1)))
    y0 = int(rng.integers(0, h))
    x0 = int(rng.integers(0, w))
    ys = np.arange(y0, min(y0 + rh, h))
    xs = np.arange(x0, x0 + rw) % w
    observed[np.ix_(ys, xs)] = False


def _carve_stroke(observed: np.ndarray, rng: np.random.Generator, budget: int):
    h, w = observed.shape
    thick = int(rng.integers(1, max(2, min(h // 8, int(np.sqrt(budget) / 2) + 1) + 1)))
    x = float(rng.integers(0, w))
    y = float(rng.integers(0, h))
    ang = rng.random() * 2.0 * np.pi
    carved = 0
    for _ in range(int(rng.integers(2, 7))):
        length = int(rng.integers(3, max(4, w // 5)))
        for _ in range(length):
            x = (x + np.cos(ang)) % w
            y = min(max(y + np.sin(ang), 0.0), h - 1.0)
            yi, xi = int(y), int(x)
            ys = np.arange(max(yi - thick, 0), min(yi + thick + 1, h))
            xs = np.arange(xi - thick, xi + thick + 1) % w
            observed[np.ix_(ys, xs)] = False
            carved += len(ys) * len(xs)
            if carved >= budget:
                return
        ang += (rng.random() - 0.5) * np.pi


# ---------------------------------------------------------------------------
# cyclic channel shift
# ---------------------------------------------------------------------------


def _shift_plan(channels: int, width: int, fraction: float) -> tuple[int, list[int]]:
    if width % 4 != 0:
        raise ValueError(f"feature width {width} must be divisible by 4")
    k = int(channels * fraction)
    if k % 3 != 0:
        raise ValueError(f"shifted channel count {k} must split into 3 rotation groups")
    return k // 3, [width // 4, width // 2, 3 * width // 4]


def cyclic_shift(features, fraction: float = SHIFT_FRACTION):
    """Shift three equal channel groups by quarter, half, and three-quarter
    width; remaining channels pass through. Accepts (C, H, W) or
    (N, C, H, W), ndarray or Tensor (differentiable)."""
    is_tensor = isinstance(features, Tensor)
    data = features.data if is_tensor else np.asarray(features)
    if data.ndim not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {data.shape}")
    c_axis = data.ndim - 3
    channels, width = data.shape[c_axis], data.shape[-1]
    group, shifts = _shift_plan(channels, width, fraction)
    if group == 0:
        return features if is_tensor else data.copy()

    if not is_tensor:
        out = data.copy()
        for g, s in enumerate(shifts):
            sel = [slice(None)] * data.ndim
            sel[c_axis] = slice(g * group, (g + 1) * group)
            out[tuple(sel)] = np.roll(data[tuple(sel)], s, axis=-1)
        return out

    parts = []
    for g, s in enumerate(shifts):
        sel = [slice(None)] * data.ndim
        sel[c_axis] = slice(g * group, (g + 1) * group)
        parts.append(dc.roll(features[tuple(sel)], s, axis=data.ndim - 1))
    sel = [slice(None)] * data.ndim
    sel[c_axis] = slice(3 * group, channels)
    parts.append(features[tuple(sel)])
    return dc.concat(parts, axis=c_axis)


def _shift_applicable(channels: int, width: int, fraction: float = SHIFT_FRACTION) -> bool:
    return width % 4 == 0 and int(channels * fraction) % 3 == 0 and int(channels * fraction) > 0


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------


class RbcpBlock(Module):
    """Residual block with circular padding in start/normal/down/up modes.

    start and down halve H and W (stride-2 first conv), up doubles them
    (nearest upsample before the convs), normal preserves shape. The skip
    path projects with a 1x1 conv whenever shape or channels change. With
    ``shift=True`` the output channels are cyclically shifted whenever the
    output width allows it.
    """

    def __init__(self, mode: str, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=np.float32, shift: bool = False):
        super().__init__()
        if mode not in ("s", "n", "d", "u"):
            raise ValueError(f"unknown RBCP mode {mode!r}")
        if mode == "n" and in_ch != out_ch:
            raise ValueError("normal mode preserves channel count")
        self.mode = mode
        self.shift = shift
        stride = 2 if mode in ("s", "d") else 1
        self.conv1 = self.add_child("conv1", Conv2dCircular(in_ch, out_ch, rng, stride=stride, dtype=dtype))
        # second conv starts at zero so a fresh block is its skip projection;
        # without normalization layers this keeps deep stacks from saturating
        self.conv2 = self.add_child("conv2", Conv2dCircular(out_ch, out_ch, rng, dtype=dtype, zero=True))
        if mode == "n":
            self.skip = None
        else:
            self.skip = self.add_child("skip", Conv2dCircular(in_ch, out_ch, rng, kernel=1,
                                                              stride=stride, dtype=dtype, init="xavier"))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        if self.mode == "u":
            h = dc.upsample2x(h)
        main = self.conv2(dc.relu(self.conv1(h)))
        if self.skip is None:
            shortcut = x
        else:
            shortcut = self.skip(h if self.mode == "u" else x)
        out = dc.add(main, shortcut)
        if self.shift and _shift_applicable(out.data.shape[1], out.data.shape[3]):
            out = cyclic_shift(out)
        return out


class SelfAttention(Module):
    """Single-head dot-product attention over spatial positions."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        key_dim = max(channels // 8, 4)
        self.key_dim = key_dim
        self.q = self.add_child("q", Linear(channels, key_dim, rng, dtype=dtype))
        self.k = self.add_child("k", Linear(channels, key_dim, rng, dtype=dtype))
        self.v = self.add_child("v", Linear(channels, channels, rng, dtype=dtype))
        self.gamma = self.add_param("gamma", np.zeros(1, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        flat = dc.transpose(dc.reshape(x, (n, c, h * w)), (0, 2, 1))  # (N, HW, C)
        q = self.q(flat)
        k = self.k(flat)
        v = self.v(flat)
        scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.key_dim))
        attn = dc.softmax(scores, axis=-1)
        mixed = dc.matmul(attn, v)  # (N, HW, C)
        mixed = dc.reshape(dc.transpose(mixed, (0, 2, 1)), (n, c, h, w))
        return dc.add(x, dc.mul(mixed, self.gamma))


class CompletionNet(Module):
    """Encoder/decoder completion generator plus a global discriminator.

    Encoder: start block then four downsampling blocks; the third block's
    output (skip features) re-enters the decoder by channel concatenation
    before its attention layer. Decoder: two up blocks, attention, three up
    blocks, then a 3x3 projection to RGB. Discriminator: start, down,
    attention, down, normal, and a two-block downsampling tail (the global
    part) pooled into a single logit.
    """

    def __init__(self, base_channels: int = 16, seed: int = 0, dtype=np.float32):
        super().__init__()
        b = base_channels
        ss = np.random.SeedSequence(seed)
        rng_e, rng_g, rng_d = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))
        self.base_channels = b
        self.dtype = dtype

        self.enc = [
            RbcpBlock("s", 4, b, rng_e, dtype, shift=True),
            RbcpBlock("d", b, 2 * b, rng_e, dtype, shift=True),
            RbcpBlock("d", 2 * b, 4 * b, rng_e, dtype, shift=True),
            RbcpBlock("d", 4 * b, 8 * b, rng_e, dtype, shift=True),
            RbcpBlock("d", 8 * b, 16 * b, rng_e, dtype, shift=True),
        ]
        for i, blk in enumerate(self.enc):
            self.add_child(f"enc{i}", blk)

        self.dec_pre = [
            RbcpBlock("u", 16 * b, 8 * b, rng_g, dtype, shift=True),
            RbcpBlock("u", 8 * b, 4 * b, rng_g, dtype, shift=True),
        ]
        self.dec_attn = SelfAttention(8 * b, rng_g, dtype)
        self.dec_post = [
            RbcpBlock("u", 8 * b, 2 * b, rng_g, dtype, shift=True),
            RbcpBlock("u", 2 * b, b, rng_g, dtype, shift=True),
            RbcpBlock("u", b, b, rng_g, dtype, shift=True),
        ]
        for i, blk in enumerate(self.dec_pre):
            self.add_child(f"dec{i}", blk)
        self.add_child("dec_attn", self.dec_attn)
        for i, blk in enumerate(self.dec_post):
            self.add_child(f"dec{i + 3}", blk)
        self.to_rgb = self.add_child("to_rgb", Conv2dCircular(b, 3, rng_g, dtype=dtype))

        self.disc = [
            RbcpBlock("s", 3, b, rng_d, dtype),
            RbcpBlock("d", b, 2 * b, rng_d, dtype),
            SelfAttention(2 * b, rng_d, dtype),
            RbcpBlock("d", 2 * b, 4 * b, rng_d, dtype),
            RbcpBlock("n", 4 * b, 4 * b, rng_d, dtype),
            RbcpBlock("d", 4 * b, 8 * b, rng_d, dtype),
            RbcpBlock("d", 8 * b, 16 * b, rng_d, dtype),
        ]
        for i, blk in enumerate(self.disc):
            self.add_child(f"disc{i}", blk)
        self.disc_head = self.add_child("disc_head", Linear(16 * b, 1, rng_d, dtype=dtype, zero=True))

    # --- generator --------------------------------------------------------

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (skip features from the third block, final features)."""
        h = x
        skip = None
        for i, blk in enumerate(self.enc):
            h = blk(h)
            if i == 2:
                skip = h
        return skip, h

    def decode(self, latent: Tensor, skip: Tensor) -> Tensor:
        h = latent
        for blk in self.dec_pre:
            h = blk(h)
        h = dc.concat([h, skip], axis=1)
        h = self.dec_attn(h)
        for blk in self.dec_post:
            h = blk(h)
        return dc.sigmoid(self.to_rgb(h))

    def generate(self, masked_rgb_and_mask: Tensor) -> Tensor:
        skip, latent = self.encode(masked_rgb_and_mask)
        return self.decode(latent, skip)

    # --- discriminator ------------------------------------------------------

    def discriminate(self, rgb: Tensor) -> Tensor:
        """Realism logit per image, (N, 1)."""
        h = rgb
        for blk in self.disc:
            h = blk(h)
        pooled = dc.mean(h, axis=(2, 3))
        return self.disc_head(pooled)

    def generator_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items()
                if k.startswith(("enc", "dec", "to_rgb"))}

    def discriminator_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items()
                if k.startswith("disc")}

    def save(self, path) -> None:
        params = {"meta.arch": np.array([self.base_channels], dtype=np.float32)}
        params.update(self.named_params())
        dc.save_params(path, params)

    @classmethod
    def load(cls, path) -> "CompletionNet":
        state = dc.load_params(path)
        meta = state.pop("meta.arch")
        net = cls(base_channels=int(meta[0]))
        net.load_state(state)
        return net


# ---------------------------------------------------------------------------
# completion front ends
# ---------------------------------------------------------------------------


def _box_sum_wrap(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 neighborhood sum and cell count, wrapping u, truncating v."""
    h = values.shape[0]
    acc = np.zeros_like(values)
    cnt = np.zeros(values.shape[:2])
    ones = np.ones(values.shape[:2])
    for dv in (-1, 0, 1):
        if dv < 0:
            shifted = np.concatenate([values[1:], np.zeros_like(values[:1])], axis=0)
            ok = np.concatenate([ones[1:], np.zeros_like(ones[:1])], axis=0)
        elif dv > 0:
            shifted = np.concatenate([np.zeros_like(values[:1]), values[:-1]], axis=0)
            ok = np.concatenate([np.zeros_like(ones[:1]), ones[:-1]], axis=0)
        else:
            shifted, ok = values, ones
        for du in (-1, 0, 1):
            acc = acc + np.roll(shifted, du, axis=1)
            cnt = cnt + np.roll(ok, du, axis=1)
    return acc, cnt


def diffusion_fill(values: np.ndarray, observed: np.ndarray, tol: float = 1e-4,
                   max_iters: int = 10_000) -> np.ndarray:
    """Fill unobserved pixels by repeated masked 3x3 averaging.

    Observed pixels are held fixed; missing pixels relax toward the mean of
    their neighborhood (seam-aware) until the largest update falls below
    ``tol``. Works on (H, W) or (H, W, C) arrays.
    """
    observed = np.asarray(observed, dtype=bool)
    if not observed.any():
        raise ValueError("cannot diffuse: no observed pixels")
    vals = np.asarray(values, dtype=np.float64).copy()
    squeeze = vals.ndim == 2
    if squeeze:
        vals = vals[..., None]
    init = vals[observed].mean(axis=0)
    vals[~observed] = init
    missing = ~observed
    if not missing.any():
        return vals[..., 0] if squeeze else vals
    for _ in range(max_iters):
        acc, cnt = _box_sum_wrap(vals)
        new = acc / cnt[..., None]
        delta = np.abs(new[missing] - vals[missing]).max()
        vals[missing] = new[missing]
        if delta < tol:
            break
    return vals[..., 0] if squeeze else vals


def discriminator_score(net: CompletionNet, rgb: np.ndarray) -> float:
    """Sigmoid-squashed global-discriminator output for an (H, W, 3) image."""
    x = Tensor(np.transpose(np.asarray(rgb, dtype=net.dtype), (2, 0, 1))[None])
    logit = net.discriminate(x)
    return float(dc.sigmoid(logit).data[0, 0])


def complete(pano: RgbdPanorama, mask: np.ndarray, method: str = "baseline",
             net: CompletionNet | None = None) -> CompletionResult:
    """Synthesize the unobserved pixels of a panorama.

    Observed pixels pass through untouched (exact). The neural path runs
    the encoder/decoder on (masked rgb, mask); the baseline path diffuses
    observed colors into the holes. Depth is diffusion-filled from the
    observed depth in both paths. The result is scored by the
    discriminator when one is available, else 0.5.

    Raises:
        ValueError: mask/panorama shape mismatch, unknown method, all-missing
            mask (nothing to propagate), or neural method without a net.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pano.height, pano.width):
        raise ValueError(f"mask shape {mask.shape} does not match panorama")
    if method not in ("baseline", "neural"):
        raise ValueError(f"unknown completion method {method!r}")
    if not mask.any():
        raise ValueError("all-missing mask: nothing observed to complete from")

    if method == "neural":
        if net is None:
            raise ValueError("neural completion requires a CompletionNet")
        rgb = _neural_rgb(net, pano.rgb, mask)
    else:
        rgb = diffusion_fill(pano.rgb, mask)
    rgb = np.where(mask[..., None], pano.rgb, np.clip(rgb, 0.0, 1.0))
    depth = diffusion_fill(pano.depth, mask)
    depth = np.where(mask, pano.depth, np.maximum(depth, 0.0))
    completed = RgbdPanorama(rgb, depth, np.ones_like(mask))
    score = discriminator_score(net, completed.rgb) if net is not None else 0.5
    return CompletionResult(completed, score)


def _neural_rgb(net: CompletionNet, rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = rgb * mask[..., None]
    x = np.concatenate([np.transpose(masked, (2, 0, 1)), mask[None].astype(np.float64)], axis=0)
    out = net.generate(Tensor(x[None].astype(net.dtype)))
    return np.transpose(out.data[0], (1, 2, 0)).astype(np.float64)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class CompletionTrainConfig:
    iterations: int = 1500
    batch_size: int = 4
    lr: float = 1.0e-4
    d_lr: float | None = None  # discriminator rate; None -> lr / 4
    lambda_l1: float = 10.0
    coverage_min: float = 0.4
    coverage_max: float = 0.8
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0.0 < self.coverage_min <= self.coverage_max < 1.0:
            raise ValueError("coverage range must lie in (0, 1)")

    @property
    def discriminator_lr(self) -> float:
        return self.d_lr if self.d_lr is not None else self.lr / 4.0


@dataclass
class CompletionTrainResult:
    net: CompletionNet
    g_losses: list[float]
    d_losses: list[float]


def _batch_tensors(panos: list[RgbdPanorama], masks: list[np.ndarray], dtype):
    xs, gts, ms = [], [], []
    for pano, mask in zip(panos, masks):
        masked = pano.rgb * mask[..., None]
        xs.append(np.concatenate([np.transpose(masked, (2, 0, 1)),
                                  mask[None].astype(np.float64)], axis=0))
        gts.append(np.transpose(pano.rgb, (2, 0, 1)))
        ms.append(mask[None].astype(np.float64))
    return (np.stack(xs).astype(dtype), np.stack(gts).astype(dtype), np.stack(ms).astype(dtype))


def train_completion(dataset: list[RgbdPanorama], config: CompletionTrainConfig) -> CompletionTrainResult:
    """Self-supervised adversarial training on randomly masked panoramas.

    Alternates discriminator steps (real vs pasted completion) with
    generator steps (L1 toward ground truth plus the non-saturating
    adversarial term); masks are redrawn every iteration.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    net = CompletionNet(config.base_channels, seed=config.seed)
    ss = np.random.SeedSequence(config.seed)
    rng_pick, rng_mask = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))

    g_params = net.generator_params()
    d_params = net.discriminator_params()
    adam_g = AdamState()
    adam_d = AdamState()
    eps = 1e-4  # log floor; keeps a saturated discriminator from dominating
    g_losses: list[float] = []
    d_losses: list[float] = []

    for _ in range(config.iterations):
        idx = rng_pick.integers(0, len(dataset), size=min(config.batch_size, len(dataset)))
        panos = [dataset[i] for i in idx]
        masks = [random_mask(p.width, p.height, rng_mask,
                             rng_mask.uniform(config.coverage_min, config.coverage_max))
                 for p in panos]
        x, gt, m = _batch_tensors(panos, masks, net.dtype)

        # discriminator step: real panoramas vs pasted completions
        fake = net.generate(Tensor(x)).data
        pasted = gt * m + fake * (1.0 - m)
        with Tape() as tape:
            d_real = dc.sigmoid(net.discriminate(Tensor(gt)))
            d_fake = dc.sigmoid(net.discriminate(Tensor(pasted)))
            loss_d = dc.sub(dc.neg(dc.mean(dc.log(dc.add(d_real, eps)))),
                            dc.mean(dc.log(dc.add(dc.sub(1.0, d_fake), eps))))
            grads = tape.backward(loss_d)
        adam_step(d_params, {k: grads[t] for k, t in d_params.items() if t in grads},
                  adam_d, config.discriminator_lr)
        for t in d_params.values():
            t.grad = None

        # generator step: reconstruction + non-saturating adversarial term
        with Tape() as tape:
            out = net.generate(Tensor(x))
            l1 = dc.mean(dc.absolute(dc.sub(out, gt)))
            pasted_t = dc.add(dc.mul(out, 1.0 - m), gt * m)
            d_out = dc.sigmoid(net.discriminate(pasted_t))
            adv = dc.neg(dc.mean(dc.log(dc.add(d_out, eps))))
            loss_g = dc.add(dc.mul(l1, config.lambda_l1), adv)
            grads = tape.backward(loss_g)
        adam_step(g_params, {k: grads[t] for k, t in g_params.items() if t in grads}, adam_g, config.lr)
        for t in net.named_params().values():
            t.grad = None

        g_losses.append(loss_g.item())
        d_losses.append(loss_d.item())

    return CompletionTrainResult(net, g_losses, d_losses)
