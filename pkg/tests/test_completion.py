"""Completion: masks, cyclic shifts, RBCP blocks, both completers, GAN training."""

import numpy as np
import pytest

from omnisynth.completion import (
    CompletionNet,
    CompletionTrainConfig,
    RbcpBlock,
    SelfAttention,
    complete,
    cyclic_shift,
    diffusion_fill,
    discriminator_score,
    random_mask,
    train_completion,
)
from omnisynth.diffcore import Tensor
from omnisynth.geometry import RgbdPanorama

RNG = np.random.default_rng


def textured_pano(seed: int, w: int = 64, h: int = 32) -> RgbdPanorama:
    """Smooth low-frequency color field; wrap-continuous in u."""
    rng = RNG(seed)
    uu = np.arange(w)[None, :, None] * 2 * np.pi / w
    vv = np.arange(h)[:, None, None] * np.pi / h
    phases = rng.uniform(0, 2 * np.pi, size=(1, 1, 3))
    freq_u = rng.integers(1, 4)
    freq_v = rng.integers(1, 3)
    rgb = 0.5 + 0.25 * np.sin(freq_u * uu + phases) + 0.2 * np.cos(freq_v * vv + phases * 0.5)
    rgb = np.clip(rgb, 0, 1)
    return RgbdPanorama(rgb, np.full((h, w), 2.0), np.ones((h, w), bool))


def room_pano_corpus(seed: int, w: int = 64, h: int = 32) -> RgbdPanorama:
    """Rendered panorama of a randomized checkered box room."""
    from omnisynth.geometry import CameraPose
    from omnisynth.scenesim import random_room, render_ground_truth

    pose_rng = RNG(seed + 500)
    return render_ground_truth(random_room(seed), CameraPose(pose_rng.uniform(-0.3, 0.3, 3)), w, h)


def box_blur(rgb: np.ndarray, passes: int = 5) -> np.ndarray:
    out = rgb.copy()
    for _ in range(passes):
        out = (np.roll(out, 1, axis=1) + np.roll(out, -1, axis=1)
               + np.roll(out, 1, axis=0) + np.roll(out, -1, axis=0)) / 4
    return out


class TestRandomMask:
    def test_near_full_coverage(self):
        m = random_mask(64, 32, RNG(0), 0.98)
        assert m.mean() >= 0.9

    def test_fixed_seed_reproducible(self):
        a = random_mask(64, 32, RNG(7), 0.6)
        b = random_mask(64, 32, RNG(7), 0.6)
        assert np.array_equal(a, b)

    def test_within_ten_percent_of_target(self):
        for seed in range(20):
            for target in (0.4, 0.6, 0.8):
                m = random_mask(64, 32, RNG(seed), target)
                assert abs(m.mean() - target) <= 0.1 * target + 2 / (64 * 32)

    def test_mean_coverage_over_seeds(self):
        target = 0.6
        fracs = [random_mask(64, 32, RNG(s), target).mean() for s in range(100)]
        assert abs(np.mean(fracs) - target) <= 0.05

    def test_bad_target(self):
        for bad in (0.0, 1.0, -0.3, 1.4):
            with pytest.raises(ValueError):
                random_mask(32, 16, RNG(0), bad)


class TestCyclicShift:
    def test_group_shifts_c8_w8(self):
        # 8 channels at 37.5% -> 3 shifted channels, one per rotation
        x = np.zeros((8, 4, 8))
        x[:, 0, 0] = 1.0  # impulse at column 0 in every channel
        out = cyclic_shift(x, 0.375)
        for ch, col in [(0, 2), (1, 4), (2, 6)]:
            assert out[ch, 0, col] == 1.0 and out[ch, 0, 0] == 0.0
        for ch in range(3, 8):
            assert out[ch, 0, 0] == 1.0

    def test_half_turn_twice_is_identity(self):
        rng = RNG(1)
        x = rng.random((16, 4, 8))
        once = cyclic_shift(x)
        twice = cyclic_shift(once)
        # the 180-degree group returns after two applications
        g = int(16 * 0.375) // 3
        assert np.array_equal(twice[g:2 * g], x[g:2 * g])

    def test_zero_fraction_identity(self):
        x = RNG(2).random((8, 4, 8))
        assert np.array_equal(cyclic_shift(x, 0.0), x)

    def test_divisibility_errors(self):
        with pytest.raises(ValueError):
            cyclic_shift(np.zeros((8, 4, 6)), 0.375)  # width not divisible by 4
        with pytest.raises(ValueError):
            cyclic_shift(np.zeros((7, 4, 8)), 0.375)  # 2 channels not divisible by 3

    def test_tensor_path_matches_array_path(self):
        x = RNG(3).random((1, 16, 4, 8)).astype(np.float32)
        a = cyclic_shift(x[0])
        b = cyclic_shift(Tensor(x)).data[0]
        assert np.array_equal(a.astype(np.float32), b)


class TestRbcpBlock:
    def test_down_shape(self):
        rng = RNG(4)
        blk = RbcpBlock("d", 8, 16, rng)
        out = blk(Tensor(rng.random((1, 8, 16, 32)).astype(np.float32)))
        assert out.data.shape == (1, 16, 8, 16)

    @pytest.mark.parametrize("mode,cin,cout,hw_factor", [
        ("s", 4, 8, 0.5), ("n", 8, 8, 1.0), ("d", 8, 16, 0.5), ("u", 8, 4, 2.0),
    ])
    def test_mode_shapes(self, mode, cin, cout, hw_factor):
        rng = RNG(5)
        blk = RbcpBlock(mode, cin, cout, rng)
        h, w = 8, 16
        out = blk(Tensor(rng.random((2, cin, h, w)).astype(np.float32)))
        assert out.data.shape == (2, cout, int(h * hw_factor), int(w * hw_factor))

    @pytest.mark.parametrize("mode,stride", [("n", 1), ("s", 2), ("d", 2), ("u", 1)])
    def test_shift_equivariance(self, mode, stride):
        rng = RNG(6)
        cin = 8
        blk = RbcpBlock(mode, cin, 8 if mode == "n" else 16, rng)
        x = rng.random((1, cin, 8, 16)).astype(np.float32)
        k = 4  # divisible by stride
        out = blk(Tensor(x)).data
        out_shift = blk(Tensor(np.roll(x, k, axis=3))).data
        assert np.abs(out_shift - np.roll(out, (k * 2 if mode == "u" else k // stride), axis=3)).max() <= 1e-5

    def test_zero_weights_reduce_to_skip(self):
        rng = RNG(7)
        blk = RbcpBlock("d", 4, 8, rng)
        for name in ("conv1", "conv2"):
            layer = getattr(blk, name)
            layer.w.data[:] = 0
            layer.b.data[:] = 0
        x = Tensor(rng.random((1, 4, 8, 16)).astype(np.float32))
        out = blk(x)
        skip_only = blk.skip(x)
        assert np.array_equal(out.data, skip_only.data)

    def test_normal_mode_channel_guard(self):
        with pytest.raises(ValueError):
            RbcpBlock("n", 4, 8, RNG(8))


class TestDiffusionFill:
    def test_constant_restored(self):
        vals = np.full((8, 16, 3), 0.6)
        observed = np.ones((8, 16), bool)
        observed[3:6, 5:9] = False
        out = diffusion_fill(vals * observed[..., None], observed)
        assert np.abs(out - 0.6).max() <= 1e-3

    def test_seam_hole_fills_from_both_sides(self):
        """A hole straddling the seam: the wrap-aware fill matches the fill
        of the equivalent centered hole (rolled), a non-wrap fill cannot."""
        w, h = 32, 8
        rng = RNG(9)
        base = np.tile(np.linspace(0.2, 0.8, w)[None, :, None], (h, 1, 3))
        base = np.concatenate([base[:, : w // 2], base[:, : w // 2][:, ::-1]], axis=1)  # wrap-continuous
        observed = np.ones((h, w), bool)
        observed[2:6, -3:] = False
        observed[2:6, :3] = False
        out = diffusion_fill(base * observed[..., None], observed)

        k = w // 2
        rolled = diffusion_fill(np.roll(base * observed[..., None], k, axis=1),
                                np.roll(observed, k, axis=1))
        assert np.abs(out - np.roll(rolled, -k, axis=1)).max() <= 1e-9
        seam_jump = np.abs(out[:, 0] - out[:, -1]).max()
        interior_jump = np.abs(np.diff(out, axis=1)).max()
        assert seam_jump <= interior_jump + 1e-3

    def test_all_missing_rejected(self):
        with pytest.raises(ValueError):
            diffusion_fill(np.zeros((4, 8)), np.zeros((4, 8), bool))

    def test_bounded_by_observed_extremes(self):
        rng = RNG(10)
        vals = rng.random((8, 16, 3))
        observed = rng.random((8, 16)) < 0.6
        if not observed.any():
            observed[0, 0] = True
        out = diffusion_fill(vals * observed[..., None], observed)
        lo, hi = vals[observed].min(), vals[observed].max()
        assert out.min() >= lo - 1e-9
        assert out.max() <= hi + 1e-9


class TestComplete:
    def test_observed_passthrough_exact(self):
        pano = textured_pano(0)
        mask = random_mask(64, 32, RNG(1), 0.6)
        res = complete(pano, mask, method="baseline")
        assert np.array_equal(res.pano.rgb[mask], pano.rgb[mask])
        assert np.array_equal(res.pano.depth[mask], pano.depth[mask])
        assert res.pano.valid.all()
        assert res.score == 0.5  # no discriminator available

    def test_no_hole_identity(self):
        pano = textured_pano(2)
        res = complete(pano, np.ones((32, 64), bool), method="baseline")
        assert np.array_equal(res.pano.rgb, pano.rgb)

    def test_constant_color_hole(self):
        h, w = 16, 32
        pano = RgbdPanorama(np.full((h, w, 3), 0.35), np.full((h, w), 1.5), np.ones((h, w), bool))
        mask = np.ones((h, w), bool)
        mask[4:10, 10:20] = False
        res = complete(pano, mask, method="baseline")
        assert np.abs(res.pano.rgb - 0.35).max() <= 1e-3

    def test_all_missing_rejected(self):
        pano = textured_pano(3)
        with pytest.raises(ValueError):
            complete(pano, np.zeros((32, 64), bool), method="baseline")

    def test_neural_requires_net(self):
        pano = textured_pano(4)
        with pytest.raises(ValueError):
            complete(pano, np.ones((32, 64), bool), method="neural")

    def test_unknown_method(self):
        pano = textured_pano(5)
        with pytest.raises(ValueError):
            complete(pano, np.ones((32, 64), bool), method="telepathy")

    def test_neural_path_passthrough_and_score(self):
        pano = textured_pano(6)
        net = CompletionNet(base_channels=8, seed=0)
        mask = random_mask(64, 32, RNG(2), 0.7)
        res = complete(pano, mask, method="neural", net=net)
        assert np.array_equal(res.pano.rgb[mask], pano.rgb[mask])
        assert res.pano.valid.all()
        assert 0.0 <= res.score <= 1.0


class TestDiscriminator:
    def test_zeroed_head_scores_half(self):
        net = CompletionNet(base_channels=8, seed=0)  # head is zero-initialized
        img = RNG(3).random((32, 64, 3))
        assert discriminator_score(net, img) == pytest.approx(0.5, abs=1e-7)

    def test_score_in_unit_interval(self):
        net = CompletionNet(base_channels=8, seed=1)
        rng = RNG(4)
        net.disc_head.w.data[:] = rng.normal(size=net.disc_head.w.data.shape).astype(np.float32)
        for s in range(5):
            assert 0.0 <= discriminator_score(net, RNG(s).random((32, 64, 3))) <= 1.0

    def test_shift_consistency_exact_for_stride_multiples(self):
        net = CompletionNet(base_channels=8, seed=2)
        rng = RNG(5)
        net.disc_head.w.data[:] = rng.normal(size=net.disc_head.w.data.shape).astype(np.float32) * 0.5
        img = RNG(6).random((32, 64, 3))
        base = discriminator_score(net, img)
        for k in (32, 64 // 2):  # multiples of 2^5 wrap cleanly through all strides
            shifted = discriminator_score(net, np.roll(img, k, axis=1))
            assert abs(shifted - base) <= 0.02


def randomize_residual_convs(net: CompletionNet, rng) -> None:
    """Fill the zero-initialized second convs so residual paths are active."""
    for name, t in net.named_params().items():
        if "conv2.w" in name:
            t.data = (rng.normal(size=t.data.shape) * 0.05).astype(t.data.dtype)


class TestNetworkEquivariance:
    def test_generator_quarter_turn_equivariance(self):
        """At 128x64 every feature width stays divisible by 4, so a quarter
        turn of the input turns the output exactly."""
        net = CompletionNet(base_channels=8, seed=3)
        rng = RNG(7)
        randomize_residual_convs(net, rng)
        rgb = rng.random((64, 128, 3))
        mask = random_mask(128, 64, RNG(8), 0.6)
        x = np.concatenate([np.transpose(rgb * mask[..., None], (2, 0, 1)),
                            mask[None].astype(np.float64)], axis=0)[None].astype(np.float32)
        k = 128 // 4
        x_shift = np.roll(x, k, axis=3)
        out = net.generate(Tensor(x)).data
        out_shift = net.generate(Tensor(x_shift)).data
        assert np.abs(out_shift - np.roll(out, k, axis=3)).max() <= 1e-4


class TestTrainCompletion:
    @pytest.fixture(scope="class")
    def overfit(self):
        """Four smooth panoramas memorized by the generator."""
        panos = [textured_pano(s) for s in range(4)]
        cfg = CompletionTrainConfig(iterations=500, batch_size=4, lr=1e-3,
                                    base_channels=8, seed=0,
                                    coverage_min=0.55, coverage_max=0.8)
        return panos, train_completion(panos, cfg)

    @pytest.fixture(scope="class")
    def corpus_trained(self):
        """A 400-panorama corpus keeps the discriminator from memorizing."""
        panos = [room_pano_corpus(s) for s in range(400)]
        cfg = CompletionTrainConfig(iterations=1100, batch_size=4, lr=1e-3, d_lr=1e-3,
                                    base_channels=8, seed=0,
                                    coverage_min=0.35, coverage_max=0.6)
        return train_completion(panos, cfg)

    def test_masked_region_l1(self, overfit):
        panos, result = overfit
        errs = []
        for s, pano in enumerate(panos):
            mask = random_mask(pano.width, pano.height, RNG(100 + s), 0.65)
            res = complete(pano, mask, method="neural", net=result.net)
            hole = ~mask
            errs.append(np.abs(res.pano.rgb[hole] - pano.rgb[hole]).mean())
        assert np.mean(errs) < 0.05, f"masked L1 {np.mean(errs):.4f}"

    def test_discriminator_separates_blurred_fakes(self, corpus_trained):
        correct = 0
        total = 0
        for s in range(1000, 1024):
            pano = room_pano_corpus(s)
            real = discriminator_score(corpus_trained.net, pano.rgb)
            fake = discriminator_score(corpus_trained.net, box_blur(pano.rgb))
            correct += (real > 0.5) + (fake < 0.5)
            total += 2
        assert correct / total > 0.9, f"accuracy {correct}/{total}"

    def test_seeded_losses_reproducible(self):
        panos = [textured_pano(s) for s in range(2)]
        cfg = CompletionTrainConfig(iterations=5, batch_size=2, base_channels=8, seed=3)
        a = train_completion(panos, cfg)
        b = train_completion(panos, cfg)
        assert np.allclose(a.g_losses, b.g_losses, atol=1e-6)
        assert np.allclose(a.d_losses, b.d_losses, atol=1e-6)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_completion([], CompletionTrainConfig(iterations=1))


class TestSelfAttention:
    def test_preserves_shape_and_starts_as_identity(self):
        rng = RNG(11)
        attn = SelfAttention(16, rng)
        x = Tensor(rng.random((2, 16, 4, 8)).astype(np.float32))
        out = attn(x)
        assert out.data.shape == x.data.shape
        assert np.array_equal(out.data, x.data)  # gamma starts at zero
