"""U-Net generator, PatchGAN discriminator and the loss stack."""

import math

import pytest
import torch

from selenorm.cgan import (
    DiscriminatorConfig,
    GeneratorConfig,
    LossWeights,
    adversarial_loss,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_adversarial_loss,
    generator_forward,
    l1_loss,
    param_count,
    receptive_field,
    score_map_size,
    total_generator_loss,
)
from selenorm.errors import ConfigurationError, ShapeError

from oracles import gradient_agreement


def conv_out(side, k, s, p):
    return (side + 2 * p - k) // s + 1


def receptive_span(cfg, index):
    """First input row seen by output row ``index`` and the window length (layer recursion)."""
    start, jump, size = 0.0, 1, 1
    for k, s, p in cfg.kernels():
        size = size + (k - 1) * jump
        start = start - p * jump
        jump *= s
    return int(start + index * jump), size


class TestGenerator:
    def test_shape_contract(self):
        G = build_generator(GeneratorConfig(depth=4, base_channels=32), seed=0)
        assert generator_forward(G, torch.zeros(2, 1, 128, 128)).shape == (2, 1, 128, 128)

    @pytest.mark.parametrize("depth", [3, 4, 5, 6])
    def test_shape_preserved_every_depth(self, depth):
        G = build_generator(GeneratorConfig(depth=depth, base_channels=4), seed=0)
        side = 2**depth * 2
        assert G(torch.rand(1, 1, side, side)).shape == (1, 1, side, side)

    def test_skip_channels(self):
        cfg = GeneratorConfig(depth=4, base_channels=32)
        G = build_generator(cfg)
        ch = cfg.channels()
        assert ch == [32, 64, 128, 256]
        # each decoder level's first conv sees up-channels plus the encoder skip
        ups = [blk[0] for blk in G.up]
        assert ups[0].in_channels == ch[3]
        for blk, level in zip(ups[1:], G.decoder_input_channels()):
            assert blk.in_channels == level["up"] + level["skip"]
        assert G.head.in_channels == 2 * ch[0]

    def test_full_scale_bottleneck(self):
        cfg = GeneratorConfig(depth=7, base_channels=64)
        G = build_generator(cfg)
        x = torch.zeros(1, 1, 512, 512)
        for block in G.down:
            x = block(x)
        assert tuple(x.shape[-2:]) == (4, 4)
        assert cfg.channels()[-1] == 512
        assert param_count(G) > 0

    def test_zero_head_gives_activation_of_zero(self):
        G = build_generator(GeneratorConfig(depth=3, base_channels=4), seed=1)
        with torch.no_grad():
            G.head.weight.zero_()
            G.head.bias.zero_()
        assert torch.count_nonzero(G(torch.rand(2, 1, 16, 16))) == 0

    def test_eval_mode_deterministic_and_batch8(self):
        G = build_generator(GeneratorConfig(depth=4, base_channels=8), seed=2).eval()
        x = torch.rand(8, 1, 128, 128) * 2 - 1
        with torch.no_grad():
            a, b = G(x), G(x)
        assert torch.equal(a, b) and a.shape == x.shape
        assert a.abs().max() <= 1

    def test_same_seed_same_weights(self):
        a = build_generator(GeneratorConfig(depth=3, base_channels=4), seed=5)
        b = build_generator(GeneratorConfig(depth=3, base_channels=4), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_shape_errors(self):
        G = build_generator(GeneratorConfig(depth=4, base_channels=4))
        with pytest.raises(ShapeError):
            G(torch.zeros(1, 1, 40, 40))
        with pytest.raises(ShapeError):
            G(torch.zeros(1, 2, 32, 32))

    @pytest.mark.parametrize("kw", [{"depth": 2}, {"norm": "layer"}, {"final_activation": "relu"}, {"base_channels": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(**kw)


class TestDiscriminator:
    @pytest.mark.parametrize("side,expected", [(256, 30), (512, 62)])
    def test_score_map_size(self, side, expected):
        cfg = DiscriminatorConfig()
        size = side
        for k, s, p in [(4, 2, 1)] * 3 + [(4, 1, 1)] * 2:
            size = conv_out(size, k, s, p)
        assert size == expected == score_map_size(cfg, side)
        D = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0).eval()
        with torch.no_grad():
            out = D(torch.zeros(1, 1, side, side), torch.zeros(1, 1, side, side))
        assert tuple(out.shape) == (1, 1, expected, expected)

    def test_receptive_field(self):
        assert receptive_field(DiscriminatorConfig()) == 70
        assert receptive_span(DiscriminatorConfig(), 0)[1] == 70

    def test_conditioning_matters(self):
        torch.manual_seed(0)
        D = build_discriminator(DiscriminatorConfig(base_channels=8), seed=3).eval()
        a, b = torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            assert not torch.allclose(discriminator_forward(D, a, b), discriminator_forward(D, b, a))

    def test_batch_independence(self):
        D = build_discriminator(DiscriminatorConfig(base_channels=8), seed=4).eval()
        x, y = torch.rand(3, 1, 64, 64), torch.rand(3, 1, 64, 64)
        with torch.no_grad():
            base = D(x, y)
            y2 = y.clone()
            y2[1] += 0.5
            out = D(x, y2)
        assert torch.equal(out[0], base[0]) and torch.equal(out[2], base[2])
        assert not torch.equal(out[1], base[1])

    def test_score_locality(self):
        cfg = DiscriminatorConfig(base_channels=8)
        D = build_discriminator(cfg, seed=5).eval()
        x, y = torch.rand(1, 1, 256, 256), torch.rand(1, 1, 256, 256)
        i = j = 12
        r0, size = receptive_span(cfg, i)
        c0, _ = receptive_span(cfg, j)
        inside = torch.zeros(256, 256, dtype=torch.bool)
        inside[max(r0, 0) : r0 + size, max(c0, 0) : c0 + size] = True
        with torch.no_grad():
            base = D(x, y)[0, 0, i, j]
            outside_zeroed = torch.where(inside, y, torch.zeros_like(y))
            assert D(x, outside_zeroed)[0, 0, i, j] == base
            inside_zeroed = torch.where(inside, torch.zeros_like(y), y)
            assert D(x, inside_zeroed)[0, 0, i, j] != base

    def test_shape_mismatch(self):
        D = build_discriminator(DiscriminatorConfig(base_channels=4))
        with pytest.raises(ShapeError):
            D(torch.zeros(1, 1, 64, 64), torch.zeros(1, 1, 32, 32))


class TestLosses:
    def test_bce_at_one_half(self):
        z = torch.zeros(4, 1, 30, 30, dtype=torch.float64)
        d, g = adversarial_loss(z, z)
        assert abs(g.item() - math.log(2)) <= 1e-9
        assert abs(d.item() - 2 * math.log(2)) <= 1e-9

    def test_perfect_discriminator(self):
        d, _ = adversarial_loss(torch.full((2, 1, 4, 4), 50.0, dtype=torch.float64), torch.full((2, 1, 4, 4), -50.0, dtype=torch.float64))
        assert 0 <= d.item() < 1e-6

    def test_clamped_extremes_finite(self):
        d, g = adversarial_loss(torch.tensor([-1e4]), torch.tensor([1e4]))
        assert math.isfinite(d.item()) and math.isfinite(g.item())

    def test_permutation_invariance(self, rng):
        s = torch.from_numpy(rng.normal(size=(1, 1, 8, 8)))
        perm = s.flatten()[torch.randperm(64)].reshape(1, 1, 8, 8)
        assert generator_adversarial_loss(s).item() == pytest.approx(generator_adversarial_loss(perm).item(), abs=1e-12)

    def test_l1(self, rng):
        assert l1_loss(torch.full((4, 4), 0.5), torch.full((4, 4), 0.75)).item() == 0.25
        a, b = rng.random((16, 16)), rng.random((16, 16))
        brute = sum(abs(a[i, j] - b[i, j]) for i in range(16) for j in range(16)) / 256
        assert abs(l1_loss(torch.from_numpy(a), torch.from_numpy(b)).item() - brute) <= 1e-9
        assert l1_loss(a, a) == 0.0

    def test_total_composition(self):
        assert total_generator_loss(0.6931, 0.25, LossWeights(100.0)) == 25.6931
        assert total_generator_loss(0.7, 0.25, LossWeights(0.0)) == 0.7
        assert LossWeights().lambda_l1 == 100.0
        with pytest.raises(ConfigurationError):
            LossWeights(-1.0)

    def test_non_negative(self, rng):
        for _ in range(20):
            r, f = torch.from_numpy(rng.normal(size=(2, 1, 5, 5)) * 5), torch.from_numpy(rng.normal(size=(2, 1, 5, 5)) * 5)
            d, g = adversarial_loss(r, f)
            assert d.item() >= 0 and g.item() >= 0


def test_gradient_matches_finite_differences():
    assert gradient_agreement(seed=11) >= 0.99
