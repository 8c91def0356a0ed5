"""U-Net generator, conditional PatchGAN discriminator and the cGAN + L1 losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError

MAX_CHANNELS = 512
BCE_EPS = 1e-7
INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_channels: int = 32
    norm: str = "instance"
    final_activation: str = "tanh"
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 3:
            raise ConfigurationError(f"generator depth must be >= 3, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.norm not in ("instance", "batch"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.final_activation not in ("tanh", "sigmoid"):
            raise ConfigurationError(f"unknown final activation {self.final_activation!r}")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, MAX_CHANNELS) for i in range(self.depth)]

    @property
    def multiple(self) -> int:
        return 2**self.depth

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: int = 3
    base_channels: int = 64
    norm: str = "batch"
    in_channels: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigurationError("discriminator needs at least one stride-2 block")
        if self.norm not in ("instance", "batch", "none"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")

    def kernels(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) of every conv, input to output."""
        return [(4, 2, 1)] * self.layers + [(4, 1, 1), (4, 1, 1)]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0
    adv_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.adv_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


class UNetGenerator(nn.Module):
    """Encoder of stride-2 convs, mirrored transposed-conv decoder, skip concat per level.

    Level ``i`` of the decoder receives the upsampled features from level
    ``i + 1`` concatenated with the encoder features of level ``i``.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels()
        last = cfg.depth - 1
        self.down = nn.ModuleList()
        for i in range(cfg.depth):
            cin = cfg.in_channels if i == 0 else ch[i - 1]
            use_norm = 0 < i < last
            block = [nn.Conv2d(cin, ch[i], 4, 2, 1, bias=not use_norm)]
            if use_norm:
                block.append(_norm(cfg.norm, ch[i]))
            block.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*block))
        self.up = nn.ModuleList()
        for i in range(last, 0, -1):
            cin = ch[i] if i == last else 2 * ch[i]
            self.up.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cin, ch[i - 1], 4, 2, 1, bias=False),
                    _norm(cfg.norm, ch[i - 1]),
                    nn.ReLU(),
                )
            )
        self.head = nn.ConvTranspose2d(2 * ch[0], cfg.out_channels, 4, 2, 1)
        self.activation = nn.Tanh() if cfg.final_activation == "tanh" else nn.Sigmoid()

    def decoder_input_channels(self) -> list[dict]:
        """Per decoder level: channels arriving from below, from the skip, and in total."""
        ch = self.cfg.channels()
        levels = []
        for i in range(self.cfg.depth - 2, -1, -1):
            levels.append({"level": i, "up": ch[i], "skip": ch[i], "total": 2 * ch[i]})
        return levels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected B x {self.cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        m = self.cfg.multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} is not divisible by 2^depth = {m}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = torch.cat([block(x), skips.pop()], dim=1)
        return self.activation(self.head(x))


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: scores every receptive-field window of (condition, candidate)."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        nf = cfg.base_channels
        specs = cfg.kernels()
        for idx, (k, s, p) in enumerate(specs[:-1]):
            cout = min(cfg.base_channels * 2**idx, MAX_CHANNELS)
            use_norm = idx > 0 and cfg.norm != "none"
            layers.append(nn.Conv2d(cin, cout, k, s, p, bias=not use_norm))
            if use_norm:
                layers.append(_norm(cfg.norm, cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = nf = cout
        k, s, p = specs[-1]
        layers.append(nn.Conv2d(nf, 1, k, s, p))
        self.model = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if condition.shape != candidate.shape:
            raise ShapeError(
                f"condition {tuple(condition.shape)} and candidate {tuple(candidate.shape)} differ"
            )
        return self.model(torch.cat([condition, candidate], dim=1))


def receptive_field(cfg: DiscriminatorConfig) -> int:
    rf = 1
    for k, s, _ in reversed(cfg.kernels()):
        rf = (rf - 1) * s + k
    return rf


def score_map_size(cfg: DiscriminatorConfig, side: int) -> int:
    for k, s, p in cfg.kernels():
        side = (side + 2 * p - k) // s + 1
    return side


def init_weights(module: nn.Module, std: float = INIT_STD, generator: torch.Generator | None = None):
    """N(0, std) conv weights with zero bias; norm scales N(1, std)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.normal_(1.0, std, generator=generator)
                m.bias.zero_()


def build_generator(cfg: GeneratorConfig, seed: int | None = None) -> UNetGenerator:
    g = UNetGenerator(cfg)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    init_weights(g, generator=gen)
    return g


def build_discriminator(cfg: DiscriminatorConfig, seed: int | None = None) -> PatchDiscriminator:
    d = PatchDiscriminator(cfg)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    init_weights(d, generator=gen)
    return d


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def generator_forward(G: UNetGenerator, batch: torch.Tensor) -> torch.Tensor:
    return G(batch)


def discriminator_forward(D: PatchDiscriminator, condition, candidate) -> torch.Tensor:
    return D(condition, candidate)


def _prob(scores: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(scores).clamp(BCE_EPS, 1.0 - BCE_EPS)


def generator_adversarial_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term ``-E[log sigmoid(D(I, G(I)))]``."""
    return -torch.log(_prob(fake_scores)).mean()


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return -torch.log(_prob(real_scores)).mean() - torch.log(1.0 - _prob(fake_scores)).mean()


def adversarial_loss(real_scores, fake_scores):
    """Returns ``(d_loss, g_adv_loss)`` as BCE over sigmoid scores averaged over the map."""
    return discriminator_loss(real_scores, fake_scores), generator_adversarial_loss(fake_scores)


def l1_loss(prediction, target):
    return abs(prediction - target).mean()


def total_generator_loss(g_adv, l1, w: LossWeights):
    return w.adv_weight * g_adv + w.lambda_l1 * l1
