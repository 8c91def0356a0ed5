"""Slow, direct-formula reference implementations used as test oracles."""

import math

import numpy as np


def psnr_loop(a, b):
    n = a.size
    err = math.fsum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / n
    return math.inf if err == 0 else 10 * math.log10(1.0 / err)


def rmse_loop(a, b):
    n = a.size
    return math.sqrt(math.fsum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / n)


def ssim_loop(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over every fully contained window, weights evaluated per window."""
    half = win // 2
    ax = np.arange(win) - half
    w = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for r in range(a.shape[0] - win + 1):
        for c in range(a.shape[1] - win + 1):
            pa = a[r : r + win, c : c + win]
            pb = b[r : r + win, c : c + win]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def emd_sorted(a, b, bins=256):
    """W1 between the bin-centre quantized samples via sorted matching (equal sizes)."""
    qa = (np.minimum(np.floor(a.ravel() * bins), bins - 1) + 0.5) / bins
    qb = (np.minimum(np.floor(b.ravel() * bins), bins - 1) + 0.5) / bins
    return math.fsum(abs(x - y) for x, y in zip(np.sort(qa), np.sort(qb))) / qa.size


def gradient_agreement(seed=0, eps=1e-6, tol=1e-3):
    """Fraction of tiny-generator parameters whose analytic gradient of the
    total generator loss matches a central finite difference within ``tol``
    relative error (double precision, depth 3, base 4, 16x16 input)."""
    import torch

    from selenorm.cgan import (
        DiscriminatorConfig,
        GeneratorConfig,
        LossWeights,
        build_discriminator,
        build_generator,
        generator_adversarial_loss,
        l1_loss,
        total_generator_loss,
    )

    torch.manual_seed(seed)
    G = build_generator(GeneratorConfig(depth=3, base_channels=4), seed=seed).double()
    D = build_discriminator(DiscriminatorConfig(layers=2, base_channels=4, norm="none"), seed=seed + 1).double()
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 2 - 1
    weights = LossWeights(100.0, 1.0)

    def loss():
        fake = G(x)
        return total_generator_loss(generator_adversarial_loss(D(x, fake)), l1_loss(fake, y), weights)

    G.zero_grad()
    loss().backward()
    params = list(G.parameters())
    analytic = torch.cat([p.grad.flatten() for p in params]).numpy()
    numeric = np.empty_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.mean(np.abs(analytic - numeric) / scale <= tol))
