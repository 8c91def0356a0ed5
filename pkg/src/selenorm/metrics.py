"""Image quality and radiometric-consistency metrics.

Every metric takes two rasters (``ImageGrid`` or arrays in [0, 1]) and works
on the jointly valid pixels only. PSNR uses a peak of 1.0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, EmptyDomainError, ParameterError
from .raster import ImageGrid
from .synth import Boundary

INFINITE = "infinite"


def _pair(a, b, mask=None):
    va = a.values if isinstance(a, ImageGrid) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, ImageGrid) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"image shapes differ: {va.shape} vs {vb.shape}")
    joint = np.ones(va.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    for im in (a, b):
        if isinstance(im, ImageGrid) and im.validity_mask is not None:
            joint &= im.validity_mask
    return va.astype(np.float64), vb.astype(np.float64), joint


def mse(a, b, mask=None) -> float:
    va, vb, m = _pair(a, b, mask)
    if not m.any():
        raise EmptyDomainError("no jointly valid pixels")
    return float(np.mean((va[m] - vb[m]) ** 2))


def rmse(a, b, mask=None) -> float:
    return math.sqrt(mse(a, b, mask))


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` in dB; identical inputs give ``math.inf``."""
    err = mse(a, b, mask)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_kernel_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = g.size // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[half : x.shape[0] - half, half : x.shape[1] - half]


def ssim_map(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    va, vb, m = _pair(a, b)
    if window_size % 2 == 0:
        raise ParameterError("SSIM window size must be odd")
    if min(va.shape) < window_size:
        raise DimensionError(f"image {va.shape} smaller than the {window_size}px SSIM window")
    g = gaussian_kernel_1d(window_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(va, g), _filter_valid(vb, g)
    saa = _filter_valid(va * va, g) - mu_a * mu_a
    sbb = _filter_valid(vb * vb, g) - mu_b * mu_b
    sab = _filter_valid(va * vb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    half = window_size // 2
    window_ok = ndimage.minimum_filter(m.astype(np.uint8), size=window_size, mode="constant")
    window_ok = window_ok[half : m.shape[0] - half, half : m.shape[1] - half].astype(bool)
    return smap, window_ok


def ssim(a, b, window_size=11, k1=0.01, k2=0.03, sigma=1.5) -> float:
    """Mean gaussian-window SSIM over windows lying entirely on valid pixels."""
    smap, ok = ssim_map(a, b, window_size, sigma, k1, k2)
    if not ok.any():
        raise EmptyDomainError("no fully valid SSIM window")
    return float(smap[ok].mean())


def normalized_histogram(values: np.ndarray, bins: int = 256) -> np.ndarray:
    idx = np.minimum((np.asarray(values) * bins).astype(np.int64), bins - 1)
    h = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    return h / h.sum()


def histogram_compare(a, b, bins: int = 256) -> tuple[float, float]:
    """``(intersection, emd)``; EMD is the L1 distance between CDFs in intensity units."""
    va, vb, m = _pair(a, b)
    if not m.any():
        raise EmptyDomainError("no jointly valid pixels")
    ha, hb = normalized_histogram(va[m], bins), normalized_histogram(vb[m], bins)
    intersection = float(np.minimum(ha, hb).sum())
    emd = float(np.abs(np.cumsum(ha) - np.cumsum(hb)).sum() / bins)
    return intersection, emd


def histogram_emd(a, b, bins: int = 256) -> float:
    return histogram_compare(a, b, bins)[1]


def _tile_labels(shape, boundaries) -> np.ndarray:
    h, w = shape
    labels = np.zeros(shape, dtype=np.int64)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for k, b in enumerate(boundaries):
        if b.orientation == "vertical":
            side = cols >= np.asarray(b.positions)[:, None]
        else:
            side = rows >= np.asarray(b.positions)[None, :]
        labels |= side.astype(np.int64) << k
    return labels


def seam_energy(image, tile_boundaries, mask=None) -> float:
    """Excess intensity jump across tile boundaries over the interior baseline.

    Cross-boundary pairs are the horizontal neighbours straddling a vertical
    boundary (and vertical neighbours for horizontal ones). The interior
    baseline is the mean absolute difference over all 4-neighbour pairs that
    stay inside one tile. The difference is floored at 0.
    """
    if not tile_boundaries:
        raise ParameterError("seam energy needs at least one boundary")
    v = image.values if isinstance(image, ImageGrid) else np.asarray(image, dtype=np.float64)
    valid = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
    if isinstance(image, ImageGrid) and image.validity_mask is not None:
        valid = valid & image.validity_mask
    h, w = v.shape
    cross = []
    for b in tile_boundaries:
        pos = np.asarray(b.positions)
        if b.orientation == "vertical":
            if pos.shape[0] != h or pos.min() < 1 or pos.max() > w - 1:
                raise DimensionError("vertical boundary lies outside the image")
            r = np.arange(h)
            ok = valid[r, pos] & valid[r, pos - 1]
            cross.append(np.abs(v[r, pos] - v[r, pos - 1])[ok])
        elif b.orientation == "horizontal":
            if pos.shape[0] != w or pos.min() < 1 or pos.max() > h - 1:
                raise DimensionError("horizontal boundary lies outside the image")
            c = np.arange(w)
            ok = valid[pos, c] & valid[pos - 1, c]
            cross.append(np.abs(v[pos, c] - v[pos - 1, c])[ok])
        else:
            raise ParameterError(f"unknown boundary orientation {b.orientation!r}")
    cross = np.concatenate(cross)
    if cross.size == 0:
        raise EmptyDomainError("no valid pixel pairs across the boundaries")
    labels = _tile_labels(v.shape, tile_boundaries)
    dh = np.abs(np.diff(v, axis=1))[(labels[:, 1:] == labels[:, :-1]) & valid[:, 1:] & valid[:, :-1]]
    dv = np.abs(np.diff(v, axis=0))[(labels[1:] == labels[:-1]) & valid[1:] & valid[:-1]]
    interior = np.concatenate([dh, dv])
    baseline = interior.mean() if interior.size else 0.0
    return float(max(cross.mean() - baseline, 0.0))


@dataclass
class MetricsReport:
    pair_id: str
    method_label: str
    psnr_db: float
    ssim: float
    rmse: float
    hist_intersection: float
    hist_emd: float
    seam_energy: float

    FIELDS = ("pair_id", "method", "psnr_db", "ssim", "rmse", "hist_intersection", "hist_emd", "seam_energy")

    def row(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "method": self.method_label,
            "psnr_db": format_psnr(self.psnr_db),
            "ssim": repr(self.ssim),
            "rmse": repr(self.rmse),
            "hist_intersection": repr(self.hist_intersection),
            "hist_emd": repr(self.hist_emd),
            "seam_energy": repr(self.seam_energy),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.psnr_db):
            d["psnr_db"] = INFINITE
        return d


def format_psnr(value: float) -> str:
    return INFINITE if math.isinf(value) else repr(value)


def evaluate_pair(candidate, reference, boundaries, pair_id="", method="", bins=256, mask=None) -> MetricsReport:
    """All metrics for one candidate/reference pair."""
    if mask is not None:
        candidate = _masked(candidate, mask)
    inter, emd = histogram_compare(candidate, reference, bins)
    return MetricsReport(
        pair_id=pair_id,
        method_label=method,
        psnr_db=psnr(candidate, reference),
        ssim=ssim(candidate, reference),
        rmse=rmse(candidate, reference),
        hist_intersection=inter,
        hist_emd=emd,
        seam_energy=seam_energy(candidate, boundaries),
    )


def _masked(image, mask):
    if isinstance(image, ImageGrid):
        joint = mask if image.validity_mask is None else (mask & image.validity_mask)
        return image.replace(validity_mask=joint)
    return ImageGrid(np.clip(image, 0, 1), validity_mask=mask)


__all__ = [
    "Boundary",
    "MetricsReport",
    "evaluate_pair",
    "histogram_compare",
    "histogram_emd",
    "mse",
    "psnr",
    "rmse",
    "seam_energy",
    "ssim",
    "ssim_map",
]
