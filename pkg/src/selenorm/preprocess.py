"""Input conditioning: validity masking, CLAHE and model-range scaling.

The fixed order is mask -> CLAHE -> normalize so that tile histograms never
see non-informative pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .raster import ImageGrid


@dataclass(frozen=True)
class ClaheConfig:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ConfigurationError("CLAHE needs at least one tile per axis")
        if self.clip_limit < 1:
            raise ConfigurationError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if not 2 <= self.bins <= 65536:
            raise ConfigurationError(f"bins must be in [2, 65536], got {self.bins}")


@dataclass(frozen=True)
class RangeSpec:
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ParameterError(f"range needs lo < hi, got ({self.lo}, {self.hi})")


MODEL_RANGE = RangeSpec(-1.0, 1.0)


def bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((values * bins).astype(np.int64), bins - 1)


def tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(np.int64)


def clipped_lut(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Transfer function for one tile histogram.

    Counts above ``clip_limit * n / bins`` are cut and the excess is spread
    evenly over all bins in a single pass. The LUT is the cumulative histogram
    rescaled so its first bin maps to 0 and its last to 1.
    """
    hist = hist.astype(np.float64)
    bins = hist.size
    n = hist.sum()
    ceiling = clip_limit * n / bins
    excess = np.maximum(hist - ceiling, 0.0).sum()
    hist = np.minimum(hist, ceiling) + excess / bins
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.argmax(cdf > 0)]
    span = cdf[-1] - cdf_min
    if span <= 0:
        # every pixel in the lowest occupied bin: keep intensities as they are
        return (np.arange(bins) + 0.5) / bins
    return np.clip((cdf - cdf_min) / span, 0.0, 1.0)


def clahe_luts(values: np.ndarray, mask: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    """Per-tile LUTs, shape ``(tiles_y, tiles_x, bins)``."""
    h, w = values.shape
    re, ce = tile_edges(h, cfg.tiles_y), tile_edges(w, cfg.tiles_x)
    idx = bin_index(values, cfg.bins)
    luts = np.empty((cfg.tiles_y, cfg.tiles_x, cfg.bins))
    for i in range(cfg.tiles_y):
        for j in range(cfg.tiles_x):
            tile = idx[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            tmask = mask[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            if tmask.sum() * 2 < tmask.size:
                raise ConfigurationError(
                    f"CLAHE tile ({i}, {j}) is more than half non-informative; "
                    "use fewer tiles or trim the border first"
                )
            hist = np.bincount(tile[tmask], minlength=cfg.bins)
            luts[i, j] = clipped_lut(hist, cfg.clip_limit)
    return luts


def _interp_axis(n: int, edges: np.ndarray):
    """Lower tile index and weight of the upper tile for every coordinate."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    if centers.size == 1:
        return np.zeros(n, dtype=np.int64), np.zeros(n)
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, centers.size - 2)
    t = (pos - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, np.clip(t, 0.0, 1.0)


def clahe(image: ImageGrid, cfg: ClaheConfig | None = None) -> ImageGrid:
    """Contrast-limited adaptive histogram equalization.

    Each output pixel is the bilinear blend of the four neighbouring tile LUTs
    evaluated at its own bin. Pixels outside the outermost tile centres use the
    nearest tiles only. Invalid pixels are returned unchanged.
    """
    cfg = cfg or ClaheConfig()
    h, w = image.shape
    if h < cfg.tiles_y or w < cfg.tiles_x:
        raise ConfigurationError(
            f"image {h}x{w} is smaller than the {cfg.tiles_y}x{cfg.tiles_x} tile layout"
        )
    re, ce = tile_edges(h, cfg.tiles_y), tile_edges(w, cfg.tiles_x)
    if np.diff(re).min() < 2 or np.diff(ce).min() < 2:
        raise ConfigurationError("CLAHE tiles smaller than 2x2 pixels")
    mask = image.mask_or_true()
    values = image.values
    luts = clahe_luts(values, mask, cfg)
    idx = bin_index(values, cfg.bins)

    r0, tr = _interp_axis(h, re)
    c0, tc = _interp_axis(w, ce)
    r1 = np.minimum(r0 + 1, cfg.tiles_y - 1)
    c1 = np.minimum(c0 + 1, cfg.tiles_x - 1)
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    TR, TC = tr[:, None], tc[None, :]
    top = (1 - TC) * luts[R0, C0, idx] + TC * luts[R0, C1, idx]
    bottom = (1 - TC) * luts[R1, C0, idx] + TC * luts[R1, C1, idx]
    out = (1 - TR) * top + TR * bottom
    out = np.where(mask, np.clip(out, 0.0, 1.0), values)
    return image.replace(values=out)


def normalize_intensity(image, out: RangeSpec = MODEL_RANGE) -> np.ndarray:
    values = image.values if isinstance(image, ImageGrid) else np.asarray(image)
    return out.lo + values * (out.hi - out.lo)


def denormalize_intensity(values, src: RangeSpec = MODEL_RANGE) -> np.ndarray:
    return np.clip((np.asarray(values) - src.lo) / (src.hi - src.lo), 0.0, 1.0)


def build_validity_mask(
    image: ImageGrid, nodata_value: float | None = None, border_trim: int = 0
) -> np.ndarray:
    h, w = image.shape
    if border_trim < 0 or 2 * border_trim >= min(h, w):
        raise ParameterError(f"border_trim {border_trim} leaves no interior in a {h}x{w} raster")
    mask = np.ones((h, w), dtype=bool)
    if nodata_value is not None:
        mask &= np.abs(image.values - nodata_value) > 1e-6
    if border_trim:
        mask[:border_trim] = False
        mask[-border_trim:] = False
        mask[:, :border_trim] = False
        mask[:, -border_trim:] = False
    if image.validity_mask is not None:
        mask &= image.validity_mask
    return mask


def preprocess_image(
    image: ImageGrid,
    clahe_cfg: ClaheConfig | None = None,
    apply_clahe: bool = True,
    nodata_value: float | None = None,
    border_trim: int = 0,
) -> ImageGrid:
    """Mask then (optionally) CLAHE; scaling to the model range happens at batch time."""
    mask = build_validity_mask(image, nodata_value, border_trim)
    out = image.replace(validity_mask=mask)
    if apply_clahe:
        out = clahe(out, clahe_cfg or ClaheConfig())
    return out
