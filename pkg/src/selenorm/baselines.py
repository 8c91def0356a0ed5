"""Classical comparators: global histogram matching and block tone balancing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateReferenceError, DimensionError, ParameterError
from .metrics import normalized_histogram
from .raster import ImageGrid

MAX_GAIN = 16.0


def histogram_match_lut(source: np.ndarray, reference: np.ndarray, bins: int = 256) -> np.ndarray:
    """Monotone bin -> intensity map sending the source CDF onto the reference CDF."""
    if bins < 2:
        raise ParameterError("bins must be >= 2")
    h_ref = normalized_histogram(reference, bins)
    occupied = np.nonzero(h_ref)[0]
    if occupied.size < 2:
        raise DegenerateReferenceError("reference histogram occupies fewer than two bins")
    cdf_src = np.cumsum(normalized_histogram(source, bins))
    cdf_ref = np.cumsum(h_ref)[occupied]
    centers = (occupied + 0.5) / bins
    return np.interp(cdf_src, cdf_ref, centers)


def histogram_match(source: ImageGrid, reference: ImageGrid, bins: int = 256) -> ImageGrid:
    src_mask = source.mask_or_true()
    lut = histogram_match_lut(source.values[src_mask], reference.values[reference.mask_or_true()], bins)
    idx = np.minimum((source.values * bins).astype(np.int64), bins - 1)
    out = np.where(src_mask, lut[idx], source.values)
    return source.replace(values=np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class ToneBalanceConfig:
    block: tuple[int, int] = (4, 4)
    target_mean: float = 0.5
    target_std: float = 0.2
    blend_margin: int = 16

    def __post_init__(self):
        object.__setattr__(self, "block", tuple(int(b) for b in self.block))
        if min(self.block) < 1:
            raise ParameterError("need at least one block per axis")
        if not self.target_std > 0:
            raise ParameterError("target_std must be > 0")
        if self.blend_margin < 0:
            raise ParameterError("blend_margin must be >= 0")

    def to_dict(self):
        return asdict(self)


def _axis_weights(n: int, edges: np.ndarray, margin: int) -> np.ndarray:
    """``(n, blocks)`` weights: one-hot per block, linear ramps of width 2*margin at borders."""
    blocks = edges.size - 1
    pos = np.arange(n) + 0.5
    w = np.zeros((n, blocks))
    for k in range(blocks):
        w[(pos >= edges[k]) & (pos < edges[k + 1]), k] = 1.0
    if margin <= 0:
        return w
    for k in range(1, blocks):
        e = edges[k]
        t = np.clip((pos - (e - margin)) / (2.0 * margin), 0.0, 1.0)
        zone = (pos >= e - margin) & (pos < e + margin)
        w[zone] = 0.0
        w[zone, k - 1] = 1.0 - t[zone]
        w[zone, k] = t[zone]
    return w


def block_statistics(values, mask, cfg: ToneBalanceConfig):
    h, w = values.shape
    rows, cols = cfg.block
    re = np.round(np.linspace(0, h, rows + 1)).astype(np.int64)
    ce = np.round(np.linspace(0, w, cols + 1)).astype(np.int64)
    if np.diff(re).min() < 8 or np.diff(ce).min() < 8:
        raise DimensionError("tone-balance blocks must be at least 8 px on each side")
    gains = np.ones((rows, cols))
    offsets = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            blk = values[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            bm = mask[re[i] : re[i + 1], ce[j] : ce[j + 1]]
            if not bm.any():
                continue
            mean, std = blk[bm].mean(), blk[bm].std()
            gain = MAX_GAIN if std * MAX_GAIN <= cfg.target_std else cfg.target_std / std
            gains[i, j] = gain
            offsets[i, j] = cfg.target_mean - gain * mean
    return re, ce, gains, offsets


def block_tone_balance(mosaic: ImageGrid, cfg: ToneBalanceConfig) -> ImageGrid:
    """Per-block affine map to the target mean/std, blended across block borders.

    Each block gets ``v -> gain * (v - mean) + target_mean`` with
    ``gain = target_std / std`` capped at 16 (zero-variance blocks hit the
    cap). Gains and offsets are interpolated linearly over ``blend_margin``
    pixels on either side of each border.
    """
    mask = mosaic.mask_or_true()
    values = mosaic.values
    re, ce, gains, offsets = block_statistics(values, mask, cfg)
    wr = _axis_weights(values.shape[0], re, cfg.blend_margin)
    wc = _axis_weights(values.shape[1], ce, cfg.blend_margin)
    gain_field = wr @ gains @ wc.T
    offset_field = wr @ offsets @ wc.T
    out = np.clip(gain_field * values + offset_field, 0.0, 1.0)
    return mosaic.replace(values=np.where(mask, out, values))


def reference_targets(reference: ImageGrid) -> tuple[float, float]:
    v = reference.values[reference.mask_or_true()]
    return float(v.mean()), float(v.std())
