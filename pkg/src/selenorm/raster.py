"""Raster container, patch-grid planning and overlap-aware blending.

Coordinates follow array convention: an origin ``(x, y)`` is ``(row, col)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, CoverageError, DimensionError, ParameterError

TAPERS = ("flat", "linear_ramp", "gaussian")
GAUSSIAN_FLOOR = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Single-band raster with intensities normalized to [0, 1].

    ``validity_mask`` marks informative pixels (True). ``geo_meta`` is carried
    through untouched from input to output rasters.
    """

    values: np.ndarray
    validity_mask: np.ndarray | None = None
    value_depth: int = 8
    geo_meta: dict | None = None
    name: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2:
            raise DimensionError(f"expected a 2-D raster, got shape {vals.shape}")
        if vals.shape[0] < 1 or vals.shape[1] < 1:
            raise DimensionError(f"raster must be at least 1x1, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ParameterError("raster contains non-finite values")
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise ParameterError(
                f"raster values must lie in [0, 1], got [{vals.min()}, {vals.max()}]"
            )
        object.__setattr__(self, "values", _frozen(vals))
        if self.validity_mask is not None:
            mask = np.array(self.validity_mask, dtype=bool, copy=True)
            if mask.shape != vals.shape:
                raise DimensionError(
                    f"mask shape {mask.shape} differs from raster shape {vals.shape}"
                )
            object.__setattr__(self, "validity_mask", _frozen(mask))
        if self.value_depth not in (8, 16):
            raise ParameterError(f"value_depth must be 8 or 16, got {self.value_depth}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def mask_or_true(self) -> np.ndarray:
        if self.validity_mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.validity_mask

    def replace(self, values=None, validity_mask=..., **kw) -> "ImageGrid":
        """Copy with some fields swapped; metadata is kept unless overridden."""
        return ImageGrid(
            values=self.values if values is None else values,
            validity_mask=self.validity_mask if validity_mask is ... else validity_mask,
            value_depth=kw.get("value_depth", self.value_depth),
            geo_meta=kw.get("geo_meta", self.geo_meta),
            name=kw.get("name", self.name),
        )


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    origins: tuple[tuple[int, int], ...]
    canvas_height: int
    canvas_width: int

    def __post_init__(self):
        s = self.patch_size
        if s < 1:
            raise ParameterError(f"patch_size must be >= 1, got {s}")
        if not 1 <= self.stride <= s:
            raise ParameterError(f"stride must satisfy 1 <= stride <= {s}, got {self.stride}")
        origins = tuple((int(x), int(y)) for x, y in self.origins)
        for x, y in origins:
            if not (0 <= x <= self.canvas_height - s and 0 <= y <= self.canvas_width - s):
                raise BoundsError(f"origin {(x, y)} places a {s}px patch outside the canvas")
        if list(origins) != sorted(set(origins)):
            raise ParameterError("origins must be unique and sorted row-major")
        object.__setattr__(self, "origins", origins)

    def __len__(self):
        return len(self.origins)

    @property
    def overlap(self) -> int:
        return self.patch_size - self.stride


@dataclass(frozen=True, eq=False)
class Patch:
    origin: tuple[int, int]
    values: np.ndarray
    parent_id: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise DimensionError(f"patch must be square, got shape {vals.shape}")
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class WeightWindow:
    size: int
    weights: np.ndarray
    taper: str = "flat"
    taper_param: float | None = None


def axis_origins(dim: int, patch_size: int, stride: int) -> list[int]:
    """Stride positions along one axis, last one clamped flush to the border."""
    last = dim - patch_size
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    return starts


def plan_patch_grid(height: int, width: int, patch_size: int, stride: int) -> PatchGrid:
    if patch_size < 1:
        raise ParameterError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > min(height, width):
        raise DimensionError(
            f"patch_size {patch_size} exceeds raster dimensions {height}x{width}; pad first"
        )
    if not 1 <= stride <= patch_size:
        raise ParameterError(f"stride must satisfy 1 <= stride <= {patch_size}, got {stride}")
    rows = axis_origins(height, patch_size, stride)
    cols = axis_origins(width, patch_size, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch_size, stride, origins, height, width)


def extract_patch(image, origin, patch_size: int, parent_id: str | None = None) -> Patch:
    """Copy the ``patch_size`` window at ``origin`` out of ``image``.

    ``image`` may be an :class:`ImageGrid` or a bare 2-D array.
    """
    values = image.values if isinstance(image, ImageGrid) else np.asarray(image)
    x, y = int(origin[0]), int(origin[1])
    h, w = values.shape
    if x < 0 or y < 0 or x + patch_size > h or y + patch_size > w:
        raise BoundsError(
            f"patch at {(x, y)} of size {patch_size} exceeds raster bounds {h}x{w}"
        )
    if parent_id is None:
        parent_id = image.name if isinstance(image, ImageGrid) else ""
    return Patch((x, y), values[x : x + patch_size, y : y + patch_size].copy(), parent_id)


def extract_all(image, grid: PatchGrid) -> list[Patch]:
    return [extract_patch(image, o, grid.patch_size) for o in grid.origins]


def _edge_distance(size: int) -> np.ndarray:
    i = np.arange(size)
    return np.minimum(i, size - 1 - i).astype(np.float64)


def make_weight_window(
    patch_size: int, taper: str = "linear_ramp", taper_param: float | None = None
) -> WeightWindow:
    """Blending weights for one patch.

    ``linear_ramp`` uses ``taper_param`` as the margin ``m`` in pixels: a pixel
    whose distance to the nearest patch edge is ``d`` gets ``min(1, (d + 0.5) / m)``.
    ``gaussian`` uses ``taper_param`` as sigma (default ``patch_size / 6``) in a
    separable bell centred on the patch.
    """
    if patch_size < 1:
        raise ParameterError(f"patch_size must be >= 1, got {patch_size}")
    if taper not in TAPERS:
        raise ParameterError(f"unknown taper {taper!r}; expected one of {TAPERS}")

    if taper == "flat":
        weights = np.ones((patch_size, patch_size))
        taper_param = None
    elif taper == "linear_ramp":
        if taper_param is None:
            taper_param = max(patch_size / 8.0, 1.0)
        if not taper_param > 0:
            raise ParameterError(f"linear_ramp margin must be > 0, got {taper_param}")
        d = _edge_distance(patch_size)
        dist = np.minimum.outer(d, d)
        weights = np.minimum(1.0, (dist + 0.5) / taper_param)
    else:
        if taper_param is None:
            taper_param = patch_size / 6.0
        if not taper_param > 0:
            raise ParameterError(f"gaussian sigma must be > 0, got {taper_param}")
        c = (patch_size - 1) / 2.0
        g = np.exp(-((np.arange(patch_size) - c) ** 2) / (2.0 * taper_param**2))
        # floored so narrow bells never underflow to a zero-weight corner
        weights = np.maximum(np.outer(g, g), GAUSSIAN_FLOOR)

    weights = weights / weights.max()
    return WeightWindow(patch_size, _frozen(weights), taper, taper_param)


class BlendAccumulator:
    """Running numerator/denominator canvases for weighted patch averaging.

    Contributions are accumulated in float64 in call order, so a fixed patch
    order gives bit-reproducible output. ``row_offset`` lets a caller hold only
    a horizontal band ``[row_offset, row_offset + height)`` of a larger canvas;
    rows of a contribution outside the band are dropped.
    """

    def __init__(self, height: int, width: int, row_offset: int = 0):
        self.height = height
        self.width = width
        self.row_offset = row_offset
        self.num = np.zeros((height, width), dtype=np.float64)
        self.den = np.zeros((height, width), dtype=np.float64)

    def add(self, values: np.ndarray, origin, weights: np.ndarray) -> None:
        x, y = int(origin[0]) - self.row_offset, int(origin[1])
        ph, pw = values.shape
        if weights.shape != values.shape:
            raise DimensionError(f"weights {weights.shape} do not match patch {values.shape}")
        if y < 0 or y + pw > self.width:
            raise BoundsError(f"patch at column {origin[1]} does not fit the canvas")
        r0, r1 = max(x, 0), min(x + ph, self.height)
        if r0 >= r1:
            return
        v = values[r0 - x : r1 - x].astype(np.float64)
        w = weights[r0 - x : r1 - x].astype(np.float64)
        self.num[r0:r1, y : y + pw] += w * v
        self.den[r0:r1, y : y + pw] += w

    def result(self) -> np.ndarray:
        bad = ~(self.den > 0)
        if bad.any():
            rows, cols = np.nonzero(bad)
            listed = [(int(r) + self.row_offset, int(c)) for r, c in zip(rows[:20], cols[:20])]
            raise CoverageError(
                f"{bad.sum()} canvas pixels have zero accumulated weight, e.g. {listed}",
                uncovered=listed,
            )
        return np.clip(self.num / self.den, 0.0, 1.0)


def blend_patches(
    canvas_height: int,
    canvas_width: int,
    contributions: Iterable[tuple[Patch, WeightWindow]],
    **image_kw,
) -> ImageGrid:
    acc = BlendAccumulator(canvas_height, canvas_width)
    for patch, window in contributions:
        x, y = patch.origin
        if x < 0 or y < 0 or x + patch.size > canvas_height or y + patch.size > canvas_width:
            raise BoundsError(f"patch at {patch.origin} does not fit the canvas")
        acc.add(patch.values, patch.origin, window.weights)
    return ImageGrid(acc.result(), **image_kw)


@dataclass(frozen=True)
class CoverageReport:
    covered: bool
    max_overlap_count: int
    uncovered_pixels: int


def overlap_counts(grid: PatchGrid) -> np.ndarray:
    counts = np.zeros((grid.canvas_height, grid.canvas_width), dtype=np.int32)
    s = grid.patch_size
    for x, y in grid.origins:
        counts[x : x + s, y : y + s] += 1
    return counts


def coverage_report(grid: PatchGrid) -> CoverageReport:
    counts = overlap_counts(grid)
    uncovered = int((counts == 0).sum())
    return CoverageReport(uncovered == 0, int(counts.max(initial=0)), uncovered)


def reflect_pad(values: np.ndarray, min_size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad so both sides reach ``min_size``; returns the pad amounts."""
    h, w = values.shape
    ph, pw = max(0, min_size - h), max(0, min_size - w)
    if ph == 0 and pw == 0:
        return values, (0, 0)
    mode = "reflect" if h > 1 and w > 1 else "edge"
    return np.pad(values, ((0, ph), (0, pw)), mode=mode), (ph, pw)


def grid_within(grid: PatchGrid, row0: int, row1: int) -> list[tuple[int, int]]:
    """Origins of patches whose footprint intersects rows ``[row0, row1)``."""
    s = grid.patch_size
    return [o for o in grid.origins if o[0] < row1 and o[0] + s > row0]


def as_values(image) -> np.ndarray:
    return image.values if isinstance(image, ImageGrid) else np.asarray(image, dtype=np.float64)


def stack_masks(*images: Sequence) -> np.ndarray | None:
    masks = [im.validity_mask for im in images if isinstance(im, ImageGrid) and im.validity_mask is not None]
    if not masks:
        return None
    out = masks[0].copy()
    for m in masks[1:]:
        out &= m
    return out
