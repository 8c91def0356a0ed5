"""Overlap-aware sliding-window normalization of whole mosaics.

The in-memory and streaming entry points share one band routine. Patches are
pushed through the generator in fixed chunks along each grid row, so a
patch's output never depends on which band requested it, and blending
accumulates contributions in grid order. Together these make band-streamed
output bit-identical to the in-memory result.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigurationError, PartialOutputError
from .preprocess import MODEL_RANGE, RangeSpec, denormalize_intensity, normalize_intensity
from .raster import (
    BlendAccumulator,
    ImageGrid,
    PatchGrid,
    grid_within,
    make_weight_window,
    plan_patch_grid,
)


@dataclass(frozen=True)
class InferenceConfig:
    patch_size: int = 128
    overlap: int | None = None
    window: str = "linear_ramp"
    taper_param: float | None = None
    band_height: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if self.overlap is None:
            object.__setattr__(self, "overlap", self.patch_size // 4)
        if not 0 <= self.overlap < self.patch_size:
            raise ConfigurationError(
                f"overlap must satisfy 0 <= overlap < patch_size, got {self.overlap}"
            )
        if self.band_height < 0 or self.batch_size < 1:
            raise ConfigurationError("band_height must be >= 0 and batch_size >= 1")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    def weight_window(self):
        if self.window == "linear_ramp" and self.taper_param is None:
            if self.overlap == 0:
                return make_weight_window(self.patch_size, "flat")
            return make_weight_window(self.patch_size, "linear_ramp", self.overlap / 2.0)
        return make_weight_window(self.patch_size, self.window, self.taper_param)

    def to_dict(self):
        return asdict(self)


def output_range(model) -> RangeSpec:
    cfg = getattr(model, "cfg", None)
    if cfg is not None and getattr(cfg, "final_activation", "tanh") == "sigmoid":
        return RangeSpec(0.0, 1.0)
    return MODEL_RANGE


def check_model(model, cfg: InferenceConfig) -> None:
    mcfg = getattr(model, "cfg", None)
    multiple = getattr(mcfg, "multiple", 1)
    if cfg.patch_size % multiple:
        raise ConfigurationError(
            f"patch_size {cfg.patch_size} is not divisible by the model's 2^depth = {multiple}"
        )


class ArrayReader:
    """Row-band access to an in-memory raster (values plus optional mask)."""

    def __init__(self, values, mask=None):
        self.values = np.asarray(values)
        self.mask = mask
        self.shape = self.values.shape

    def read(self, r0: int, r1: int) -> np.ndarray:
        return np.asarray(self.values[r0:r1], dtype=np.float64)

    def read_mask(self, r0: int, r1: int):
        return None if self.mask is None else np.asarray(self.mask[r0:r1])


class ArrayWriter:
    def __init__(self, shape, dtype=np.float64):
        self.values = np.zeros(shape, dtype=dtype)

    def write(self, r0: int, block: np.ndarray) -> None:
        self.values[r0 : r0 + block.shape[0]] = block


@torch.no_grad()
def _predict(model, patches: list[np.ndarray], out_range: RangeSpec) -> list[np.ndarray]:
    x = torch.from_numpy(normalize_intensity(np.stack(patches), MODEL_RANGE).astype(np.float32))
    y = model(x.unsqueeze(1))[:, 0].double().numpy()
    return list(denormalize_intensity(y, out_range))


def _process_band(model, reader, grid: PatchGrid, r0: int, r1: int, cfg: InferenceConfig, weights, out_range):
    """Blend every grid patch touching output rows ``[r0, r1)``; returns (rows, patch count)."""
    s = grid.patch_size
    origins = grid_within(grid, r0, r1)
    top = min(o[0] for o in origins)
    bottom = max(o[0] for o in origins) + s
    rows = reader.read(top, bottom)
    acc = BlendAccumulator(r1 - r0, grid.canvas_width, row_offset=r0)
    by_row: dict[int, list] = {}
    for o in origins:
        by_row.setdefault(o[0], []).append(o)
    for x, row_origins in by_row.items():
        for i in range(0, len(row_origins), cfg.batch_size):
            chunk = row_origins[i : i + cfg.batch_size]
            patches = [rows[x - top : x - top + s, y : y + s] for _, y in chunk]
            for origin, out in zip(chunk, _predict(model, patches, out_range)):
                acc.add(out, origin, weights)
    blended = acc.result()
    mask = reader.read_mask(r0, r1)
    if mask is not None:
        blended = np.where(mask, blended, reader.read(r0, r1))
    return blended, len(origins)


def _bands(height: int, band_height: int):
    step = height if band_height <= 0 else band_height
    return [(r, min(r + step, height)) for r in range(0, height, step)]


def normalize_mosaic_streaming(reader, writer, model, cfg: InferenceConfig, start_band: int = 0) -> dict:
    """Normalize a raster band by band.

    ``reader`` exposes ``shape``, ``read(r0, r1)`` and ``read_mask(r0, r1)``;
    ``writer`` exposes ``write(r0, rows)``. If the writer fails, the raised
    :class:`PartialOutputError` carries the band index to resume from.
    """
    check_model(model, cfg)
    h, w = reader.shape
    if cfg.band_height and cfg.band_height < cfg.patch_size:
        raise ConfigurationError("band_height must be >= patch_size")
    if min(h, w) < cfg.patch_size:
        raise ConfigurationError(
            "streaming needs a raster at least one patch in size; use normalize_mosaic to pad"
        )
    model.eval()
    grid = plan_patch_grid(h, w, cfg.patch_size, cfg.stride)
    weights = cfg.weight_window().weights
    out_range = output_range(model)
    bands = _bands(h, cfg.band_height)
    processed = 0
    written = []
    for k, (r0, r1) in enumerate(bands):
        if k < start_band:
            continue
        block, n = _process_band(model, reader, grid, r0, r1, cfg, weights, out_range)
        processed += n
        try:
            writer.write(r0, block)
        except Exception as exc:
            raise PartialOutputError(
                f"writer failed on band {k} (rows {r0}-{r1}): {exc}", next_band=k, written=written
            ) from exc
        written.append(k)
    return {
        "bands": len(bands),
        "patch_evaluations": processed,
        "patches_processed": len(grid),
        "grid_size": len(grid),
        "patch_size": cfg.patch_size,
        "overlap": cfg.overlap,
        "window": cfg.window,
    }


def normalize_mosaic(image: ImageGrid, model, cfg: InferenceConfig | None = None) -> ImageGrid:
    """Apply ``model`` to a whole mosaic with overlapping, weight-blended patches.

    Inputs smaller than one patch are reflect-padded and the result cropped.
    Pixels outside the validity mask are copied from the input.
    """
    cfg = cfg or InferenceConfig()
    check_model(model, cfg)
    h, w = image.shape
    values = image.values
    mask = image.validity_mask
    if min(h, w) < cfg.patch_size:
        ph, pw = max(0, cfg.patch_size - h), max(0, cfg.patch_size - w)
        mode = "reflect" if h > 1 and w > 1 else "edge"
        values = np.pad(values, ((0, ph), (0, pw)), mode=mode)
        if mask is not None:
            mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=True)
    reader = ArrayReader(values, mask)
    writer = ArrayWriter(values.shape)
    normalize_mosaic_streaming(reader, writer, model, InferenceConfig(**{**cfg.to_dict(), "band_height": 0}))
    return image.replace(values=writer.values[:h, :w])
