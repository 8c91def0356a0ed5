"""Reading and writing single-band rasters.

Supported on disk:

* 8/16-bit grayscale PNG (Pillow)
* 8/16-bit grayscale TIFF (tifffile); GeoTIFF tags are carried through verbatim
* ``.slr`` float container: 8 magic bytes ``b"SLNRRAST"``, uint32 height,
  uint32 width (little-endian), then ``height * width`` little-endian float32
  values in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import RasterFormatError
from .raster import ImageGrid

MAGIC = b"SLNRRAST"
_HEADER = struct.Struct("<8sII")

# GeoTIFF tags copied from input to output untouched.
GEO_TAGS = {
    33550: "ModelPixelScaleTag",
    33922: "ModelTiepointTag",
    34264: "ModelTransformationTag",
    34735: "GeoKeyDirectoryTag",
    34736: "GeoDoubleParamsTag",
    34737: "GeoAsciiParamsTag",
    42113: "GDAL_NODATA",
}


def write_container(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise RasterFormatError(f"container holds 2-D rasters, got shape {values.shape}")
    h, w = values.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    os.replace(tmp, path)


def container_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated container header")
    magic, h, w = _HEADER.unpack(head)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: not a float raster container")
    return h, w


def open_container(path, mode="r") -> np.memmap:
    h, w = container_shape(path)
    expected = _HEADER.size + 4 * h * w
    if os.path.getsize(path) < expected:
        raise RasterFormatError(f"{path}: truncated container body")
    return np.memmap(path, dtype="<f4", mode=mode, offset=_HEADER.size, shape=(h, w))


def create_container(path, height: int, width: int) -> np.memmap:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, height, width))
        fh.truncate(_HEADER.size + 4 * height * width)
    return open_container(path, mode="r+")


def read_container(path) -> np.ndarray:
    return np.array(open_container(path), dtype=np.float32)


def _read_geo_tags(tif: tifffile.TiffFile) -> dict | None:
    page = tif.pages[0]
    tags = {}
    for code in GEO_TAGS:
        tag = page.tags.get(code)
        if tag is not None:
            tags[code] = (tag.dtype, tag.count, tag.value)
    if not tags:
        return None
    meta = {"tiff_tags": tags}
    scale = tags.get(33550)
    tie = tags.get(33922)
    if scale is not None and tie is not None:
        sx, sy = scale[2][0], scale[2][1]
        i, j, _, x, y, _ = tie[2][:6]
        meta["affine"] = (sx, 0.0, x - i * sx, 0.0, -sy, y + j * sy)
    ascii_params = tags.get(34737)
    if ascii_params is not None:
        meta["crs"] = str(ascii_params[2]).rstrip("|")
    return meta


def read_raster(path, name: str | None = None) -> ImageGrid:
    path = Path(path)
    suffix = path.suffix.lower()
    geo = None
    if suffix == ".slr":
        data = read_container(path).astype(np.float64)
        return ImageGrid(np.clip(data, 0.0, 1.0), value_depth=16, name=name or path.stem)
    if suffix in (".tif", ".tiff"):
        with tifffile.TiffFile(path) as tif:
            raw = tif.pages[0].asarray()
            geo = _read_geo_tags(tif)
    elif suffix == ".png":
        with Image.open(path) as im:
            raw = np.array(im)
    else:
        raise RasterFormatError(f"unsupported raster extension {suffix!r}")
    if raw.ndim != 2:
        raise RasterFormatError(f"{path}: expected a single-band raster, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        depth, scale = 8, 255.0
    elif raw.dtype in (np.uint16, np.int32, np.int16) and raw.min() >= 0 and raw.max() <= 65535:
        depth, scale = 16, 65535.0
    else:
        raise RasterFormatError(f"{path}: unsupported sample type {raw.dtype}")
    return ImageGrid(raw.astype(np.float64) / scale, value_depth=depth, geo_meta=geo, name=name or path.stem)


def quantize(values: np.ndarray, depth: int) -> np.ndarray:
    scale = 255.0 if depth == 8 else 65535.0
    out = np.round(np.clip(values, 0.0, 1.0) * scale)
    return out.astype(np.uint8 if depth == 8 else np.uint16)


def write_raster(path, image: ImageGrid, depth: int | None = None) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".slr":
        write_container(path, image.values)
        return
    depth = depth or image.value_depth
    data = quantize(image.values, depth)
    if suffix in (".tif", ".tiff"):
        extratags = []
        if image.geo_meta and "tiff_tags" in image.geo_meta:
            for code, (dtype, count, value) in sorted(image.geo_meta["tiff_tags"].items()):
                extratags.append((code, dtype, count, value, True))
        tifffile.imwrite(path, data, photometric="minisblack", extratags=extratags)
    elif suffix == ".png":
        Image.fromarray(data).save(path)
    else:
        raise RasterFormatError(f"unsupported raster extension {suffix!r}")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im) > 0
