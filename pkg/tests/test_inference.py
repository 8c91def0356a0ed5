"""Sliding-window mosaic normalization, blending and band streaming."""

import numpy as np
import pytest
import torch

from selenorm.cgan import GeneratorConfig, build_generator
from selenorm.errors import ConfigurationError, PartialOutputError
from selenorm.inference import (
    ArrayReader,
    ArrayWriter,
    InferenceConfig,
    normalize_mosaic,
    normalize_mosaic_streaming,
)
from selenorm.raster import ImageGrid, plan_patch_grid


class PatchMean(torch.nn.Module):
    """Replaces every patch by its own mean: each patch disagrees with its neighbours."""

    def forward(self, x):
        return x.mean(dim=(2, 3), keepdim=True).expand_as(x)


class Constant(torch.nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


def max_jump(values):
    return max(np.abs(np.diff(values, axis=0)).max(), np.abs(np.diff(values, axis=1)).max())


@pytest.fixture(scope="module")
def tiny_model():
    return build_generator(GeneratorConfig(depth=3, base_channels=4), seed=9).eval()


class FailingWriter(ArrayWriter):
    def __init__(self, shape, fail_at):
        super().__init__(shape)
        self.fail_at = fail_at
        self.calls = 0

    def write(self, r0, block):
        if self.calls == self.fail_at:
            self.calls += 1
            raise OSError("disk full")
        self.calls += 1
        super().write(r0, block)


def test_identity_model_round_trip(rng):
    img = ImageGrid(rng.random((300, 260)))
    out = normalize_mosaic(img, torch.nn.Identity(), InferenceConfig(patch_size=64, overlap=16))
    assert np.abs(out.values - img.values).max() <= 1e-6


def test_large_odd_input_keeps_shape(rng):
    img = ImageGrid(rng.random((1000, 1000)))
    out = normalize_mosaic(img, torch.nn.Identity(), InferenceConfig(patch_size=128, overlap=32))
    assert out.shape == (1000, 1000)
    assert np.abs(out.values - img.values).max() <= 1e-6


def test_overlap_smooths_patch_disagreement(rng):
    values = np.clip(rng.random((256, 256)) * 0.2 + np.linspace(0, 0.8, 256)[None, :], 0, 1)
    img = ImageGrid(values)
    hard = normalize_mosaic(img, PatchMean(), InferenceConfig(patch_size=64, overlap=0))
    soft = normalize_mosaic(img, PatchMean(), InferenceConfig(patch_size=64, overlap=32))
    # the outermost margin rows see only the row-distance taper, so compare the interior
    inner = slice(16, -16)
    assert max_jump(soft.values[inner, inner]) < 0.5 * max_jump(hard.values[inner, inner])


def test_blending_adds_no_seams(rng):
    # smooth input through an identity model: no jump beyond the input's own
    yy, xx = np.mgrid[0:320, 0:320] / 320.0
    img = ImageGrid(0.5 + 0.3 * np.sin(3 * xx) * np.cos(2 * yy))
    out = normalize_mosaic(img, torch.nn.Identity(), InferenceConfig(patch_size=64, overlap=16))
    assert max_jump(out.values) <= max_jump(img.values) + 1e-6


def test_streaming_matches_in_memory(rng, tiny_model):
    values = rng.random((2048, 2048))
    cfg = InferenceConfig(patch_size=128, overlap=32, band_height=512)
    ref = normalize_mosaic(ImageGrid(values), tiny_model, cfg).values
    writer = ArrayWriter(values.shape)
    info = normalize_mosaic_streaming(ArrayReader(values), writer, tiny_model, cfg)
    assert np.array_equal(writer.values, ref)
    assert info["bands"] == 4
    assert info["patches_processed"] == len(plan_patch_grid(2048, 2048, 128, 96))
    whole = ArrayWriter(values.shape)
    normalize_mosaic_streaming(ArrayReader(values), whole, tiny_model, InferenceConfig(patch_size=128, overlap=32, band_height=2048))
    assert np.array_equal(whole.values, ref)


def test_writer_failure_resumes(rng, tiny_model):
    values = rng.random((512, 256))
    cfg = InferenceConfig(patch_size=64, overlap=16, band_height=128)
    ref = ArrayWriter(values.shape)
    normalize_mosaic_streaming(ArrayReader(values), ref, tiny_model, cfg)
    writer = FailingWriter(values.shape, fail_at=2)
    with pytest.raises(PartialOutputError) as info:
        normalize_mosaic_streaming(ArrayReader(values), writer, tiny_model, cfg)
    assert info.value.next_band == 2
    normalize_mosaic_streaming(ArrayReader(values), writer, tiny_model, cfg, start_band=info.value.next_band)
    assert np.array_equal(writer.values, ref.values)


def test_patch_not_divisible_by_model(tiny_model):
    with pytest.raises(ConfigurationError):
        normalize_mosaic(ImageGrid(np.zeros((128, 128))), tiny_model, InferenceConfig(patch_size=68))


def test_band_smaller_than_patch(rng):
    with pytest.raises(ConfigurationError):
        normalize_mosaic_streaming(
            ArrayReader(rng.random((256, 256))), ArrayWriter((256, 256)), torch.nn.Identity(), InferenceConfig(patch_size=64, band_height=32)
        )


@pytest.mark.parametrize("kw", [{"overlap": 64}, {"overlap": -1}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        InferenceConfig(patch_size=64, **kw)


def test_default_overlap_is_quarter_patch():
    cfg = InferenceConfig(patch_size=512)
    assert cfg.overlap == 128 and cfg.stride == 384


def test_small_input_is_padded(rng):
    img = ImageGrid(rng.random((50, 70)))
    out = normalize_mosaic(img, torch.nn.Identity(), InferenceConfig(patch_size=64, overlap=16))
    assert out.shape == (50, 70)
    assert np.abs(out.values - img.values).max() <= 1e-6


def test_invalid_pixels_copied(rng):
    values = rng.random((128, 128))
    mask = np.ones((128, 128), bool)
    mask[:, :20] = False
    out = normalize_mosaic(ImageGrid(values, mask), Constant(), InferenceConfig(patch_size=64, overlap=16))
    assert np.array_equal(out.values[:, :20], values[:, :20])
    assert np.allclose(out.values[:, 20:], 0.5)
    assert np.array_equal(out.validity_mask, mask)
