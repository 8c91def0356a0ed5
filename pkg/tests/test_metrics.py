"""Quality metrics against loop oracles, plus seam energy and histogram distances."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import emd_sorted, psnr_loop, rmse_loop, ssim_loop

from selenorm.errors import DimensionError, EmptyDomainError, ParameterError
from selenorm.metrics import (
    INFINITE,
    MetricsReport,
    evaluate_pair,
    histogram_compare,
    normalized_histogram,
    psnr,
    rmse,
    seam_energy,
    ssim,
)
from selenorm.raster import ImageGrid
from selenorm.synth import Boundary, SceneSpec, generate_reference_scene


def vertical(col, h):
    return Boundary("vertical", np.full(h, col))


class TestPsnrRmse:
    def test_identical_is_infinite(self, rng):
        a = rng.random((8, 8))
        assert psnr(a, a) == math.inf
        assert MetricsReport("p", "m", math.inf, 1, 0, 1, 0, 0).row()["psnr_db"] == INFINITE

    def test_uniform_error(self):
        a = np.full((16, 16), 0.5)
        b = a + 0.0625
        assert psnr(a, b) == pytest.approx(10 * math.log10(256), abs=1e-12)
        assert psnr(a, b) == pytest.approx(24.082, abs=5e-4)
        assert rmse(a, b) == pytest.approx(0.0625, abs=1e-15)
        assert rmse(a, a) == 0.0

    def test_matches_loops_and_identity(self, rng):
        for _ in range(10):
            a, b = rng.random((32, 32)), rng.random((32, 32))
            assert abs(psnr(a, b) - psnr_loop(a, b)) <= 1e-9
            assert abs(rmse(a, b) - rmse_loop(a, b)) <= 1e-9
            assert abs(-20 * math.log10(rmse(a, b)) - psnr(a, b)) <= 1e-9

    def test_empty_domain(self):
        a = ImageGrid(np.zeros((4, 4)), validity_mask=np.zeros((4, 4), bool))
        with pytest.raises(EmptyDomainError):
            psnr(a, a)
        with pytest.raises(EmptyDomainError):
            rmse(a, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rmse(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identity(self, rng):
        a = rng.random((20, 20))
        assert ssim(a, a) == 1.0

    def test_constants(self):
        assert ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.3)) == 1.0

    def test_matches_loop_oracle(self, rng):
        for _ in range(5):
            a, b = rng.random((32, 32)), rng.random((32, 32))
            assert abs(ssim(a, b) - ssim_loop(a, b)) <= 1e-6

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((24, 24)), r.random((24, 24))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
        assert -1 <= ssim(a, b) <= 1

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((10, 30)), np.zeros((10, 30)))
        with pytest.raises(ParameterError):
            ssim(np.zeros((30, 30)), np.zeros((30, 30)), window_size=10)


class TestMasks:
    def test_invalid_border_does_not_change_interior_metrics(self, rng):
        a, b = rng.random((40, 40)), rng.random((40, 40))
        pa, pb = np.pad(a, 5, constant_values=0.9), np.pad(b, 5, constant_values=0.1)
        m = np.zeros((50, 50), bool)
        m[5:45, 5:45] = True
        ga, gb = ImageGrid(pa, validity_mask=m), ImageGrid(pb)
        assert psnr(ga, gb) == pytest.approx(psnr(a, b), abs=1e-12)
        assert rmse(ga, gb) == pytest.approx(rmse(a, b), abs=1e-12)
        assert ssim(ga, gb) == pytest.approx(ssim(a, b), abs=1e-12)
        assert histogram_compare(ga, gb) == pytest.approx(histogram_compare(a, b), abs=1e-12)


class TestHistogram:
    def test_identity(self, rng):
        a = rng.random((16, 16))
        assert histogram_compare(a, a) == (1.0, 0.0)

    def test_disjoint_constants(self):
        inter, emd = histogram_compare(np.full((8, 8), 0.1), np.full((8, 8), 0.9))
        assert inter == 0.0
        # 0.8 up to one bin width of quantization (205 bins apart at 256 bins)
        assert emd == pytest.approx(0.8, abs=1 / 256)
        assert emd == pytest.approx(205 / 256, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), bins=st.sampled_from([8, 64, 256]))
    def test_emd_symmetric_and_matches_sorted_oracle(self, seed, bins):
        r = np.random.default_rng(seed)
        a, b = r.random((32, 32)), r.beta(2, 5, (32, 32))
        e_ab = histogram_compare(a, b, bins)[1]
        assert e_ab == histogram_compare(b, a, bins)[1]
        assert abs(e_ab - emd_sorted(a, b, bins)) <= 1e-9

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_intersection_total_variation(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((20, 20)), r.random((20, 20)) ** 2
        ha, hb = normalized_histogram(a.ravel()), normalized_histogram(b.ravel())
        inter = histogram_compare(a, b)[0]
        assert abs(inter - (1 - np.abs(ha - hb).sum() / 2)) <= 1e-12
        assert 0 <= inter <= 1


class TestSeamEnergy:
    def test_constant_image(self):
        assert seam_energy(np.full((32, 32), 0.5), [vertical(16, 32)]) == 0.0

    def test_half_planes(self):
        v = np.full((32, 32), 0.4)
        v[:, 16:] = 0.6
        assert seam_energy(v, [vertical(16, 32)]) == pytest.approx(0.2, abs=1e-12)

    def test_smooth_scene_without_seam(self):
        v = generate_reference_scene(SceneSpec(seed=11, size=(256, 256))).values
        interior = np.mean(np.abs(np.diff(v, axis=1)))
        e = seam_energy(v, [vertical(128, 256), Boundary("horizontal", np.full(256, 100))])
        assert e <= 0.25 * interior

    def test_errors(self):
        with pytest.raises(ParameterError):
            seam_energy(np.zeros((8, 8)), [])
        with pytest.raises(DimensionError):
            seam_energy(np.zeros((8, 8)), [vertical(8, 8)])
        with pytest.raises(ParameterError):
            seam_energy(np.zeros((8, 8)), [Boundary("diagonal", np.full(8, 4))])


def test_evaluate_pair_fields(rng):
    a, b = rng.random((32, 32)), rng.random((32, 32))
    r = evaluate_pair(a, b, [vertical(16, 32)], "pair-0", "model")
    row = r.row()
    assert list(row) == list(MetricsReport.FIELDS)
    assert row["method"] == "model" and row["pair_id"] == "pair-0"
    assert r.psnr_db == pytest.approx(-20 * math.log10(r.rmse), abs=1e-9)
