"""Tests for wavelet.py."""

import math

import numpy as np
import pytest

from models import GrayImage, InputError, SigmaBand, SparseCoeffImage, WaveletPyramid
from phantom import generate_phantom, shepp_logan_spec
from wavelet import (
    MAD_SCALE,
    dwt2,
    estimate_noise_sigma,
    hard_threshold,
    idwt2,
    indicator_map,
    reconstruct,
    sparsify,
    universal_threshold,
)


class TestDwt2:
    def test_single_step_layout(self):
        pyr = dwt2(GrayImage(np.array([[1.0, 2.0], [3.0, 4.0]])), levels=1)
        # LL, DH / DV, DD
        assert pyr.coeffs == pytest.approx(np.array([[5.0, -1.0], [-2.0, 0.0]]))

    def test_corner_impulse(self):
        pyr = dwt2(GrayImage(np.array([[4.0, 0.0], [0.0, 0.0]])), levels=1)
        assert pyr.coeffs == pytest.approx(np.full((2, 2), 2.0))

    def test_constant_image_has_no_details(self):
        pyr = dwt2(GrayImage(np.full((8, 8), 3.0)))
        assert pyr.coeffs[0, 0] == pytest.approx(24.0)
        details = pyr.coeffs.copy()
        details[0, 0] = 0.0
        assert np.max(np.abs(details)) < 1e-12

    def test_parseval(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(128, 128))
        pyr = dwt2(GrayImage(data))
        energy = np.sum(data ** 2)
        assert abs(np.sum(pyr.coeffs ** 2) - energy) / energy <= 1e-9

    def test_rejects_non_dyadic(self):
        with pytest.raises(InputError, match="divisible"):
            dwt2(GrayImage(np.zeros((12, 16))))


class TestIdwt2:
    def test_perfect_reconstruction(self):
        rng = np.random.default_rng(1)
        for n1, n2 in [(8, 8), (16, 32), (64, 64), (256, 256), (40, 24)]:
            data = rng.uniform(-5, 5, size=(n1, n2))
            back = idwt2(dwt2(GrayImage(data)))
            assert np.max(np.abs(back.data - data)) <= 1e-10

    def test_many_random_images(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n1, n2 = 8 * rng.integers(1, 9, size=2)
            data = rng.normal(size=(n1, n2))
            assert np.max(np.abs(idwt2(dwt2(GrayImage(data))).data - data)) <= 1e-10

    def test_zero_pyramid(self):
        assert not idwt2(WaveletPyramid(np.zeros((16, 16)))).data.any()

    def test_approximation_basis_vector(self):
        coeffs = np.zeros((8, 8))
        coeffs[0, 0] = 1.0
        img = idwt2(WaveletPyramid(coeffs))
        assert np.allclose(img.data, 1.0 / 8.0)
        assert np.sum(img.data ** 2) == pytest.approx(1.0)


class TestNoiseSigma:
    def test_pooled_odd_count(self):
        pyr = WaveletPyramid(np.array([[9.0, 1.0], [-3.0, 2.0]]), levels=1)
        assert estimate_noise_sigma(pyr) == pytest.approx(2.0 / MAD_SCALE)

    def test_dd1_only(self):
        coeffs = np.zeros((8, 8))
        coeffs[4:, 4:] = -0.6745
        pyr = WaveletPyramid(coeffs)
        assert estimate_noise_sigma(pyr, SigmaBand.DD1) == pytest.approx(1.0, abs=1e-12)
        assert estimate_noise_sigma(pyr, SigmaBand.POOLED) == 0.0

    def test_even_count_median(self):
        coeffs = np.zeros((8, 8))
        coeffs[4:, 4:] = np.arange(16).reshape(4, 4)
        pyr = WaveletPyramid(coeffs)
        assert estimate_noise_sigma(pyr, SigmaBand.DD1) == pytest.approx(7.5 / MAD_SCALE)

    def test_recovers_noise_level(self):
        rng = np.random.default_rng(4)
        pyr = dwt2(GrayImage(rng.normal(0.0, 0.2, size=(128, 128))))
        assert estimate_noise_sigma(pyr) == pytest.approx(0.2, rel=0.05)


class TestUniversalThreshold:
    def test_values(self):
        assert universal_threshold(0.0, 100) == 0.0
        assert universal_threshold(0.5, 100) == pytest.approx(1.5174271293851465, abs=1e-12)
        assert universal_threshold(1.0, 16384) == pytest.approx(math.sqrt(2 * math.log(16384)), abs=1e-12)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            universal_threshold(-1.0, 10)
        with pytest.raises(ValueError):
            universal_threshold(1.0, 1)


class TestHardThreshold:
    def _pyramid(self):
        rng = np.random.default_rng(7)
        return dwt2(GrayImage(rng.normal(size=(16, 16))))

    def test_boundary_kept(self):
        coeffs = np.zeros((8, 8))
        coeffs[0, 4] = 0.5
        coeffs[4, 0] = 0.49
        sci = hard_threshold(WaveletPyramid(coeffs), 0.5)
        assert sci.coeffs[0, 4] == 0.5
        assert sci.coeffs[4, 0] == 0.0

    def test_zero_threshold_keeps_everything(self):
        pyr = self._pyramid()
        sci = hard_threshold(pyr, 0.0)
        assert np.array_equal(sci.coeffs, pyr.coeffs)
        assert sci.s == np.count_nonzero(pyr.coeffs)

    def test_infinite_threshold_keeps_approximation(self):
        pyr = self._pyramid()
        sci = hard_threshold(pyr, math.inf)
        assert sci.s == np.count_nonzero(pyr.coeffs[:2, :2])

    def test_surviving_coefficients(self):
        pyr = self._pyramid()
        sci = hard_threshold(pyr, 1.0)
        details = sci.coeffs.copy()
        details[:2, :2] = 0.0
        assert np.all((details == 0) | (np.abs(details) >= 1.0))

    def test_idempotent(self):
        pyr = self._pyramid()
        once = hard_threshold(pyr, 0.8)
        twice = hard_threshold(WaveletPyramid(once.coeffs), 0.8)
        assert np.array_equal(once.coeffs, twice.coeffs)

    def test_monotone_in_threshold(self):
        pyr = self._pyramid()
        counts = [hard_threshold(pyr, t).s for t in (0.0, 0.3, 0.7, 1.5, 3.0)]
        assert counts == sorted(counts, reverse=True)

    def test_negative_threshold(self):
        with pytest.raises(ValueError):
            hard_threshold(self._pyramid(), -0.1)


class TestIndicatorMap:
    def test_values(self):
        sci = SparseCoeffImage(np.array([[0.0, -3.0], [0.0, 0.2]]), threshold_used=0.1)
        assert indicator_map(sci).tolist() == [[0, 1], [0, 1]]
        assert sci.s == 2

    def test_all_zero(self):
        sci = SparseCoeffImage(np.zeros((4, 4)), threshold_used=1.0)
        assert not indicator_map(sci).any()
        assert sci.s == 0


class TestSparsify:
    def test_phantom_is_sparse(self):
        img = generate_phantom(shepp_logan_spec(64, 64, noise_sigma=0.02, seed=0))
        sci = sparsify(img)
        assert 0 < sci.s < img.n_pixels // 2
        assert sci.threshold_used == pytest.approx(universal_threshold(sci.sigma_hat, 4096))
        assert int(indicator_map(sci).sum()) == sci.s

    def test_explicit_threshold(self):
        img = generate_phantom(shepp_logan_spec(32, 32, noise_sigma=0.02, seed=0))
        assert sparsify(img, threshold=0.0).s == np.count_nonzero(dwt2(img).coeffs)

    def test_reconstruct_denoises(self):
        clean = generate_phantom(shepp_logan_spec(64, 64, noise_sigma=0.0))
        noisy = generate_phantom(shepp_logan_spec(64, 64, noise_sigma=0.05, seed=3))
        denoised = reconstruct(sparsify(noisy))
        err_noisy = np.mean((noisy.data - clean.data) ** 2)
        err_denoised = np.mean((denoised.data - clean.data) ** 2)
        assert err_denoised < err_noisy
