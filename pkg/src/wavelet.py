"""Three-level orthonormal Haar transform, MAD noise estimate and hard thresholding.

Sub-band convention for one analysis step on the 2x2 block (a, b; c, d):
LL = (a+b+c+d)/2, DH = (a-b+c-d)/2, DV = (a+b-c-d)/2, DD = (a-b-c+d)/2.
PyWavelets names the column-difference band ``cV`` and the row-difference
band ``cH``; they are stored here as DH and DV respectively.
"""

from __future__ import annotations

import math

import numpy as np
import pywt

from image_io import check_dyadic
from models import GrayImage, SigmaBand, SparseCoeffImage, WaveletPyramid

WAVELET = "haar"
MODE = "periodization"
LEVELS = 3
MAD_SCALE = 0.6745


def dwt2(img: GrayImage, levels: int = LEVELS) -> WaveletPyramid:
    """Recursive separable Haar analysis of the approximation band."""
    check_dyadic(img.n1, img.n2, levels)
    out = np.empty_like(img.data)
    approx = img.data
    for level in range(1, levels + 1):
        c_a, (c_h, c_v, c_d) = pywt.dwt2(approx, WAVELET, mode=MODE)
        h, w = c_a.shape
        out[:h, :w] = c_a
        out[:h, w:2 * w] = c_v
        out[h:2 * h, :w] = c_h
        out[h:2 * h, w:2 * w] = c_d
        approx = c_a
    return WaveletPyramid(coeffs=out, levels=levels)


def idwt2(pyr: WaveletPyramid) -> GrayImage:
    h, w = pyr.approx_shape()
    approx = pyr.coeffs[:h, :w]
    for level in range(pyr.levels, 0, -1):
        bands = (pyr.band("DV", level), pyr.band("DH", level), pyr.band("DD", level))
        approx = pywt.idwt2((approx, bands), WAVELET, mode=MODE)
    return GrayImage(approx)


def estimate_noise_sigma(pyr: WaveletPyramid, sigma_band: SigmaBand = SigmaBand.POOLED) -> float:
    """median |level-1 detail| / 0.6745, over DH1+DV1+DD1 or DD1 alone."""
    if sigma_band == SigmaBand.DD1:
        details = pyr.band("DD", 1).ravel()
    else:
        details = np.concatenate([pyr.band(b, 1).ravel() for b in ("DH", "DV", "DD")])
    return float(np.median(np.abs(details))) / MAD_SCALE


def universal_threshold(sigma: float, n: int) -> float:
    if sigma < 0 or n < 2:
        raise ValueError(f"universal_threshold needs sigma >= 0 and N >= 2, got {sigma}, {n}")
    return sigma * math.sqrt(2.0 * math.log(n))


def hard_threshold(
    pyr: WaveletPyramid,
    threshold: float,
    sigma_hat: float | None = None,
    sigma_band: SigmaBand = SigmaBand.POOLED,
) -> SparseCoeffImage:
    """Zero detail coefficients with |c| < T; the approximation band is kept."""
    if not threshold >= 0:
        raise ValueError(f"Threshold must be >= 0, got {threshold}")
    keep = np.abs(pyr.coeffs) >= threshold
    h, w = pyr.approx_shape()
    keep[:h, :w] = True
    coeffs = np.where(keep, pyr.coeffs, 0.0)
    return SparseCoeffImage(
        coeffs=coeffs,
        threshold_used=float(threshold),
        levels=pyr.levels,
        sigma_hat=sigma_hat,
        sigma_band=sigma_band,
    )


def indicator_map(sci: SparseCoeffImage) -> np.ndarray:
    return sci.indicator


def sparsify(
    img: GrayImage,
    threshold: float | None = None,
    sigma_band: SigmaBand = SigmaBand.POOLED,
    levels: int = LEVELS,
) -> SparseCoeffImage:
    """dwt2 -> noise estimate -> universal threshold -> hard threshold.

    An explicit *threshold* bypasses the noise estimate.
    """
    pyr = dwt2(img, levels)
    sigma_hat = estimate_noise_sigma(pyr, sigma_band)
    if threshold is None:
        threshold = universal_threshold(sigma_hat, img.n_pixels)
    return hard_threshold(pyr, threshold, sigma_hat=sigma_hat, sigma_band=sigma_band)


def reconstruct(sci: SparseCoeffImage) -> GrayImage:
    """The denoised image: synthesis of the thresholded coefficients."""
    return idwt2(WaveletPyramid(coeffs=sci.coeffs, levels=sci.levels))
