"""Piecewise-constant ellipse phantoms with additive Gaussian noise."""

from __future__ import annotations

import math

import numpy as np

from models import Ellipse, GrayImage, PhantomSpec

# Modified Shepp-Logan table: (intensity, a, b, x0, y0, phi_degrees) on [-1, 1]^2
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)

DEFAULT_NOISE_SIGMA = 0.02


def generate_phantom(spec: PhantomSpec) -> GrayImage:
    """Sum the intensities of all ellipses covering each pixel centre, add noise."""
    rows, cols = np.meshgrid(
        np.arange(spec.n1, dtype=np.float64),
        np.arange(spec.n2, dtype=np.float64),
        indexing="ij",
    )
    image = np.zeros((spec.n1, spec.n2))
    for e in spec.ellipses:
        dr = rows - e.center_row
        dc = cols - e.center_col
        cos_t, sin_t = math.cos(e.rotation), math.sin(e.rotation)
        u = dc * cos_t + dr * sin_t
        v = -dc * sin_t + dr * cos_t
        inside = (u / e.semi_a) ** 2 + (v / e.semi_b) ** 2 <= 1.0
        image[inside] += e.intensity

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return GrayImage(image)


def shepp_logan_spec(
    n1: int,
    n2: int,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    seed: int = 0,
) -> PhantomSpec:
    """The modified Shepp-Logan head scaled to fill an n1 x n2 lattice."""
    half_r, half_c = n1 / 2.0, n2 / 2.0
    mid_r, mid_c = (n1 - 1) / 2.0, (n2 - 1) / 2.0
    ellipses = tuple(
        Ellipse(
            center_row=mid_r - y0 * half_r,
            center_col=mid_c + x0 * half_c,
            semi_a=a * half_c,
            semi_b=b * half_r,
            rotation=math.radians(phi),
            intensity=intensity,
        )
        for intensity, a, b, x0, y0, phi in SHEPP_LOGAN
    )
    return PhantomSpec(n1=n1, n2=n2, ellipses=ellipses, noise_sigma=noise_sigma, seed=seed)
