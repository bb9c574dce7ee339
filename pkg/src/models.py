"""Data models for the sparsity estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ImageFormat(Enum):
    PGM = "pgm"
    CSV = "f64-matrix-csv"

    @classmethod
    def parse(cls, name: str) -> ImageFormat:
        """Accept the enum value, ``csv`` as a short alias, or a file suffix."""
        key = name.lower().lstrip(".")
        if key in ("csv", cls.CSV.value):
            return cls.CSV
        if key == cls.PGM.value:
            return cls.PGM
        raise InputError(f"Unknown image format: {name!r}")


class SigmaBand(Enum):
    POOLED = "pooled"
    DD1 = "dd1"


class SimMode(Enum):
    GENERATIVE = "generative"
    PIPELINE = "pipeline"


# ── Images ───────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class GrayImage:
    """A real-valued n1 x n2 pixel lattice (row-major)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"Image must be a non-empty 2D lattice, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("Image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n1(self) -> int:
        return self.data.shape[0]

    @property
    def n2(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.data.size


@dataclass(frozen=True)
class Ellipse:
    """One phantom ellipse in pixel coordinates.

    ``semi_a`` runs along the column axis and ``semi_b`` along the row axis
    before the rotation (radians) is applied.
    """

    center_row: float
    center_col: float
    semi_a: float
    semi_b: float
    rotation: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    n1: int
    n2: int
    ellipses: tuple[Ellipse, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n1 < 1 or self.n2 < 1:
            raise InputError(f"Phantom dimensions must be positive, got {self.n1}x{self.n2}")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise InputError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        if not 0 <= self.seed < 2**64:
            raise InputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        for e in self.ellipses:
            if not (e.semi_a > 0 and e.semi_b > 0):
                raise InputError(f"Ellipse semi-axes must be positive: {e}")
            if not math.isfinite(e.intensity):
                raise InputError(f"Ellipse intensity must be finite: {e}")


# ── Wavelet domain ───────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class WaveletPyramid:
    """In-place dyadic layout: A in the top-left corner, then per level
    DH top-right, DV bottom-left, DD bottom-right of the level's quadrant."""

    coeffs: np.ndarray
    levels: int = 3

    @property
    def n1(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n2(self) -> int:
        return self.coeffs.shape[1]

    def approx_shape(self) -> tuple[int, int]:
        return self.n1 >> self.levels, self.n2 >> self.levels

    def band(self, name: str, level: int) -> np.ndarray:
        """View of sub-band ``DH``/``DV``/``DD`` at ``level`` (1 = finest)."""
        h, w = self.n1 >> level, self.n2 >> level
        if name == "DH":
            return self.coeffs[:h, w:2 * w]
        if name == "DV":
            return self.coeffs[h:2 * h, :w]
        if name == "DD":
            return self.coeffs[h:2 * h, w:2 * w]
        raise ValueError(f"Unknown sub-band {name!r}")


@dataclass(frozen=True, eq=False)
class SparseCoeffImage:
    """Thresholded coefficient lattice x with its indicator field o."""

    coeffs: np.ndarray
    threshold_used: float
    levels: int = 3
    sigma_hat: float | None = None
    sigma_band: SigmaBand = SigmaBand.POOLED

    @property
    def indicator(self) -> np.ndarray:
        return (self.coeffs != 0).astype(np.int8)

    @property
    def s(self) -> int:
        return int(np.count_nonzero(self.coeffs))

    @property
    def n_pixels(self) -> int:
        return self.coeffs.size


# ── Spatial model ────────────────────────────────────────────────────

@dataclass(frozen=True)
class MaternParams:
    kappa: float
    sigma2: float
    nu: int = 1

    @property
    def range(self) -> float:
        """Distance at which the correlation is about 0.1."""
        return math.sqrt(8 * self.nu) / self.kappa

    @property
    def tau(self) -> float:
        """Precision scale giving marginal variance ``sigma2`` (nu = 1, d = 2)."""
        return 1.0 / (2.0 * self.kappa * math.sqrt(self.sigma2 * math.pi))


@dataclass(frozen=True)
class Hyperparams:
    kappa: float
    sigma2_m: float
    tau_iid: float

    def __post_init__(self) -> None:
        for name in ("kappa", "sigma2_m", "tau_iid"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InputError(f"Hyperparameter {name} must be positive and finite, got {value}")

    def matern(self) -> MaternParams:
        return MaternParams(kappa=self.kappa, sigma2=self.sigma2_m)

    def as_log(self) -> np.ndarray:
        return np.log([self.kappa, self.sigma2_m, self.tau_iid])

    @classmethod
    def from_log(cls, x) -> Hyperparams:
        kappa, sigma2_m, tau_iid = np.exp(np.asarray(x, dtype=np.float64))
        return cls(float(kappa), float(sigma2_m), float(tau_iid))

    def to_dict(self) -> dict[str, float]:
        return {"kappa": self.kappa, "sigma2_m": self.sigma2_m, "tau_iid": self.tau_iid}


@dataclass(frozen=True)
class PriorSpec:
    """Log-Gamma(a, b) priors on log(tau_iid), log(1/sigma2_m), log(range)."""

    tau_iid: tuple[float, float] = (1.0, 5e-5)
    prec_m: tuple[float, float] = (1.0, 5e-5)
    range: tuple[float, float] = (1.0, 1e-2)
    mu_precision: float = 1e-6
    mu_mean: float = 0.0

    def __post_init__(self) -> None:
        for name in ("tau_iid", "prec_m", "range"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise InputError(f"Log-Gamma parameters for {name} must be positive, got {(a, b)}")
        if self.mu_precision < 0:
            raise InputError(f"mu_precision must be >= 0, got {self.mu_precision}")

    def to_dict(self) -> dict:
        return {
            "tau_iid": list(self.tau_iid),
            "prec_m": list(self.prec_m),
            "range": list(self.range),
            "mu_precision": self.mu_precision,
            "mu_mean": self.mu_mean,
        }


@dataclass(frozen=True, eq=False)
class LatentState:
    """Joint latent (eta, m, mu); the unstructured effect is eta - mu - m."""

    eta: np.ndarray
    m: np.ndarray
    mu: float

    def pack(self) -> np.ndarray:
        return np.concatenate([self.eta, self.m, [self.mu]])

    @classmethod
    def unpack(cls, x: np.ndarray) -> LatentState:
        n = (x.size - 1) // 2
        return cls(eta=x[:n].copy(), m=x[n:2 * n].copy(), mu=float(x[-1]))

    @classmethod
    def zeros(cls, n: int) -> LatentState:
        return cls(eta=np.zeros(n), m=np.zeros(n), mu=0.0)


@dataclass(frozen=True, eq=False)
class LaplaceFit:
    theta_hat: Hyperparams
    mode: LatentState
    eta_mean: np.ndarray
    eta_var: np.ndarray
    log_marginal: float
    newton_iters: int
    grad_norm: float
    provenance: str = "fixed"
    n_evaluations: int = 1
    boundary_degenerate: bool = False
    seed: int = 0


@dataclass(frozen=True, eq=False)
class PosteriorP:
    p_mean: np.ndarray
    p_var: np.ndarray


# ── Estimator ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SparsityEstimate:
    value: float
    n_pixels: int
    source: str = ""


@dataclass(frozen=True, eq=False)
class BlockPartition:
    n1: int
    n2: int
    phi: int
    rho_star: int
    squares: tuple[np.ndarray, ...]
    borders: tuple[np.ndarray, ...]
    clipped: np.ndarray
    slack: np.ndarray

    @property
    def n_sq(self) -> int:
        return len(self.squares)

    @property
    def side(self) -> int:
        return 2 * self.phi + 1

    @property
    def full_border_size(self) -> int:
        return 2 * self.side * self.rho_star + self.rho_star ** 2


@dataclass(frozen=True, eq=False)
class BlockStats:
    s_k: np.ndarray  # replicates x squares, centred
    s_k_border: np.ndarray
    sigma2_k: np.ndarray
    r3_k: np.ndarray
    var_border_k: np.ndarray
    ratio_b1: float
    ratio_b2: float
    rate_b1: float
    rate_b2: float
    degenerate: np.ndarray
    used: np.ndarray


@dataclass(frozen=True, eq=False)
class NormalityReport:
    statistic: float
    p_value: float
    n: int
    standardized: np.ndarray
    test: str = "shapiro-wilk"


# ── Simulation ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class ReplicateResult:
    index: int
    seed: int
    s: int
    e_hat: float
    sum_p: float | None = None
    theta_hat: Hyperparams | None = None
    threshold: float | None = None
    newton_iters: int = 0
    degenerate: bool = False
    runtime: float = field(default=0.0, compare=False)
    p_mean: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=False)
class AggregateReport:
    n_replicates: int
    n_pixels: int
    e_sim: float
    mean_e_hat: float
    mean_s: float
    var_e_hat: float
    abs_diff_sim: np.ndarray  # |E_sim - E_I| * 100 / N per replicate
    abs_diff_sim_mean: float
    abs_diff_sim_min: float
    abs_diff_sim_max: float
    abs_diff_s_mean: float  # mean of |E_I - s_I| * 100 / N
    bias_percent: float  # |mean(E) - mean(s)| * 100 / N
    normality: NormalityReport | None = None
    qq: tuple[np.ndarray, np.ndarray] | None = None
    block_stats: BlockStats | None = None
    partition: BlockPartition | None = None
    variance_identity: tuple[float, float] | None = None
    baseline_s: tuple[int, ...] = ()


# ── Errors ───────────────────────────────────────────────────────────

class SparsityError(Exception):
    """Fatal error during sparsity estimation."""


class InputError(SparsityError):
    """Malformed input file, flag, config or invariant violation."""


class FactorizationError(SparsityError):
    """A Cholesky pivot was not strictly positive."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ConvergenceError(SparsityError):
    """Mode finding or hyperparameter search did not converge."""

    def __init__(self, message: str, grad_norm: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm
