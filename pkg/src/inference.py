"""Laplace-approximate posterior inference for the Bernoulli-logit spatial model.

Joint latent x = [eta (N), m (N), mu], packed in that order::

    o_i | eta_i      ~ Bernoulli(sigmoid(eta_i))
    eta | m, mu      ~ N(mu 1 + m, tau_iid^-1 I)
    m                ~ N(0, Q(kappa, sigma2_m)^-1)
    mu               ~ N(mu_mean, mu_precision^-1)

The eta block of the Hessian is diagonal, so eliminating it first creates
no fill. Factorizations keep eta first, order the m block by nested
dissection of the lattice and put mu last.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import expit, gammaln

from gmrf import CholFactor, build_precision, chol_factor, nested_dissection
from models import (
    ConvergenceError,
    Hyperparams,
    InputError,
    LaplaceFit,
    LatentState,
    PosteriorP,
    PriorSpec,
    SparsityError,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 40
N_SAMPLES = 200
GH_ORDER = 20

EB_MAX_EVALS = 100
EB_FATOL = 1e-3
EB_XATOL = 1e-2
EB_SIMPLEX_STEP = 0.5

MCMC_MAX_PIXELS = 400
MCMC_TUNE_EVERY = 100
MCMC_TARGET = (0.30, 0.50)
MCMC_WARN = (0.15, 0.70)


# ── Joint model ──────────────────────────────────────────────────────

class JointModel:
    """Negative log joint density of (o, eta, m, mu) at fixed hyperparameters.

    *precision* replaces the lattice Matérn precision, for fixtures that
    are not lattices (single pixels, decoupled pairs).
    """

    def __init__(
        self,
        o: np.ndarray,
        theta: Hyperparams,
        priors: PriorSpec | None = None,
        precision: sp.spmatrix | None = None,
    ):
        o = _check_indicator(o)
        self.shape = o.shape
        self.o = o.ravel().astype(np.float64)
        self.n = self.o.size
        self.theta = theta
        self.priors = priors or PriorSpec()
        if precision is None:
            precision = build_precision(theta.matern(), *self.shape)
        precision = sp.csr_matrix(precision, dtype=np.float64)
        if precision.shape != (self.n, self.n):
            raise InputError(f"Precision has shape {precision.shape}, expected {(self.n, self.n)}")
        self.q = precision
        lattice_order = nested_dissection(*self.shape)
        self.logdet_q = chol_factor(precision, lattice_order).logdet
        self.ordering = np.concatenate([np.arange(self.n), self.n + lattice_order, [2 * self.n]])
        self.tau = theta.tau_iid
        self.p_mu = self.priors.mu_precision

    def value(self, x: np.ndarray) -> float:
        eta, m, mu = self._split(x)
        r = eta - mu - m
        n = self.n
        loglik = float(np.sum(self.o * eta - np.logaddexp(0.0, eta)))
        log_eps = -0.5 * self.tau * float(r @ r) + 0.5 * n * math.log(self.tau) - 0.5 * n * LOG_2PI
        log_m = -0.5 * float(m @ (self.q @ m)) + 0.5 * self.logdet_q - 0.5 * n * LOG_2PI
        total = loglik + log_eps + log_m
        if self.p_mu > 0:
            d = mu - self.priors.mu_mean
            total += -0.5 * self.p_mu * d * d + 0.5 * math.log(self.p_mu) - 0.5 * LOG_2PI
        return -total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        eta, m, mu = self._split(x)
        r = eta - mu - m
        g_eta = -(self.o - expit(eta)) + self.tau * r
        g_m = -self.tau * r + self.q @ m
        g_mu = -self.tau * float(np.sum(r)) + self.p_mu * (mu - self.priors.mu_mean)
        return np.concatenate([g_eta, g_m, [g_mu]])

    def hessian(self, x: np.ndarray) -> sp.csc_matrix:
        eta = x[:self.n]
        p = expit(eta)
        n, tau = self.n, self.tau
        eye = sp.identity(n, format="csr")
        ones = np.ones((n, 1))
        h = sp.bmat(
            [
                [sp.diags(p * (1.0 - p) + tau), -tau * eye, sp.csr_matrix(-tau * ones)],
                [-tau * eye, self.q + tau * eye, sp.csr_matrix(tau * ones)],
                [sp.csr_matrix(-tau * ones.T), sp.csr_matrix(tau * ones.T),
                 sp.csr_matrix([[tau * n + self.p_mu]])],
            ],
            format="csc",
        )
        h.sum_duplicates()
        h.eliminate_zeros()
        h.sort_indices()
        return h

    def factor(self, x: np.ndarray) -> CholFactor:
        return chol_factor(self.hessian(x), self.ordering)

    def _split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        return x[:self.n], x[self.n:2 * self.n], float(x[-1])


def neg_log_joint(
    o: np.ndarray,
    state: LatentState,
    theta: Hyperparams,
    priors: PriorSpec | None = None,
    precision: sp.spmatrix | None = None,
    derivatives: bool = False,
):
    """Value, or ``(value, gradient, hessian)`` when *derivatives* is set."""
    model = JointModel(o, theta, priors, precision)
    x = state.pack()
    if not derivatives:
        return model.value(x)
    return model.value(x), model.gradient(x), model.hessian(x)


# ── Mode finding ─────────────────────────────────────────────────────

@dataclass(eq=False)
class ModeResult:
    state: LatentState
    iterations: int
    grad_norm: float
    objective: float
    trace: list[float] = field(default_factory=list)


def find_mode(
    model: JointModel,
    init: LatentState | None = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> ModeResult:
    """Damped Newton: full step, halved until the objective does not increase."""
    if not tol > 0:
        raise InputError(f"tol must be positive, got {tol}")
    x = (init or LatentState.zeros(model.n)).pack().astype(np.float64)
    if x.size != 2 * model.n + 1:
        raise InputError(f"Initial state has dimension {x.size}, expected {2 * model.n + 1}")
    f = model.value(x)
    g = model.gradient(x)
    trace = [f]

    for iteration in range(max_iter + 1):
        grad_norm = float(np.max(np.abs(g)))
        if grad_norm <= tol:
            return ModeResult(LatentState.unpack(x), iteration, grad_norm, f, trace)
        if iteration == max_iter:
            break

        step = -model.factor(x).solve(g)
        slack = 1e-12 * max(1.0, abs(f))
        t = 1.0
        for _ in range(MAX_HALVINGS):
            x_new = x + t * step
            f_new = model.value(x_new)
            if f_new <= f + slack:
                break
            t *= 0.5
        else:
            log.warning("Line search stalled at gradient norm %.3g", grad_norm)
            raise ConvergenceError(
                f"Newton line search stalled (gradient norm {grad_norm:.3g})", grad_norm=grad_norm
            )
        x, f = x_new, f_new
        g = model.gradient(x)
        trace.append(f)
        log.debug("newton %d: f=%.12g |g|=%.3g t=%.3g", iteration + 1, f, np.max(np.abs(g)), t)

    raise ConvergenceError(
        f"Newton did not converge in {max_iter} iterations (gradient norm {grad_norm:.3g})",
        grad_norm=grad_norm,
    )


def newton_map(
    o: np.ndarray,
    theta: Hyperparams,
    init: LatentState | None = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    priors: PriorSpec | None = None,
    precision: sp.spmatrix | None = None,
) -> LatentState:
    model = JointModel(o, theta, priors, precision)
    return find_mode(model, init, tol, max_iter).state


# ── Gaussian approximation ───────────────────────────────────────────

def sampled_variances(factor: CholFactor, n_samples: int, seed: int) -> np.ndarray:
    """Monte-Carlo diagonal of Q^-1 from exact zero-mean draws."""
    if n_samples < 2:
        raise InputError(f"n_samples must be at least 2, got {n_samples}")
    rng = np.random.default_rng(seed)
    draws = factor.solve_lt(rng.standard_normal((factor.n, n_samples)))
    return np.mean(draws * draws, axis=1)


def laplace_marginals(
    o: np.ndarray,
    theta: Hyperparams,
    mode: LatentState,
    n_samples: int = N_SAMPLES,
    seed: int = 0,
    priors: PriorSpec | None = None,
    precision: sp.spmatrix | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian eta marginals: mode plus :func:`mean_shift`, sampled variances."""
    model = JointModel(o, theta, priors, precision)
    x = mode.pack()
    factor = model.factor(x)
    eta_var = sampled_variances(factor, n_samples, seed)[:model.n]
    shift = mean_shift(model, factor, x, eta_var)
    return mode.eta + shift[:model.n], eta_var


def mean_shift(model: JointModel, factor: CholFactor, x: np.ndarray, eta_var: np.ndarray) -> np.ndarray:
    """First-order offset of the posterior mean from the mode x.

    -1/2 H^-1 (f''' * Var(eta)), with f''' the third derivative of
    log(1 + e^eta), the only non-quadratic term of the joint density.
    Without it sum(E p) exceeds s by about 1/2 sum(sigmoid'' Var(eta))
    when most p are below 1/2; with it the sum matches s to second order.
    """
    p = expit(x[:model.n])
    rhs = np.zeros(x.size)
    rhs[:model.n] = p * (1.0 - p) * (1.0 - 2.0 * p) * eta_var
    return -0.5 * factor.solve(rhs)


def posterior_p_means(eta_mean: np.ndarray, eta_var: np.ndarray, order: int = GH_ORDER) -> PosteriorP:
    """E and Var of sigmoid(eta) under N(eta_mean, eta_var) by Gauss-Hermite."""
    eta_mean = np.asarray(eta_mean, dtype=np.float64)
    eta_var = np.asarray(eta_var, dtype=np.float64)
    if np.any(eta_var < 0):
        raise InputError("eta_var must be non-negative")
    nodes, weights = hermgauss(order)
    weights = weights / math.sqrt(math.pi)
    x = eta_mean[..., None] + np.sqrt(2.0 * eta_var)[..., None] * nodes
    s = expit(x)
    mean = s @ weights
    var = np.maximum((s * s) @ weights - mean * mean, 0.0)
    eps = np.finfo(np.float64)
    mean = np.clip(mean, eps.tiny, 1.0 - eps.epsneg)
    return PosteriorP(p_mean=mean, p_var=np.minimum(var, 0.25))


# ── Marginal likelihood and hyperparameters ──────────────────────────

def log_gamma_density(x: float, a: float, b: float) -> float:
    """Density of log(Y), Y ~ Gamma(shape a, rate b), at x."""
    return a * math.log(b) - gammaln(a) + a * x - b * math.exp(x)


def log_prior(theta: Hyperparams, priors: PriorSpec) -> float:
    log_range = math.log(theta.matern().range)
    return (
        log_gamma_density(math.log(theta.tau_iid), *priors.tau_iid)
        + log_gamma_density(-math.log(theta.sigma2_m), *priors.prec_m)
        + log_gamma_density(log_range, *priors.range)
    )


def _laplace_log_marginal(model: JointModel, mode: ModeResult) -> tuple[float, CholFactor]:
    factor = model.factor(mode.state.pack())
    dim = 2 * model.n + 1
    value = -mode.objective + 0.5 * dim * LOG_2PI - 0.5 * factor.logdet
    return value, factor


def log_marginal(
    o: np.ndarray,
    theta: Hyperparams,
    priors: PriorSpec | None = None,
    precision: sp.spmatrix | None = None,
    init: LatentState | None = None,
    include_prior: bool = True,
) -> float:
    """Laplace approximation of log p(o | theta), plus log prior(theta)."""
    priors = priors or PriorSpec()
    model = JointModel(o, theta, priors, precision)
    value, _ = _laplace_log_marginal(model, find_mode(model, init))
    if include_prior:
        value += log_prior(theta, priors)
    return value


def fit_laplace(
    o: np.ndarray,
    theta: Hyperparams,
    priors: PriorSpec | None = None,
    n_samples: int = N_SAMPLES,
    seed: int = 0,
    precision: sp.spmatrix | None = None,
    init: LatentState | None = None,
    provenance: str = "fixed",
    n_evaluations: int = 1,
) -> LaplaceFit:
    """Mode, eta marginals and log marginal at fixed hyperparameters."""
    priors = priors or PriorSpec()
    model = JointModel(o, theta, priors, precision)
    mode = find_mode(model, init)
    value, factor = _laplace_log_marginal(model, mode)
    x = mode.state.pack()
    eta_var = sampled_variances(factor, n_samples, seed)[:model.n]
    eta_mean = mode.state.eta + mean_shift(model, factor, x, eta_var)[:model.n]

    degenerate = bool(np.all(model.o == 1) or np.all(model.o == 0))
    if degenerate:
        log.warning("Indicator field is constant; fit is boundary-degenerate")

    return LaplaceFit(
        theta_hat=theta,
        mode=mode.state,
        eta_mean=eta_mean,
        eta_var=eta_var,
        log_marginal=value + log_prior(theta, priors),
        newton_iters=mode.iterations,
        grad_norm=mode.grad_norm,
        provenance=provenance,
        n_evaluations=n_evaluations,
        boundary_degenerate=degenerate,
        seed=seed,
    )


def default_search_box(n1: int, n2: int) -> tuple[tuple[float, float], ...]:
    """(low, high) bounds for kappa, sigma2_m, tau_iid."""
    return (
        (math.sqrt(8.0) / (2.0 * max(n1, n2)), math.sqrt(8.0)),
        (1e-2, 1e2),
        (1e-1, 1e3),
    )


def default_start(n1: int) -> Hyperparams:
    """Range n1/4, unit marginal variance, tau_iid = 10."""
    return Hyperparams(kappa=math.sqrt(8.0) / (n1 / 4.0), sigma2_m=1.0, tau_iid=10.0)


def fit_empirical_bayes(
    o: np.ndarray,
    priors: PriorSpec | None = None,
    search_box: tuple[tuple[float, float], ...] | None = None,
    start: Hyperparams | None = None,
    n_samples: int = N_SAMPLES,
    seed: int = 0,
    max_evals: int = EB_MAX_EVALS,
) -> LaplaceFit:
    """theta_hat = argmax of the Laplace log marginal plus log prior.

    Nelder-Mead on (log kappa, log sigma2_m, log tau_iid) inside the box;
    each evaluation warm-starts Newton from the previous mode.
    """
    o = _check_indicator(o)
    priors = priors or PriorSpec()
    n1, n2 = o.shape
    box = search_box or default_search_box(n1, n2)
    for low, high in box:
        if not 0 < low <= high:
            raise InputError(f"Search box bounds must be positive and ordered, got {(low, high)}")
    log_box = np.log(np.asarray(box, dtype=np.float64))
    x0 = np.clip((start or default_start(n1)).as_log(), log_box[:, 0], log_box[:, 1])

    warm: dict[str, LatentState | None] = {"mode": None}
    counts = {"evals": 0, "failed": 0}

    def objective(z: np.ndarray) -> float:
        counts["evals"] += 1
        theta = Hyperparams.from_log(np.clip(z, log_box[:, 0], log_box[:, 1]))
        try:
            model = JointModel(o, theta, priors)
            mode = find_mode(model, warm["mode"])
            value, _ = _laplace_log_marginal(model, mode)
        except SparsityError as e:
            counts["failed"] += 1
            log.warning("Evaluation at %s failed: %s", theta.to_dict(), e)
            return math.inf
        warm["mode"] = mode.state
        return -(value + log_prior(theta, priors))

    simplex = [x0]
    for i in range(3):
        vertex = x0.copy()
        vertex[i] += EB_SIMPLEX_STEP
        if vertex[i] > log_box[i, 1]:
            vertex[i] = x0[i] - EB_SIMPLEX_STEP
        simplex.append(np.clip(vertex, log_box[:, 0], log_box[:, 1]))

    result = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=log_box,
        options={
            "maxfev": max_evals,
            "fatol": EB_FATOL,
            "xatol": EB_XATOL,
            "initial_simplex": np.array(simplex),
        },
    )
    if counts["failed"] == counts["evals"] or not np.isfinite(result.fun):
        raise ConvergenceError(f"All {counts['evals']} hyperparameter evaluations failed")

    theta_hat = Hyperparams.from_log(np.clip(result.x, log_box[:, 0], log_box[:, 1]))
    log.info("Empirical Bayes: %s after %d evaluations", theta_hat.to_dict(), counts["evals"])
    return fit_laplace(
        o, theta_hat, priors, n_samples=n_samples, seed=seed, init=warm["mode"],
        provenance="empirical-bayes", n_evaluations=counts["evals"],
    )


def integrate_theta_grid(
    o: np.ndarray,
    fit: LaplaceFit,
    priors: PriorSpec | None = None,
    k: int = 3,
    step: float = 0.25,
    order: int = GH_ORDER,
    n_samples: int = N_SAMPLES,
) -> PosteriorP:
    """Mix posterior p moments over a k^3 log-scale grid around theta_hat.

    Grid points are weighted by exp(log marginal); failed points are skipped.
    """
    if k < 1:
        raise InputError(f"Grid size k must be at least 1, got {k}")
    priors = priors or PriorSpec()
    centre = fit.theta_hat.as_log()
    offsets = (np.arange(k) - (k - 1) / 2.0) * step

    log_weights, moments = [], []
    for delta in itertools.product(offsets, repeat=3):
        theta = Hyperparams.from_log(centre + np.array(delta))
        try:
            point = fit_laplace(o, theta, priors, n_samples=n_samples, seed=fit.seed, init=fit.mode)
        except SparsityError as e:
            log.warning("Grid point %s skipped: %s", theta.to_dict(), e)
            continue
        log_weights.append(point.log_marginal)
        moments.append(posterior_p_means(point.eta_mean, point.eta_var, order))
    if not moments:
        raise ConvergenceError("Every hyperparameter grid point failed")

    lw = np.asarray(log_weights)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    mean = sum(wi * m.p_mean for wi, m in zip(w, moments))
    second = sum(wi * (m.p_var + m.p_mean ** 2) for wi, m in zip(w, moments))
    return PosteriorP(p_mean=mean, p_var=np.clip(second - mean ** 2, 0.0, 0.25))


# ── MCMC oracle ──────────────────────────────────────────────────────

def greedy_colouring(q: sp.spmatrix) -> np.ndarray:
    """Colour classes such that no two sites of one class interact through Q."""
    q = sp.csr_matrix(q)
    n = q.shape[0]
    colours = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        nbrs = q.indices[q.indptr[i]:q.indptr[i + 1]]
        used = {int(colours[j]) for j in nbrs if j != i and colours[j] >= 0}
        c = 0
        while c in used:
            c += 1
        colours[i] = c
    return colours


def mcmc_oracle(
    o: np.ndarray,
    theta: Hyperparams,
    n_iter: int,
    burn_in: int,
    seed: int,
    priors: PriorSpec | None = None,
    precision: sp.spmatrix | None = None,
) -> PosteriorP:
    """Metropolis-within-Gibbs with Gaussian random-walk proposals.

    One sweep updates every eta_i, every m_i (colour class by colour
    class, which keeps single-site updates within a class independent)
    and mu. Proposal scales are tuned per site during *burn_in* sweeps;
    the *n_iter* sweeps that follow are averaged.
    """
    model = JointModel(o, theta, priors, precision)
    n = model.n
    if n > MCMC_MAX_PIXELS:
        raise InputError(f"mcmc_oracle is limited to {MCMC_MAX_PIXELS} pixels, got {n}")
    if n_iter < 1 or burn_in < 0:
        raise InputError("n_iter must be positive and burn_in non-negative")

    rng = np.random.default_rng(seed)
    o_vec, tau, p_mu = model.o, model.tau, model.p_mu
    mu_mean = model.priors.mu_mean
    q = model.q
    q_diag = q.diagonal()
    colours = greedy_colouring(q)
    classes = [np.flatnonzero(colours == c) for c in range(colours.max() + 1)]

    eta = np.zeros(n)
    m = np.zeros(n)
    mu = 0.0
    qm = q @ m
    scale_eta = np.full(n, 1.0 / math.sqrt(tau + 0.25))
    scale_m = 1.0 / np.sqrt(q_diag + tau)
    scale_mu = 1.0 / math.sqrt(tau * n + p_mu)

    acc_eta = np.zeros(n)
    acc_m = np.zeros(n)
    acc_mu = 0.0
    sum_p = np.zeros(n)
    sum_p2 = np.zeros(n)

    def log_eta(e: np.ndarray) -> np.ndarray:
        return o_vec * e - np.logaddexp(0.0, e) - 0.5 * tau * (e - mu - m) ** 2

    for sweep in range(burn_in + n_iter):
        prop = eta + scale_eta * rng.standard_normal(n)
        accept = np.log(rng.random(n)) < log_eta(prop) - log_eta(eta)
        eta = np.where(accept, prop, eta)
        acc_eta += accept

        for idx in classes:
            cur = m[idx]
            new = cur + scale_m[idx] * rng.standard_normal(idx.size)
            off = qm[idx] - q_diag[idx] * cur
            resid = eta[idx] - mu
            delta = (
                -0.5 * q_diag[idx] * (new * new - cur * cur)
                - (new - cur) * off
                - 0.5 * tau * ((resid - new) ** 2 - (resid - cur) ** 2)
            )
            accept = np.log(rng.random(idx.size)) < delta
            if accept.any():
                changed = idx[accept]
                step = np.zeros(n)
                step[changed] = new[accept] - cur[accept]
                m[changed] = new[accept]
                qm += q @ step
            acc_m[idx] += accept

        mu_new = mu + scale_mu * rng.standard_normal()
        r_old = eta - m - mu
        r_new = eta - m - mu_new
        delta = -0.5 * tau * (float(r_new @ r_new) - float(r_old @ r_old))
        delta -= 0.5 * p_mu * ((mu_new - mu_mean) ** 2 - (mu - mu_mean) ** 2)
        if math.log(rng.random()) < delta:
            mu = mu_new
            acc_mu += 1

        if sweep < burn_in:
            if (sweep + 1) % MCMC_TUNE_EVERY == 0:
                scale_eta = _tune(scale_eta, acc_eta / MCMC_TUNE_EVERY)
                scale_m = _tune(scale_m, acc_m / MCMC_TUNE_EVERY)
                scale_mu = float(_tune(np.array([scale_mu]), np.array([acc_mu / MCMC_TUNE_EVERY]))[0])
                acc_eta[:] = 0
                acc_m[:] = 0
                acc_mu = 0.0
            if sweep + 1 == burn_in:
                acc_eta[:] = 0
                acc_m[:] = 0
                acc_mu = 0.0
            continue

        p = expit(eta)
        sum_p += p
        sum_p2 += p * p

    for name, rate in (
        ("eta", float(acc_eta.mean()) / n_iter),
        ("m", float(acc_m.mean()) / n_iter),
        ("mu", acc_mu / n_iter),
    ):
        if not MCMC_WARN[0] <= rate <= MCMC_WARN[1]:
            log.warning("MCMC acceptance rate for %s is %.2f", name, rate)

    mean = sum_p / n_iter
    var = np.clip(sum_p2 / n_iter - mean ** 2, 0.0, 0.25)
    eps = np.finfo(np.float64)
    return PosteriorP(p_mean=np.clip(mean, eps.tiny, 1.0 - eps.epsneg), p_var=var)


def _tune(scale: np.ndarray, rate: np.ndarray) -> np.ndarray:
    low, high = MCMC_TARGET
    factor = np.where(rate < low, 0.8, np.where(rate > high, 1.25, 1.0))
    return scale * factor


def _check_indicator(o: np.ndarray) -> np.ndarray:
    o = np.asarray(o)
    if o.ndim == 1:
        o = o.reshape(-1, 1)
    if o.ndim != 2 or o.size == 0:
        raise InputError(f"Indicator field must be a non-empty 2D lattice, got shape {o.shape}")
    if not np.all((o == 0) | (o == 1)):
        raise InputError("Indicator field must contain only 0 and 1")
    return o.astype(np.int8)
