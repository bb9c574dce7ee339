"""Seeded replicate studies: generative-model and phantom-pipeline runs.

Replicate k uses seed ``base_seed + k`` for every random draw it makes, so
results do not depend on execution order or worker count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from block_diagnostics import DEFAULT_RHO_STAR, block_partition, block_stats, phi_schedule
from estimator import (
    abs_diff_percent,
    ensemble_variance_identity,
    estimate_expected_sparsity,
    normality_test,
    qq_points,
    sample_mean_sparsity,
)
from gmrf import build_precision, chol_factor, sample_field
from image_io import check_dyadic
from inference import N_SAMPLES, fit_empirical_bayes, fit_laplace, posterior_p_means
from models import (
    AggregateReport,
    Hyperparams,
    InputError,
    PriorSpec,
    ReplicateResult,
    SigmaBand,
    SimMode,
)
from phantom import DEFAULT_NOISE_SIGMA, generate_phantom, shepp_logan_spec
from wavelet import LEVELS, sparsify

log = logging.getLogger(__name__)

DEFAULT_MU = -1.0

REPLICATES_CSV = "replicates.csv"
REPORT_JSON = "report.json"
QQ_CSV = "qq_points.csv"
BLOCK_CSV = "block_stats.csv"
FIELDS_NPY = "p_mean_fields.npy"
REPORT_XLSX = "report.xlsx"

CSV_FLOAT = "%.17g"

REQUIRED_FIELDS = ("mode", "n1", "n2", "replicates", "base_seed", "theta")


@dataclass(frozen=True)
class SimConfig:
    """One replicate study. ``theta=None`` means empirical Bayes per replicate.

    Generative mode draws data at ``true_theta`` (defaults to ``theta``).
    """

    mode: SimMode
    n1: int
    n2: int
    replicates: int
    base_seed: int
    theta: Hyperparams | None
    true_theta: Hyperparams | None = None
    mu: float = DEFAULT_MU
    priors: PriorSpec = field(default_factory=PriorSpec)
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    threshold: float | None = None
    sigma_band: SigmaBand = SigmaBand.POOLED
    phi: int | None = None
    rho_star: int = DEFAULT_RHO_STAR
    output_dir: str = "sim_out"
    workers: int = 1
    n_samples: int = N_SAMPLES
    baseline_replicates: int = 0
    normality: str = "shapiro-wilk"
    xlsx: bool = False

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise InputError(f"replicates must be >= 1, got {self.replicates}")
        if self.n1 < 5 or self.n2 < 5:
            raise InputError(f"Lattice must be at least 5x5, got {self.n1}x{self.n2}")
        if self.mode == SimMode.PIPELINE:
            check_dyadic(self.n1, self.n2, LEVELS)
        if self.mode == SimMode.GENERATIVE and self.generating_theta is None:
            raise InputError("Generative mode with theta 'fit' needs 'true_theta'")
        if self.workers < 1:
            raise InputError(f"workers must be >= 1, got {self.workers}")
        if self.baseline_replicates < 0:
            raise InputError("baseline_replicates must be >= 0")
        if not 0 <= self.base_seed < 2**63 - self.replicates - self.baseline_replicates:
            raise InputError(f"base_seed out of range: {self.base_seed}")

    @property
    def generating_theta(self) -> Hyperparams | None:
        return self.true_theta or self.theta

    @property
    def n_pixels(self) -> int:
        return self.n1 * self.n2

    @classmethod
    def from_dict(cls, raw: dict) -> SimConfig:
        missing = [name for name in REQUIRED_FIELDS if name not in raw]
        if missing:
            raise InputError(f"Config is missing required field(s): {', '.join(missing)}")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InputError(f"Unknown config field(s): {', '.join(unknown)}")
        try:
            kwargs = dict(raw)
            kwargs["mode"] = SimMode(raw["mode"])
            kwargs["theta"] = _parse_theta(raw["theta"], "theta")
            if raw.get("true_theta") is not None:
                kwargs["true_theta"] = _parse_theta(raw["true_theta"], "true_theta")
            if "priors" in raw:
                kwargs["priors"] = _parse_priors(raw["priors"])
            if "sigma_band" in raw:
                kwargs["sigma_band"] = SigmaBand(raw["sigma_band"])
            for name in ("n1", "n2", "replicates", "base_seed", "rho_star", "workers",
                         "n_samples", "baseline_replicates"):
                if name in kwargs:
                    kwargs[name] = _as_int(kwargs[name], name)
            if kwargs.get("phi") is not None:
                kwargs["phi"] = _as_int(kwargs["phi"], "phi")
        except ValueError as e:
            raise InputError(f"Invalid config value: {e}") from e
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "n1": self.n1,
            "n2": self.n2,
            "replicates": self.replicates,
            "base_seed": self.base_seed,
            "theta": self.theta.to_dict() if self.theta else "fit",
            "true_theta": self.true_theta.to_dict() if self.true_theta else None,
            "mu": self.mu,
            "priors": self.priors.to_dict(),
            "noise_sigma": self.noise_sigma,
            "threshold": self.threshold,
            "sigma_band": self.sigma_band.value,
            "phi": self.phi,
            "rho_star": self.rho_star,
            "n_samples": self.n_samples,
            "baseline_replicates": self.baseline_replicates,
            "normality": self.normality,
        }


def load_sim_config(path: str | Path) -> SimConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"Malformed config JSON {path}: {e}") from e
    if not isinstance(raw, dict):
        raise InputError(f"Config {path} must hold a JSON object")
    return SimConfig.from_dict(raw)


# ── Replicates ───────────────────────────────────────────────────────

def simulate_indicator(cfg: SimConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw (o, p) from the generative model at the configured truth."""
    theta = cfg.generating_theta
    rng = np.random.default_rng(seed)
    factor = chol_factor(build_precision(theta.matern(), cfg.n1, cfg.n2))
    m = sample_field(factor, rng)
    eps = rng.normal(0.0, 1.0 / math.sqrt(theta.tau_iid), size=cfg.n_pixels)
    p = expit(cfg.mu + m + eps)
    o = (rng.random(cfg.n_pixels) < p).astype(np.int8)
    return o.reshape(cfg.n1, cfg.n2), p


def sparsify_phantom(cfg: SimConfig, seed: int):
    spec = shepp_logan_spec(cfg.n1, cfg.n2, noise_sigma=cfg.noise_sigma, seed=seed)
    return sparsify(generate_phantom(spec), cfg.threshold, cfg.sigma_band)


def run_replicate(cfg: SimConfig, index: int) -> ReplicateResult:
    seed = cfg.base_seed + index
    t0 = time.perf_counter()
    sum_p = threshold = None
    if cfg.mode == SimMode.GENERATIVE:
        o, p = simulate_indicator(cfg, seed)
        sum_p = math.fsum(p)
    else:
        sci = sparsify_phantom(cfg, seed)
        o, threshold = sci.indicator, sci.threshold_used

    if cfg.theta is None:
        fit = fit_empirical_bayes(o, cfg.priors, n_samples=cfg.n_samples, seed=seed)
    else:
        fit = fit_laplace(o, cfg.theta, cfg.priors, n_samples=cfg.n_samples, seed=seed)
    post = posterior_p_means(fit.eta_mean, fit.eta_var)
    estimate = estimate_expected_sparsity(post, source=f"replicate {index}")

    return ReplicateResult(
        index=index,
        seed=seed,
        s=int(o.sum()),
        e_hat=estimate.value,
        sum_p=sum_p,
        theta_hat=fit.theta_hat,
        threshold=threshold,
        newton_iters=fit.newton_iters,
        degenerate=fit.boundary_degenerate,
        runtime=time.perf_counter() - t0,
        p_mean=post.p_mean,
    )


def baseline_sparsity(cfg: SimConfig, index: int) -> int:
    """Sparsity of an extra replicate that is drawn but not fitted."""
    seed = cfg.base_seed + cfg.replicates + index
    if cfg.mode == SimMode.GENERATIVE:
        return int(simulate_indicator(cfg, seed)[0].sum())
    return sparsify_phantom(cfg, seed).s


def _replicate_job(args: tuple[SimConfig, int]) -> ReplicateResult:
    return run_replicate(*args)


def _baseline_job(args: tuple[SimConfig, int]) -> int:
    return baseline_sparsity(*args)


def _map(fn, jobs: list, workers: int, desc: str) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(fn, jobs), total=len(jobs), desc=desc, leave=False))
    return [fn(job) for job in tqdm(jobs, desc=desc, leave=False)]


def run_generative(cfg: SimConfig) -> list[ReplicateResult]:
    if cfg.mode != SimMode.GENERATIVE:
        raise InputError("run_generative needs mode 'generative'")
    return _map(_replicate_job, [(cfg, k) for k in range(cfg.replicates)], cfg.workers, "replicates")


def run_pipeline(cfg: SimConfig) -> list[ReplicateResult]:
    if cfg.mode != SimMode.PIPELINE:
        raise InputError("run_pipeline needs mode 'pipeline'")
    return _map(_replicate_job, [(cfg, k) for k in range(cfg.replicates)], cfg.workers, "replicates")


def run(cfg: SimConfig, write: bool = True) -> AggregateReport:
    """Run every replicate, aggregate and (optionally) write the output directory."""
    log.info("Running %d %s replicates at %dx%d", cfg.replicates, cfg.mode.value, cfg.n1, cfg.n2)
    t0 = time.perf_counter()
    runner = run_generative if cfg.mode == SimMode.GENERATIVE else run_pipeline
    results = runner(cfg)
    baseline = tuple(_map(
        _baseline_job, [(cfg, j) for j in range(cfg.baseline_replicates)], cfg.workers, "baseline"
    ))
    fields = np.vstack([r.p_mean for r in results])
    report = aggregate(
        results, cfg.n1, cfg.n2, baseline_s=baseline, p_fields=fields,
        phi=cfg.phi, rho_star=cfg.rho_star, normality=cfg.normality,
    )
    log.info("Finished %d replicates in %.1fs", cfg.replicates, time.perf_counter() - t0)
    if write:
        write_outputs(report, results, fields, cfg.output_dir, cfg.to_dict(), xlsx=cfg.xlsx)
    return report


# ── Aggregation ──────────────────────────────────────────────────────

def aggregate(
    results: list[ReplicateResult],
    n1: int,
    n2: int,
    baseline_s: tuple[int, ...] = (),
    p_fields: np.ndarray | None = None,
    phi: int | None = None,
    rho_star: int = DEFAULT_RHO_STAR,
    normality: str = "shapiro-wilk",
) -> AggregateReport:
    """Deterministic fold over replicates in index order."""
    if not results:
        raise InputError("Cannot aggregate an empty replicate list")
    results = sorted(results, key=lambda r: r.index)
    n = n1 * n2
    e_hats = np.array([r.e_hat for r in results])
    s_values = [r.s for r in results]

    e_sim = sample_mean_sparsity(s_values + list(baseline_s))
    mean_e = math.fsum(e_hats) / e_hats.size
    mean_s = sample_mean_sparsity(s_values)
    abs_diff_sim = np.array([abs_diff_percent(e_sim, e, n) for e in e_hats])
    abs_diff_s = [abs_diff_percent(r.e_hat, r.s, n) for r in results]

    norm_report = qq = None
    if e_hats.size >= 3 and np.ptp(e_hats) > 0:
        try:
            norm_report = normality_test(e_hats, normality)
            qq = qq_points(norm_report.standardized)
        except InputError as e:
            log.warning("Normality test skipped: %s", e)

    stats = partition = identity = None
    if p_fields is not None and len(results) >= 2:
        if phi is None:
            phi = phi_schedule(n1, n2, rho_star)
        partition = block_partition(n1, n2, phi, rho_star)
        stats = block_stats(partition, p_fields)
        identity = ensemble_variance_identity(p_fields)

    return AggregateReport(
        n_replicates=len(results),
        n_pixels=n,
        e_sim=e_sim,
        mean_e_hat=mean_e,
        mean_s=mean_s,
        var_e_hat=float(np.var(e_hats, ddof=1)) if e_hats.size > 1 else 0.0,
        abs_diff_sim=abs_diff_sim,
        abs_diff_sim_mean=float(abs_diff_sim.mean()),
        abs_diff_sim_min=float(abs_diff_sim.min()),
        abs_diff_sim_max=float(abs_diff_sim.max()),
        abs_diff_s_mean=math.fsum(abs_diff_s) / len(abs_diff_s),
        bias_percent=abs_diff_percent(mean_e, mean_s, n),
        normality=norm_report,
        qq=qq,
        block_stats=stats,
        partition=partition,
        variance_identity=identity,
        baseline_s=tuple(int(s) for s in baseline_s),
    )


# ── Output directory ─────────────────────────────────────────────────

def replicate_table(results: list[ReplicateResult], n_pixels: int) -> pd.DataFrame:
    rows = []
    for r in sorted(results, key=lambda r: r.index):
        theta = r.theta_hat.to_dict() if r.theta_hat else {}
        rows.append({
            "index": r.index,
            "seed": r.seed,
            "s": r.s,
            "e_hat": r.e_hat,
            "sum_p": r.sum_p,
            "kappa": theta.get("kappa"),
            "sigma2_m": theta.get("sigma2_m"),
            "tau_iid": theta.get("tau_iid"),
            "threshold": r.threshold,
            "newton_iters": r.newton_iters,
            "degenerate": r.degenerate,
            "abs_diff_percent": abs_diff_percent(r.e_hat, r.s, n_pixels),
        })
    return pd.DataFrame(rows)


def block_table(report: AggregateReport) -> pd.DataFrame:
    stats, part = report.block_stats, report.partition
    if stats is None or part is None:
        return pd.DataFrame(columns=["square", "row0", "col0", "clipped", "used", "degenerate",
                                     "sigma2", "r3", "var_border"])
    return pd.DataFrame({
        "square": np.arange(part.n_sq),
        "row0": [int(sq[0]) // part.n2 for sq in part.squares],
        "col0": [int(sq[0]) % part.n2 for sq in part.squares],
        "clipped": part.clipped,
        "used": stats.used,
        "degenerate": stats.degenerate,
        "sigma2": stats.sigma2_k,
        "r3": stats.r3_k,
        "var_border": stats.var_border_k,
    })


def report_dict(report: AggregateReport, config: dict) -> dict:
    out = {
        "n_replicates": report.n_replicates,
        "n_pixels": report.n_pixels,
        "e_sim": report.e_sim,
        "mean_e_hat": report.mean_e_hat,
        "mean_s": report.mean_s,
        "var_e_hat": report.var_e_hat,
        "abs_diff_sim_percent": {
            "mean": report.abs_diff_sim_mean,
            "min": report.abs_diff_sim_min,
            "max": report.abs_diff_sim_max,
        },
        "abs_diff_s_percent_mean": report.abs_diff_s_mean,
        "bias_percent": report.bias_percent,
        "normality": None,
        "block_stats": None,
        "variance_identity": None,
        "baseline_s": list(report.baseline_s),
        "config": config,
    }
    if report.normality is not None:
        out["normality"] = {
            "test": report.normality.test,
            "statistic": report.normality.statistic,
            "p_value": report.normality.p_value,
            "n": report.normality.n,
        }
    if report.block_stats is not None:
        stats, part = report.block_stats, report.partition
        out["block_stats"] = {
            "phi": part.phi,
            "rho_star": part.rho_star,
            "n_sq": part.n_sq,
            "n_used": int(stats.used.sum()),
            "n_degenerate": int(stats.degenerate.sum()),
            "n_slack": int(part.slack.size),
            "ratio_b1": _finite_or_none(stats.ratio_b1),
            "ratio_b2": _finite_or_none(stats.ratio_b2),
            "rate_b1": stats.rate_b1,
            "rate_b2": stats.rate_b2,
        }
    if report.variance_identity is not None:
        lhs, rhs = report.variance_identity
        out["variance_identity"] = {"lhs": lhs, "rhs": rhs}
    return out


def write_outputs(
    report: AggregateReport,
    results: list[ReplicateResult],
    p_fields: np.ndarray | None,
    output_dir: str | Path,
    config: dict,
    xlsx: bool = False,
) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    replicate_table(results, report.n_pixels).to_csv(
        out / REPLICATES_CSV, index=False, float_format=CSV_FLOAT
    )
    theoretical, sample = report.qq if report.qq is not None else (np.empty(0), np.empty(0))
    pd.DataFrame({"theoretical": theoretical, "sample": sample}).to_csv(
        out / QQ_CSV, index=False, float_format=CSV_FLOAT
    )
    block_table(report).to_csv(out / BLOCK_CSV, index=False, float_format=CSV_FLOAT)
    if p_fields is not None:
        np.save(out / FIELDS_NPY, np.asarray(p_fields, dtype=np.float64))
    (out / REPORT_JSON).write_text(json.dumps(report_dict(report, config), indent=2) + "\n")

    if xlsx:
        from report_xlsx import write_report_xlsx
        write_report_xlsx(report, results, str(out / REPORT_XLSX))
    log.info("Wrote results to %s", out)
    return out


def diagnose_directory(
    directory: str | Path,
    phi: int | None = None,
    rho_star: int | None = None,
    normality: str | None = None,
    xlsx: bool = False,
) -> AggregateReport:
    """Recompute the aggregate report from a simulate output directory."""
    directory = Path(directory)
    report_path, csv_path = directory / REPORT_JSON, directory / REPLICATES_CSV
    for path in (report_path, csv_path):
        if not path.exists():
            raise InputError(f"{directory} is not a simulation output directory (missing {path.name})")
    try:
        meta = json.loads(report_path.read_text())
        config = meta["config"]
        n1, n2 = int(config["n1"]), int(config["n2"])
        table = pd.read_csv(csv_path, float_precision="round_trip")
    except (json.JSONDecodeError, KeyError, ValueError, pd.errors.ParserError) as e:
        raise InputError(f"Malformed simulation output in {directory}: {e}") from e

    try:
        results = [_result_from_row(row) for row in table.to_dict("records")]
    except (KeyError, ValueError, TypeError) as e:
        raise InputError(f"Malformed {csv_path.name}: {e}") from e

    fields = None
    fields_path = directory / FIELDS_NPY
    if fields_path.exists():
        fields = np.load(fields_path)
        if fields.shape != (len(results), n1 * n2):
            raise InputError(f"{FIELDS_NPY} has shape {fields.shape}, expected {(len(results), n1 * n2)}")

    rho = rho_star if rho_star is not None else int(config.get("rho_star", DEFAULT_RHO_STAR))
    if phi is None:
        phi = config.get("phi") if rho_star is None else None
    config = dict(config, phi=phi, rho_star=rho,
                  normality=normality or config.get("normality", "shapiro-wilk"))

    report = aggregate(
        results, n1, n2, baseline_s=tuple(meta.get("baseline_s", ())), p_fields=fields,
        phi=phi, rho_star=rho, normality=config["normality"],
    )
    write_outputs(report, results, fields, directory, config, xlsx=xlsx)
    return report


def _result_from_row(row: dict) -> ReplicateResult:
    theta = None
    if not _is_missing(row.get("kappa")):
        theta = Hyperparams(float(row["kappa"]), float(row["sigma2_m"]), float(row["tau_iid"]))
    return ReplicateResult(
        index=int(row["index"]),
        seed=int(row["seed"]),
        s=int(row["s"]),
        e_hat=float(row["e_hat"]),
        sum_p=None if _is_missing(row.get("sum_p")) else float(row["sum_p"]),
        theta_hat=theta,
        threshold=None if _is_missing(row.get("threshold")) else float(row["threshold"]),
        newton_iters=int(row["newton_iters"]),
        degenerate=bool(row["degenerate"]),
    )


# ── Helpers ──────────────────────────────────────────────────────────

def _parse_theta(value, name: str) -> Hyperparams | None:
    if value == "fit":
        return None
    if not isinstance(value, dict):
        raise InputError(f"'{name}' must be \"fit\" or an object with kappa, sigma2_m, tau_iid")
    try:
        return Hyperparams(float(value["kappa"]), float(value["sigma2_m"]), float(value["tau_iid"]))
    except KeyError as e:
        raise InputError(f"'{name}' is missing field {e.args[0]}") from e


def _parse_priors(value: dict) -> PriorSpec:
    if not isinstance(value, dict):
        raise InputError("'priors' must be an object")
    kwargs = {}
    for name in ("tau_iid", "prec_m", "range"):
        if name in value:
            kwargs[name] = tuple(float(v) for v in value[name])
    for name in ("mu_precision", "mu_mean"):
        if name in value:
            kwargs[name] = float(value[name])
    return PriorSpec(**kwargs)


def _as_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise InputError(f"'{name}' must be an integer, got {value!r}")
    return int(value)


def _is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None
