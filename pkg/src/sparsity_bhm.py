#!/usr/bin/env python3
"""CLI entry point for expected-sparsity estimation.

Four subcommands:
  1. sparsify: image -> Haar transform -> universal threshold -> coefficient CSV
  2. fit:      coefficient CSV -> Bernoulli-logit spatial model -> E(s) estimate
  3. simulate: replicate study from a JSON config -> output directory
  4. diagnose: recompute block conditions and normality for an output directory

Exit codes: 0 success, 1 internal failure, 2 bad input, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from models import ConvergenceError, Hyperparams, InputError, SigmaBand, SparsityError

log = logging.getLogger("sparsity_bhm")

LOG_ENV = "SPARSITY_BHM_LOG"
LOG_FORMAT = "%(levelname)s: %(message)s"

EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3


def _build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        description="Estimate the expected sparsity of wavelet-thresholded images."
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sparsify", help="Threshold the Haar coefficients of an image")
    sp.add_argument("image", help="Input image (.pgm or f64-matrix .csv)")
    sp.add_argument("--out", required=True, help="Output coefficient CSV (sidecar .json beside it)")
    sp.add_argument("--format", default=None, help="Input format: pgm or csv (default: from suffix)")
    sp.add_argument("--threshold", type=float, default=None,
                    help="Hard threshold (default: universal threshold from the MAD noise estimate)")
    sp.add_argument("--sigma-band", choices=[b.value for b in SigmaBand], default=SigmaBand.POOLED.value,
                    help="Level-1 detail bands for the noise estimate (default: pooled)")
    sp.add_argument("--reconstruct", default=None, help="Also write the denoised image to this path")

    fp = sub.add_parser("fit", help="Fit the spatial model to a coefficient CSV")
    fp.add_argument("coeffs", help="Sparse coefficient CSV from 'sparsify'")
    fp.add_argument("--out", required=True, help="Output stem: <out>.json, <out>_p_mean.csv, <out>_p_var.csv")
    fp.add_argument("--theta", default=None,
                    help="Fixed hyperparameters kappa,sigma2,tau (default: empirical Bayes)")
    fp.add_argument("--seed", type=int, default=0, help="Seed for posterior sampling (default: 0)")
    fp.add_argument("--samples", type=int, default=None, help="Posterior samples for eta variances (default: 200)")
    fp.add_argument("--theta-grid", type=int, default=0,
                    help="Average over a k^3 hyperparameter grid around the fit (default: off)")
    fp.add_argument("--precision-out", default=None,
                    help="Write the fitted precision matrix as coordinate text")

    mp = sub.add_parser("simulate", help="Run a replicate study")
    mp.add_argument("config", help="Simulation config JSON (see docs/CONFIG.md)")
    mp.add_argument("--workers", type=int, default=None, help="Worker processes (overrides config)")
    mp.add_argument("--seed", type=int, default=None, help="Base seed (overrides config)")
    mp.add_argument("--out", default=None, help="Output directory (overrides config)")
    mp.add_argument("--phi", type=int, default=None, help="Square half-width (default: schedule)")
    mp.add_argument("--rho-star", type=int, default=None, help="Border width (default: 2)")
    mp.add_argument("--xlsx", action="store_true", help="Also write report.xlsx")

    dp = sub.add_parser("diagnose", help="Recompute diagnostics for a simulate output directory")
    dp.add_argument("directory", help="Directory written by 'simulate'")
    dp.add_argument("--phi", type=int, default=None, help="Square half-width (default: schedule)")
    dp.add_argument("--rho-star", type=int, default=None, help="Border width (default: from config)")
    dp.add_argument("--normality", choices=["shapiro-wilk", "dagostino-k2"], default=None,
                    help="Normality test (default: from config)")
    dp.add_argument("--xlsx", action="store_true", help="Also write report.xlsx")
    return p


def main(argv: list[str] | None = None) -> None:
    _configure_logging()
    parser = _build_arg_parser()
    args = parser.parse_args(argv)

    commands = {
        "sparsify": cmd_sparsify,
        "fit": cmd_fit,
        "simulate": cmd_simulate,
        "diagnose": cmd_diagnose,
    }
    try:
        commands[args.command](args)
    except InputError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_INPUT)
    except ConvergenceError as e:
        detail = f" (gradient norm {e.grad_norm:.3g})" if e.grad_norm is not None else ""
        print(f"Error: {e}{detail}", file=sys.stderr)
        sys.exit(EXIT_CONVERGENCE)
    except SparsityError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_INTERNAL)
    except Exception as e:  # noqa: BLE001
        log.debug("Unhandled failure", exc_info=True)
        print(f"Error: internal failure: {e}", file=sys.stderr)
        sys.exit(EXIT_INTERNAL)


# ── Subcommands ──────────────────────────────────────────────────────

def cmd_sparsify(args) -> None:
    from image_io import load_image, save_image, save_sparse_coeffs
    from wavelet import LEVELS, reconstruct, sparsify

    t0 = time.time()
    img = load_image(args.image, args.format, levels=LEVELS)
    log.info("Read %dx%d image", img.n1, img.n2)
    if args.threshold is not None and args.threshold < 0:
        raise InputError(f"--threshold must be >= 0, got {args.threshold}")

    sci = sparsify(img, threshold=args.threshold, sigma_band=SigmaBand(args.sigma_band))
    denoised = reconstruct(sci) if args.reconstruct else None

    sidecar = save_sparse_coeffs(sci, args.out)
    if denoised is not None:
        save_image(denoised, args.reconstruct)
        print(f"Output: {args.reconstruct}", file=sys.stderr)

    print(f"Output: {args.out}", file=sys.stderr)
    print(f"Output: {sidecar}", file=sys.stderr)
    print(f"Kept {sci.s}/{sci.n_pixels} coefficients, threshold {sci.threshold_used:.6g}", file=sys.stderr)
    log.info("Sparsify took %.1fs", time.time() - t0)


def cmd_fit(args) -> None:
    from estimator import abs_diff_percent, estimate_expected_sparsity
    from gmrf import build_precision, write_coordinate_text
    from image_io import load_sparse_coeffs, save_vector_csv
    from inference import (
        N_SAMPLES,
        fit_empirical_bayes,
        fit_laplace,
        integrate_theta_grid,
        posterior_p_means,
    )

    t0 = time.time()
    sci = load_sparse_coeffs(args.coeffs)
    o = sci.indicator
    n_samples = args.samples if args.samples is not None else N_SAMPLES
    if n_samples < 2:
        raise InputError(f"--samples must be at least 2, got {n_samples}")
    if args.theta_grid < 0:
        raise InputError(f"--theta-grid must be >= 0, got {args.theta_grid}")

    if args.theta is not None:
        fit = fit_laplace(o, parse_theta(args.theta), n_samples=n_samples, seed=args.seed)
    else:
        fit = fit_empirical_bayes(o, n_samples=n_samples, seed=args.seed)

    if args.theta_grid > 0:
        post = integrate_theta_grid(o, fit, k=args.theta_grid, n_samples=n_samples)
    else:
        post = posterior_p_means(fit.eta_mean, fit.eta_var)
    estimate = estimate_expected_sparsity(post, source=str(args.coeffs))
    diff = abs_diff_percent(estimate.value, sci.s, estimate.n_pixels)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mean_path = out.with_name(f"{out.name}_p_mean.csv")
    var_path = out.with_name(f"{out.name}_p_var.csv")
    save_vector_csv(post.p_mean, o.shape, mean_path)
    save_vector_csv(post.p_var, o.shape, var_path)

    result = {
        "e_hat": estimate.value,
        "s": sci.s,
        "n_pixels": estimate.n_pixels,
        "abs_diff_percent": diff,
        "theta_hat": fit.theta_hat.to_dict(),
        "provenance": fit.provenance,
        "log_marginal": fit.log_marginal,
        "newton_iters": fit.newton_iters,
        "grad_norm": fit.grad_norm,
        "n_evaluations": fit.n_evaluations,
        "boundary_degenerate": fit.boundary_degenerate,
        "theta_grid": args.theta_grid,
        "seed": fit.seed,
        "p_mean": mean_path.name,
        "p_var": var_path.name,
    }
    json_path = out.with_name(f"{out.name}.json")
    json_path.write_text(json.dumps(result, indent=2) + "\n")

    if args.precision_out:
        q = build_precision(fit.theta_hat.matern(), *o.shape)
        write_coordinate_text(q, args.precision_out)
        print(f"Output: {args.precision_out}", file=sys.stderr)

    print(f"Output: {json_path}", file=sys.stderr)
    print(f"E(s) estimate: {estimate.value:.3f}")
    print(f"|E(s) - s| * 100 / N: {diff:.4f}")
    log.info("Fit (%s) took %.1fs", fit.provenance, time.time() - t0)


def cmd_simulate(args) -> None:
    from simharness import load_sim_config, run

    cfg = load_sim_config(args.config)
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.phi is not None:
        overrides["phi"] = args.phi
    if args.rho_star is not None:
        overrides["rho_star"] = args.rho_star
    if args.xlsx:
        overrides["xlsx"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    _check_blocks(cfg.phi, cfg.rho_star)

    t0 = time.time()
    report = run(cfg)
    print(f"Output: {cfg.output_dir}", file=sys.stderr)
    print(f"{report.n_replicates} replicates, mean |E - s| {report.abs_diff_s_mean:.4f}% of N", file=sys.stderr)
    log.info("Simulation took %.1fs", time.time() - t0)


def cmd_diagnose(args) -> None:
    from simharness import diagnose_directory

    _check_blocks(args.phi, args.rho_star)
    if not Path(args.directory).is_dir():
        raise InputError(f"Not a directory: {args.directory}")
    report = diagnose_directory(
        args.directory, phi=args.phi, rho_star=args.rho_star,
        normality=args.normality, xlsx=args.xlsx,
    )
    if report.normality is not None:
        print(f"{report.normality.test}: statistic {report.normality.statistic:.4f}, "
              f"p-value {report.normality.p_value:.4f}", file=sys.stderr)
    if report.block_stats is not None:
        print(f"Block ratios: B1 {report.block_stats.ratio_b1:.4g}, "
              f"B2 {report.block_stats.ratio_b2:.4g}", file=sys.stderr)


# ── Helpers ──────────────────────────────────────────────────────────

def parse_theta(text: str) -> Hyperparams:
    """Parse ``kappa,sigma2,tau``."""
    parts = text.split(",")
    if len(parts) != 3:
        raise InputError(f"--theta needs three comma-separated values, got {text!r}")
    try:
        kappa, sigma2, tau = (float(v) for v in parts)
    except ValueError as e:
        raise InputError(f"--theta values must be numbers: {text!r}") from e
    return Hyperparams(kappa=kappa, sigma2_m=sigma2, tau_iid=tau)


def _check_blocks(phi: int | None, rho_star: int | None) -> None:
    if rho_star is not None and rho_star < 1:
        raise InputError(f"--rho-star must be >= 1, got {rho_star}")
    # Without --rho-star the directory's config decides; diagnose_directory checks that case.
    if phi is not None and rho_star is not None and phi <= rho_star:
        raise InputError(f"--phi must exceed rho* ({rho_star}), got {phi}")


def _configure_logging() -> None:
    level_name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


if __name__ == "__main__":
    main()
