"""Square/border decomposition of the lattice and the two CLT condition ratios.

Squares of side 2*phi+1 sit on a grid with period 2*phi+1+rho_star from the
top-left corner. Each square owns the L-shaped border to its right and
below it (rho_star columns, rho_star rows and their corner), so squares and
borders tile the lattice; pixels past the last full period are slack.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from models import BlockPartition, BlockStats, InputError

log = logging.getLogger(__name__)

DEFAULT_RHO_STAR = 2
PHI_SCHEDULE_MAX_STEPS = 64


def squares_per_axis(n: int, phi: int, rho_star: int) -> int:
    return (n + rho_star) // (2 * phi + 1 + rho_star)


def block_partition(n1: int, n2: int, phi: int, rho_star: int = DEFAULT_RHO_STAR) -> BlockPartition:
    if not (isinstance(phi, (int, np.integer)) and isinstance(rho_star, (int, np.integer))):
        raise InputError(f"phi and rho_star must be integers, got {phi!r}, {rho_star!r}")
    if rho_star < 1 or phi <= rho_star:
        raise InputError(f"Need phi > rho_star >= 1, got phi={phi}, rho_star={rho_star}")
    side = 2 * phi + 1
    if n1 < side or n2 < side:
        raise InputError(f"Lattice {n1}x{n2} is too small for squares of side {side}")

    period = side + rho_star
    rows_sq = squares_per_axis(n1, phi, rho_star)
    cols_sq = squares_per_axis(n2, phi, rho_star)

    index = np.arange(n1 * n2).reshape(n1, n2)
    covered = np.zeros((n1, n2), dtype=bool)
    squares, borders, clipped = [], [], []
    for i in range(rows_sq):
        for j in range(cols_sq):
            r0, c0 = i * period, j * period
            squares.append(index[r0:r0 + side, c0:c0 + side].ravel())

            owned = np.zeros((n1, n2), dtype=bool)
            owned[r0:r0 + period, c0:c0 + period] = True
            owned[r0:r0 + side, c0:c0 + side] = False
            borders.append(index[owned])
            clipped.append(r0 + period > n1 or c0 + period > n2)
            covered[r0:r0 + period, c0:c0 + period] = True

    return BlockPartition(
        n1=n1,
        n2=n2,
        phi=int(phi),
        rho_star=int(rho_star),
        squares=tuple(squares),
        borders=tuple(borders),
        clipped=np.array(clipped, dtype=bool),
        slack=index[~covered],
    )


def phi_schedule(n1: int, n2: int, rho_star: int = DEFAULT_RHO_STAR) -> int:
    """Fixed point of phi = max(rho_star + 1, floor(n_sq(phi)^(1/8)) + 2).

    Grows slower than n_sq^(1/6); where the iteration cycles, the smallest
    value visited is taken.
    """
    phi = rho_star + 1
    seen: list[int] = []
    for _ in range(PHI_SCHEDULE_MAX_STEPS):
        side = 2 * phi + 1
        if side > min(n1, n2):
            raise InputError(f"Lattice {n1}x{n2} is too small for the phi schedule")
        n_sq = squares_per_axis(n1, phi, rho_star) * squares_per_axis(n2, phi, rho_star)
        target = max(rho_star + 1, int(math.floor(n_sq ** 0.125 + 1e-12)) + 2)
        if target == phi:
            return phi
        if target in seen:
            return min(seen)
        seen.append(phi)
        phi = target
    return min(seen)


def block_stats(partition: BlockPartition, p_fields: np.ndarray) -> BlockStats:
    """Empirical moments over replicates of centred square and border sums.

    Squares whose border is clipped by the lattice edge are left out of the
    ratios unless every square is clipped.
    """
    fields = np.asarray(p_fields, dtype=np.float64)
    n = partition.n1 * partition.n2
    if fields.ndim != 2 or fields.shape[1] != n:
        raise InputError(f"Expected an R x {n} matrix of p fields, got shape {fields.shape}")
    r = fields.shape[0]
    if r < 2:
        raise InputError(f"Need at least 2 replicates for block statistics, got {r}")

    centred = fields - fields.mean(axis=0)
    s_k = np.column_stack([centred[:, sq].sum(axis=1) for sq in partition.squares])
    s_b = np.column_stack([centred[:, b].sum(axis=1) for b in partition.borders])

    sigma2 = np.var(s_k, axis=0, ddof=1)
    r3 = np.mean(np.abs(s_k) ** 3, axis=0)
    var_border = np.var(s_b, axis=0, ddof=1)
    degenerate = sigma2 <= 0.0

    used = ~partition.clipped
    if not used.any():
        used = np.ones_like(used)
    n_used = int(used.sum())
    total_sigma2 = float(sigma2[used].sum())

    if total_sigma2 > 0:
        ratio_b1 = float(var_border[used].sum()) / (n_used * total_sigma2)
        ratio_b2 = float(r3[used].sum()) ** (1.0 / 3.0) / math.sqrt(total_sigma2)
    else:
        log.warning("All square sums have zero variance; ratios undefined")
        ratio_b1 = ratio_b2 = math.nan

    side = partition.side
    return BlockStats(
        s_k=s_k,
        s_k_border=s_b,
        sigma2_k=sigma2,
        r3_k=r3,
        var_border_k=var_border,
        ratio_b1=ratio_b1,
        ratio_b2=ratio_b2,
        rate_b1=side ** 2 / partition.n_sq,
        rate_b2=side / partition.n_sq ** (1.0 / 6.0),
        degenerate=degenerate,
        used=used,
    )
