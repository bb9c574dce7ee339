"""Write a replicate study summary to an XLSX workbook."""

from __future__ import annotations

import math

import openpyxl
from openpyxl.styles import Font

from models import AggregateReport, ReplicateResult

REPLICATE_COLUMNS = ("Index", "Seed", "s", "E(s) estimate", "|E - s| % of N",
                     "kappa", "sigma2_m", "tau_iid", "Newton iters", "Degenerate")
BLOCK_COLUMNS = ("Square", "Clipped", "Used", "sigma2", "r3", "Border variance")


def write_report_xlsx(
    report: AggregateReport,
    results: list[ReplicateResult],
    output_path: str,
) -> None:
    """Write an Excel workbook with Summary, Replicates and Block stats sheets.

    The block sheet is only added when block statistics were computed.
    """
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = "Summary"

    header_font = Font(bold=True, size=12)
    row = 1

    ws.cell(row=row, column=1, value="ESTIMATOR").font = header_font
    row += 1
    for label, value in (
        ("Replicates", report.n_replicates),
        ("Pixels N", report.n_pixels),
        ("E_sim(s)", report.e_sim),
        ("Mean E(s) estimate", report.mean_e_hat),
        ("Mean s", report.mean_s),
        ("Variance of estimate", report.var_e_hat),
        ("Mean |E_sim - E| % of N", report.abs_diff_sim_mean),
        ("Min |E_sim - E| % of N", report.abs_diff_sim_min),
        ("Max |E_sim - E| % of N", report.abs_diff_sim_max),
        ("Mean |E - s| % of N", report.abs_diff_s_mean),
        ("|mean E - mean s| % of N", report.bias_percent),
    ):
        ws.cell(row=row, column=1, value=label)
        ws.cell(row=row, column=2, value=value)
        row += 1

    if report.normality is not None:
        row += 1
        ws.cell(row=row, column=1, value="NORMALITY").font = header_font
        row += 1
        for label, value in (
            ("Test", report.normality.test),
            ("Statistic", report.normality.statistic),
            ("p-value", report.normality.p_value),
            ("n", report.normality.n),
        ):
            ws.cell(row=row, column=1, value=label)
            ws.cell(row=row, column=2, value=value)
            row += 1

    if report.block_stats is not None:
        row += 1
        ws.cell(row=row, column=1, value="BLOCK CONDITIONS").font = header_font
        row += 1
        stats, part = report.block_stats, report.partition
        for label, value in (
            ("phi", part.phi),
            ("rho*", part.rho_star),
            ("Squares", part.n_sq),
            ("Ratio B1", _number(stats.ratio_b1)),
            ("Ratio B2", _number(stats.ratio_b2)),
            ("Rate B1", stats.rate_b1),
            ("Rate B2", stats.rate_b2),
        ):
            ws.cell(row=row, column=1, value=label)
            ws.cell(row=row, column=2, value=value)
            row += 1

    ws.column_dimensions["A"].width = 30
    ws.column_dimensions["B"].width = 20

    ws2 = wb.create_sheet(title="Replicates")
    for col, name in enumerate(REPLICATE_COLUMNS, start=1):
        ws2.cell(row=1, column=col, value=name).font = header_font
    for i, r in enumerate(sorted(results, key=lambda r: r.index), start=2):
        theta = r.theta_hat
        values = (
            r.index, r.seed, r.s, r.e_hat,
            abs(r.e_hat - r.s) * 100.0 / report.n_pixels,
            theta.kappa if theta else None,
            theta.sigma2_m if theta else None,
            theta.tau_iid if theta else None,
            r.newton_iters, r.degenerate,
        )
        for col, value in enumerate(values, start=1):
            ws2.cell(row=i, column=col, value=value)

    if report.block_stats is not None:
        stats, part = report.block_stats, report.partition
        ws3 = wb.create_sheet(title="Block stats")
        for col, name in enumerate(BLOCK_COLUMNS, start=1):
            ws3.cell(row=1, column=col, value=name).font = header_font
        for k in range(part.n_sq):
            values = (k, bool(part.clipped[k]), bool(stats.used[k]), float(stats.sigma2_k[k]),
                      float(stats.r3_k[k]), float(stats.var_border_k[k]))
            for col, value in enumerate(values, start=1):
                ws3.cell(row=k + 2, column=col, value=value)

    wb.save(output_path)


def _number(value: float) -> float | None:
    return None if math.isnan(value) else value
