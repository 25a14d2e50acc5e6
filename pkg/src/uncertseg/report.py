"""Evaluation report serialization: key/value text, CSV tables, SVG scatter."""

from __future__ import annotations

import csv
from pathlib import Path

from .metrics import EvalReport, RegressionFit

REPORT_FILE = "report.txt"
PER_VOLUME_FILE = "per_volume.csv"
SCATTER_FILE = "uncertainty_vs_dice.svg"
SWEEP_FILE = "t_sweep.csv"


def write_report(report: EvalReport, path: str | Path) -> None:
    """Key/value report; field order mirrors the pooled-metrics table layout
    (photoreceptor AUC, Dice mean +/- std, disruption AUC), then regression."""
    lines = [
        f"volumes: {len(report.volume_ids)}",
        f"photoreceptor_auc: {report.photoreceptor_auc:.6f}",
        f"dice_mean: {report.dice_mean:.6f}",
        f"dice_std: {report.dice_std:.6f}",
        f"disruption_auc: {report.disruption_auc:.6f}",
        f"uncertainty_dice_slope: {report.fit.slope:.6g}",
        f"uncertainty_dice_intercept: {report.fit.intercept:.6g}",
        f"uncertainty_dice_r_squared: {report.fit.r_squared:.6f}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_per_volume_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume_id", "dice", "mean_uncertainty"])
        for vid, d, u in zip(report.volume_ids, report.dice_per_volume, report.uncertainty_per_volume):
            writer.writerow([vid, repr(d), repr(u)])


def write_sweep_csv(rows: list[tuple[int, float, float]], path: str | Path) -> None:
    """AUC-vs-sample-count table: (samples, photoreceptor AUC, disruption AUC)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["samples", "photoreceptor_auc", "disruption_auc"])
        for t, p_auc, d_auc in rows:
            writer.writerow([t, repr(p_auc), repr(d_auc)])


def write_scatter_svg(
    x: list[float],
    y: list[float],
    fit: RegressionFit,
    path: str | Path,
    x_label: str = "mean uncertainty",
    y_label: str = "dice",
) -> None:
    """Scatter of per-volume points with the OLS line, as standalone SVG."""
    width, height, margin = 480, 360, 56
    x_lo, x_hi = min(x), max(x)
    y_lo, y_hi = min(y), max(y)
    x_pad = (x_hi - x_lo) * 0.08 or max(abs(x_hi), 1e-6) * 0.1
    y_pad = (y_hi - y_lo) * 0.08 or max(abs(y_hi), 1e-6) * 0.1
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(v: float) -> float:
        return margin + (v - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(v: float) -> float:
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">{x_label}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{y_label}</text>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10" '
        f'text-anchor="middle">{x_lo:.4g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="10" '
        f'text-anchor="middle">{x_hi:.4g}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" font-size="10" '
        f'text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="10" text-anchor="end">{y_hi:.4g}</text>',
        f'<line x1="{sx(x_lo):.2f}" y1="{sy(fit.slope * x_lo + fit.intercept):.2f}" '
        f'x2="{sx(x_hi):.2f}" y2="{sy(fit.slope * x_hi + fit.intercept):.2f}" '
        f'stroke="#c44" stroke-width="1.5"/>',
    ]
    for xv, yv in zip(x, y):
        parts.append(f'<circle cx="{sx(xv):.2f}" cy="{sy(yv):.2f}" r="4" fill="#3366aa"/>')
    parts.append(
        f'<text x="{width - margin}" y="{margin - 8}" text-anchor="end" font-size="11">'
        f"slope={fit.slope:.4g} R2={fit.r_squared:.4f}</text>"
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="ascii")
