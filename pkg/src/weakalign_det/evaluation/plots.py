"""Shift-surface and miss-rate-curve figures."""
from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from weakalign_det.evaluation.miss_rate import FPPI_RANGE  # noqa: E402
from weakalign_det.evaluation.report import EvalReport  # noqa: E402

logger = logging.getLogger(__name__)


def plot_shift_surface(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    if not report.shift_surface:
        raise ValueError("report has no shift surface")
    xs = sorted({p.dx for p in report.shift_surface})
    ys = sorted({p.dy for p in report.shift_surface})
    grid = np.full((len(ys), len(xs)), np.nan)
    for p in report.shift_surface:
        grid[ys.index(p.dy), xs.index(p.dx)] = 100.0 * p.value

    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    image = ax.imshow(
        grid,
        origin="lower",
        extent=(xs[0] - 0.5, xs[-1] + 0.5, ys[0] - 0.5, ys[-1] + 0.5),
        cmap="viridis_r" if report.metric.startswith("mr") else "viridis",
    )
    fig.colorbar(image, ax=ax, label=f"{report.metric} (%)")
    ax.set_xlabel("shift x (px)")
    ax.set_ylabel("shift y (px)")
    ax.set_title(f"{report.metric} under sensed-side shifts")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def plot_mr_curve(reports: dict[str, EvalReport], path: str | Path) -> Path:
    """Miss rate against FPPI, one line per labelled report."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for label, report in reports.items():
        if report.mr_curve is None or report.mr is None:
            continue
        fppi = np.maximum(np.asarray(report.mr_curve.fppi), FPPI_RANGE[0] / 10)
        ax.step(fppi, report.mr_curve.miss_rate, where="post", label=f"{100 * report.mr:.2f}% {label}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlim(FPPI_RANGE[0] / 10, FPPI_RANGE[1] * 10)
    ax.set_ylim(0.01, 1.0)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower left", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path
