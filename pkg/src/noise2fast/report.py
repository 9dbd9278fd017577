"""Benchmark/ablation reports: metrics CSV plus rendered figures.

The CSV schema is fixed: image,psnr_noisy,psnr_denoised,ssim_noisy,
ssim_denoised,epochs,seconds, with a final "mean" aggregate row.  Figures
are rendered next to the CSV: a per-image PSNR bar chart and the
validation-MSE curves of every training run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_HEADER = [
    "image",
    "psnr_noisy",
    "psnr_denoised",
    "ssim_noisy",
    "ssim_denoised",
    "epochs",
    "seconds",
]


@dataclass
class MetricRow:
    image: str
    psnr_noisy: float
    psnr_denoised: float
    ssim_noisy: float
    ssim_denoised: float
    epochs: int
    seconds: float
    val_histories: list | None = None  # per-run validation curves, figure input


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return repr(value) if isinstance(value, float) else str(value)


def aggregate(rows: list[MetricRow]) -> MetricRow:
    """Arithmetic mean over rows (the 'mean' CSV line)."""
    n = len(rows)
    if n == 0:
        raise ValueError("no rows to aggregate")
    return MetricRow(
        image="mean",
        psnr_noisy=sum(r.psnr_noisy for r in rows) / n,
        psnr_denoised=sum(r.psnr_denoised for r in rows) / n,
        ssim_noisy=sum(r.ssim_noisy for r in rows) / n,
        ssim_denoised=sum(r.ssim_denoised for r in rows) / n,
        epochs=round(sum(r.epochs for r in rows) / n),
        seconds=sum(r.seconds for r in rows) / n,
    )


def write_metrics_csv(path, rows: list[MetricRow]) -> MetricRow:
    """Write per-image rows plus the aggregate row; returns the aggregate."""
    agg = aggregate(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in [*rows, agg]:
            writer.writerow(
                [
                    r.image,
                    _fmt(r.psnr_noisy),
                    _fmt(r.psnr_denoised),
                    _fmt(r.ssim_noisy),
                    _fmt(r.ssim_denoised),
                    r.epochs,
                    _fmt(round(r.seconds, 3)),
                ]
            )
    return agg


def render_benchmark_figures(csv_path, rows: list[MetricRow]) -> list[Path]:
    """Render the PSNR bar chart and validation curves next to the CSV."""
    csv_path = Path(csv_path)
    stem = csv_path.with_suffix("")
    out = []

    names = [r.image for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) + 2), 3.5))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [r.psnr_noisy for r in rows], width, label="noisy")
    ax.bar([i + width / 2 for i in x], [r.psnr_denoised for r in rows], width, label="denoised")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(frameon=False)
    fig.tight_layout()
    psnr_png = stem.parent / f"{stem.name}_psnr.png"
    fig.savefig(psnr_png, dpi=120)
    plt.close(fig)
    out.append(psnr_png)

    curves = [(r.image, h) for r in rows if r.val_histories for h in r.val_histories]
    if curves:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for name, hist in curves:
            ax.plot(range(1, len(hist) + 1), hist, lw=0.9, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation MSE vs noisy input")
        ax.set_yscale("log")
        if len(curves) <= 10:
            ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        val_png = stem.parent / f"{stem.name}_val.png"
        fig.savefig(val_png, dpi=120)
        plt.close(fig)
        out.append(val_png)
    return out


def render_ablation_figure(csv_path, scheme_rows: dict[str, list[MetricRow]]) -> Path:
    """Grouped bar chart of denoised PSNR per image for each scheme."""
    csv_path = Path(csv_path)
    stem = csv_path.with_suffix("")
    schemes = list(scheme_rows)
    names = [r.image for r in scheme_rows[schemes[0]]]
    n = len(names)
    width = 0.8 / len(schemes)
    fig, ax = plt.subplots(figsize=(max(4.5, 1.4 * n + 2), 3.5))
    for k, scheme in enumerate(schemes):
        rows = scheme_rows[scheme]
        xs = [i + (k - (len(schemes) - 1) / 2) * width for i in range(n)]
        ax.bar(xs, [r.psnr_denoised for r in rows], width, label=scheme)
    ax.set_xticks(range(n))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("denoised PSNR (dB)")
    ax.legend(frameon=False)
    fig.tight_layout()
    png = stem.parent / f"{stem.name}_ablation.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    return png
