"""Artifact rendering: portable images, CSV tables, and figures.

Heatmaps go out as binary PGM (bit-exact, dependency-free) and overlays as
binary PPM; figures for human consumption render through the Agg backend so
headless runs work.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import InvalidArgumentError
from .metrics import MetricsRow

OVERLAY_TINT = np.array([1.0, 0.15, 0.05])   # red-ish attention tint
OVERLAY_ALPHA = 0.5


def heatmap_to_gray(values: np.ndarray) -> np.ndarray:
    """uint8 image: round(255 * v / max v); an all-zero map stays zero."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise InvalidArgumentError(f"heatmap must be 2-D, got {v.shape}")
    if np.any(v < 0):
        raise InvalidArgumentError("heatmap values must be nonnegative")
    peak = v.max()
    if peak == 0.0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255.0 * v / peak).astype(np.uint8)


def write_pgm(path, values: np.ndarray):
    gray = heatmap_to_gray(values)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_signed_pgm(path, delta: np.ndarray):
    """Signed map as 8-bit gray with 128 = zero; full range at max |delta|."""
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim != 2:
        raise InvalidArgumentError(f"delta map must be 2-D, got {d.shape}")
    span = np.abs(d).max()
    scaled = d / span if span > 0 else d
    gray = np.round(128.0 + 127.0 * scaled).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray):
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"overlay must be (H, W, 3), got {arr.shape}")
    data = np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def flatten_raster(channels: np.ndarray) -> np.ndarray:
    """Collapse a channel stack to one grayscale pane by per-pixel max."""
    arr = np.asarray(channels, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidArgumentError(f"raster stack must be (H, W, C), got {arr.shape}")
    return arr.max(axis=2)


def attention_overlay(channels: np.ndarray, alpha_upsampled: np.ndarray) -> np.ndarray:
    """Gray scene with the attention heatmap tinted on top at 50% opacity."""
    base = flatten_raster(channels)
    a = np.asarray(alpha_upsampled, dtype=np.float64)
    if a.shape != base.shape:
        raise InvalidArgumentError(
            f"attention map {a.shape} does not match raster {base.shape}")
    peak = a.max()
    strength = (a / peak if peak > 0 else a) * OVERLAY_ALPHA
    rgb = np.repeat(base[..., None], 3, axis=2)
    return rgb * (1.0 - strength[..., None]) + OVERLAY_TINT * strength[..., None]


def write_metrics_csv(path, rows: list[MetricsRow]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRow.CSV_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_row())


def write_attention_histogram_csv(path, alphas: np.ndarray, bins: int = 32):
    """Histogram of per-cell attention weights pooled over all maps."""
    flat = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise InvalidArgumentError("no attention values to histogram")
    hi = max(float(flat.max()), 1e-12)
    counts, edges = np.histogram(flat, bins=bins, range=(0.0, hi))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "fraction"])
        for i in range(bins):
            writer.writerow([f"{edges[i]:.9f}", f"{edges[i + 1]:.9f}",
                             int(counts[i]), f"{counts[i] / flat.size:.9f}"])


def ablation_figure(rows: list[MetricsRow], path):
    """2x2 bar panels: ADE / FDE / collision / attention entropy."""
    labels = [r.variant for r in rows]
    panels = [("ADE (m)", [r.ade for r in rows]),
              ("FDE (m)", [r.fde for r in rows]),
              ("collision overlap", [r.collision for r in rows]),
              ("attention entropy (nats)",
               [np.nan if r.entropy is None else r.entropy for r in rows])]
    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    x = np.arange(len(rows))
    for ax, (title, values) in zip(axes.flat, panels):
        vals = np.asarray(values, dtype=np.float64)
        ax.bar(x, np.nan_to_num(vals), color="#4878cf")
        for xi, v in zip(x, vals):
            if np.isnan(v):
                ax.text(xi, 0.02, "n/a", ha="center", va="bottom", rotation=90)
        ax.set_title(title)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def loss_curve_figure(log_path, out_path):
    """Total and component losses over steps, from a training CSV log."""
    steps, series = [], {}
    with open(log_path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = [n for n in reader.fieldnames if n not in ("step", "lr")]
        for row in reader:
            steps.append(int(row["step"]))
            for n in names:
                series.setdefault(n, []).append(float(row[n]))
    if not steps:
        raise InvalidArgumentError(f"training log {log_path} has no rows")
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, values in series.items():
        width = 2.0 if name == "total" else 1.0
        ax.plot(steps, values, label=name, linewidth=width)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def counterfactual_figure(report, out_path):
    """Before/after overlays plus the signed attention difference."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 4.5))
    axes[0].imshow(attention_overlay(report.base_channels, report.alpha_before))
    axes[0].set_title("before")
    axes[1].imshow(attention_overlay(report.mutated_channels, report.alpha_after))
    axes[1].set_title(f"after {report.mutation.describe()}")
    span = np.abs(report.delta_alpha).max()
    span = span if span > 0 else 1.0
    im = axes[2].imshow(report.delta_alpha, cmap="RdBu_r", vmin=-span, vmax=span)
    axes[2].set_title("attention change")
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(report.summary_line(), fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def read_pgm(path):
    """Parse a binary PGM written by this module (for round-trip checks)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise InvalidArgumentError(f"not a binary PGM: {magic!r}")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        if maxval != 255:
            raise InvalidArgumentError("expected 8-bit PGM")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)
