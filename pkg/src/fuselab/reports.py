"""Artifact writers: delimited metrics, PGM heatmaps, matplotlib figures.

Metric files (CSV/JSON) are byte-deterministic: floats are written with
``repr`` so identical runs produce identical bytes. Figures are rendered
with the Agg backend next to the delimited output they visualize; they are
for humans and carry no determinism contract.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    lines += [",".join(format_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_pgm(path: str | Path, values: np.ndarray) -> Path:
    """8-bit binary PGM (header ``P5 <w> <h> 255``), min-max normalized.

    A constant map has no contrast to show and renders mid-gray.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-300:
        scaled = np.full(values.shape, 128, dtype=np.uint8)
    else:
        scaled = np.clip(np.round((values - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = values.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return path


def image_to_unit(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] image to [0, 1] for display."""
    return np.clip((np.asarray(img) + 1.0) / 2.0, 0.0, 1.0)


def save_image(img: np.ndarray, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image_to_unit(img), interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_loss_curves(history: dict[str, list[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(1, len(history["l_simple"]) + 1)
    ax.plot(steps, history["l_simple"], label="l_simple", lw=0.8)
    ax.plot(steps, history["l_reg"], label="l_reg", lw=0.8)
    ax.plot(steps, history["total"], label="total", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_lambda_sweep_figure(rows: list[dict], path: str | Path) -> Path:
    lams = [r["lambda"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(lams, [r["l_simple"] for r in rows], marker="o")
    ax1.set_xlabel("balance factor")
    ax1.set_ylabel("l_simple")
    accs = [r["color_accuracy"] for r in rows]
    ax2.plot(lams, accs, marker="o", color="tab:green")
    ax2.set_xlabel("balance factor")
    ax2.set_ylabel("color accuracy")
    ax2.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_ablation_figure(rows: list[dict], path: str | Path) -> Path:
    names = [r["variant"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(names, [r["final100_l_simple"] for r in rows], color="tab:blue")
    ax.set_ylabel("final l_simple (100-step mean)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_audit_figure(rows: list[dict], path: str | Path) -> Path:
    lams = [r["lambda"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(lams, [r["max_abs_diff"] for r in rows], marker="o", label="max |gap|")
    ax.plot(lams, [r["mean_abs_diff"] for r in rows], marker="s", label="mean |gap|")
    ax.set_xlabel("balance factor")
    ax.set_ylabel("|concat form - sum form|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_heatmap_grid(maps: list[tuple[str, np.ndarray]], n_cols: int,
                      path: str | Path) -> Path:
    n = len(maps)
    n_rows = max(1, (n + n_cols - 1) // n_cols)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.8 * n_rows),
                             squeeze=False)
    for k in range(n_rows * n_cols):
        ax = axes[k // n_cols][k % n_cols]
        ax.set_axis_off()
        if k < n:
            label, grid = maps[k]
            ax.imshow(grid, cmap="gray", interpolation="nearest")
            ax.set_title(label, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
