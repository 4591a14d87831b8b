"""Diagnostic figures rendered to image files with matplotlib (Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gaussians import GaussianCloud  # noqa: E402
from .raster import GBuffer  # noqa: E402

LOSS_TERMS = ("color", "normal", "distortion", "median", "projection", "smoothness", "mask")


def read_loss_csv(path) -> dict[str, np.ndarray]:
    """Columns of a training loss CSV as float arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curves(columns: dict, path) -> Path:
    """Weighted loss terms (log scale) and the schedule gates over iterations."""
    it = columns["iteration"]
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True,
                                  gridspec_kw={"height_ratios": [3, 1]})
    for name in LOSS_TERMS:
        key = f"w_{name}"
        if key in columns and np.any(columns[key] > 0):
            ax.semilogy(it, np.maximum(columns[key], 1e-12), label=name, lw=0.8)
    ax.semilogy(it, np.maximum(columns["total"], 1e-12), "k", label="total", lw=1.2)
    ax.set_ylabel("weighted loss")
    ax.legend(fontsize=7, ncol=4)
    for key, style in (("median_active", "-"), ("projection_active", "--")):
        if key in columns:
            ax2.step(it, columns[key], style, where="post", label=key.replace("_active", ""))
    ax2.set_ylim(-0.1, 1.1)
    ax2.set_ylabel("gate")
    ax2.set_xlabel("iteration")
    ax2.legend(fontsize=7)
    return _save(fig, path)


def plot_decomposition(gb: GBuffer, path, render: np.ndarray | None = None,
                       reference: np.ndarray | None = None) -> Path:
    """Panels of the blended G-buffer: albedo, roughness, metallic, normal,
    depth and alpha (plus render/reference when given)."""
    panels = []
    if reference is not None:
        panels.append(("reference", np.clip(reference, 0, 1), None))
    if render is not None:
        panels.append(("render", np.clip(render, 0, 1), None))
    covered = gb.alpha > 0.5
    depth = np.where(covered, gb.depth, np.nan)
    panels += [("albedo", np.clip(gb.albedo, 0, 1), None),
               ("roughness", gb.roughness, "viridis"),
               ("metallic", gb.metallic, "viridis"),
               ("normal", np.where(covered[..., None], gb.normal * 0.5 + 0.5, 0.0), None),
               ("depth", depth, "magma"),
               ("alpha", gb.alpha, "gray")]
    cols = 4
    rows = (len(panels) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows))
    for ax in np.ravel(axes):
        ax.axis("off")
    for ax, (title, img, cmap) in zip(np.ravel(axes), panels):
        if cmap is None:
            ax.imshow(img)
        else:
            vmin, vmax = (0.0, 1.0) if title != "depth" else (None, None)
            ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_opacity_histogram(cloud: GaussianCloud, path) -> Path:
    """Distributions of primitive opacity and signed distance."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.hist(cloud.opacity, bins=50, range=(0.0, 1.0), color="tab:blue")
    a.set_xlabel("opacity")
    a.set_ylabel("primitives")
    s = cloud.sdf_values
    lim = float(np.quantile(np.abs(s), 0.99)) if len(s) else 1.0
    b.hist(s, bins=60, range=(-lim, lim) if lim > 0 else None, color="tab:orange")
    b.set_xlabel(f"signed distance (gamma = {cloud.gamma:.3g})")
    fig.tight_layout()
    return _save(fig, path)
