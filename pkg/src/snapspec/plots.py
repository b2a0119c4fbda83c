"""PNG figures: band grids, ROI spectral curves and operator maps.

Everything renders through the Agg backend with PNG metadata stripped, so the
same inputs give the same bytes.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roi_spectrum, spectral_correlation  # noqa: E402

_PNG_META = {"Software": None}


def normalize_panel(img) -> np.ndarray:
    """Min-max scale one panel to [0, 1]; a flat panel maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def pick_bands(n_bands: int, count: int) -> list[int]:
    if not 1 <= count <= n_bands:
        raise ValueError(f"cannot show {count} of {n_bands} bands")
    return [int(round(b)) for b in np.linspace(0, n_bands - 1, count)]


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def band_grid(cube, bands: Sequence[int], path: str | Path, title: str | None = None) -> Path:
    """1 x N row of gray-scale band images on a common [0, 1] scale."""
    cube = np.asarray(cube)
    fig, axes = plt.subplots(1, len(bands), figsize=(2.2 * len(bands), 2.4), squeeze=False)
    for ax, b in zip(axes[0], bands):
        ax.imshow(cube[..., b], cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"band {b}", fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    return _save(fig, Path(path))


def spectral_curves(pred, truth, roi, path: str | Path) -> tuple[Path, float]:
    """Normalized ROI-mean spectra of prediction and ground truth, annotated with their correlation."""
    p = roi_spectrum(pred, roi)
    t = roi_spectrum(truth, roi)
    corr = spectral_correlation(pred, truth, roi)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    idx = np.arange(len(t))
    ax.plot(idx, t / max(t.max(), 1e-12), "k-", label="ground truth")
    ax.plot(idx, p / max(p.max(), 1e-12), "r--", label=f"reconstruction (corr {corr:.4f})")
    ax.set_xlabel("band")
    ax.set_ylabel("density (normalized)")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    return _save(fig, Path(path)), corr


def operator_maps(phi, residual, phi_hat, path: str | Path) -> Path:
    """Side-by-side Phi, R and Phi_hat panels, each min-max normalized on its own."""
    panels = [("Phi", phi), ("R", residual), ("Phi_hat", phi_hat)]
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(normalize_panel(img), cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, Path(path))
