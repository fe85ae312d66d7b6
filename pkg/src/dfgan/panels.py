"""Static figure panels (PNG).

Images use a gray map on [0, 1]; uncertainty maps use ``UNCERTAINTY_CMAP``
with a colour bar per panel so scales are always readable.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

UNCERTAINTY_CMAP = "magma"
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _show(ax, img, title, cmap="gray", vmin=0.0, vmax=1.0, colorbar=False):
    im = ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    if colorbar:
        plt.colorbar(im, ax=ax, fraction=0.046, pad=0.04)


def save_uncertainty_panel(path, attenuation, bundle, *, epistemic_std: bool = False,
                           sigma_max: float | None = None, epistemic_max: float | None = None):
    """attenuation | prediction | aleatoric sigma | epistemic (variance, or std if asked)."""
    epi = np.sqrt(bundle.epistemic_var) if epistemic_std else bundle.epistemic_var
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    _show(axes[0], attenuation, "attenuation")
    _show(axes[1], bundle.prediction, f"generated dark-field (T={bundle.passes})")
    _show(axes[2], bundle.aleatoric_sigma, "aleatoric σ", cmap=UNCERTAINTY_CMAP, vmin=0,
          vmax=sigma_max or float(bundle.aleatoric_sigma.max()), colorbar=True)
    _show(axes[3], epi, "epistemic std" if epistemic_std else "epistemic variance", cmap=UNCERTAINTY_CMAP,
          vmin=0, vmax=epistemic_max or max(float(epi.max()), 1e-12), colorbar=True)
    fig.tight_layout()
    return _save(fig, path)


def save_stage_panel(path, target, bundles):
    """Rows per stage: prediction, alpha, beta, aleatoric, epistemic, with shared scales."""
    n = len(bundles)
    s_max = max(float(b.aleatoric_sigma.max()) for b in bundles)
    e_max = max(max(float(b.epistemic_var.max()) for b in bundles), 1e-12)
    a_max = max(float(b.alpha_mean.max()) for b in bundles)
    b_max = max(float(b.beta_mean.max()) for b in bundles)
    fig, axes = plt.subplots(n, 6, figsize=(15, 2.6 * n), squeeze=False)
    for row, b in enumerate(bundles):
        if target is not None:
            _show(axes[row, 0], target, "target")
        else:
            axes[row, 0].axis("off")
        _show(axes[row, 1], b.prediction, f"stage {b.stage} prediction")
        _show(axes[row, 2], b.alpha_mean, "α", cmap=UNCERTAINTY_CMAP, vmin=0, vmax=a_max, colorbar=True)
        _show(axes[row, 3], b.beta_mean, "β", cmap=UNCERTAINTY_CMAP, vmin=0, vmax=b_max, colorbar=True)
        _show(axes[row, 4], b.aleatoric_sigma, "aleatoric σ", cmap=UNCERTAINTY_CMAP, vmin=0, vmax=s_max, colorbar=True)
        _show(axes[row, 5], b.epistemic_var, "epistemic var", cmap=UNCERTAINTY_CMAP, vmin=0, vmax=e_max, colorbar=True)
    fig.tight_layout()
    return _save(fig, path)


def save_preview(path, attenuation, target, prediction, sigma, title=""):
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    _show(axes[0], attenuation, "attenuation")
    _show(axes[1], target, "target")
    _show(axes[2], prediction, f"{title} prediction")
    _show(axes[3], sigma, "σ", cmap=UNCERTAINTY_CMAP, vmin=0, vmax=float(sigma.max()), colorbar=True)
    fig.tight_layout()
    return _save(fig, path)
