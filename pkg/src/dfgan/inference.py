"""Monte Carlo dropout inference and per-stage evaluation.

For ``T`` passes with dropout left on, the bundle holds the pixel mean of
the stage prediction, its population variance over passes (epistemic), and
the pass-mean of the effective GGD sigma (aleatoric).  Pass ``t`` runs under
seed ``derive_seed(seed, t)``, so any pass can be replayed on its own.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import spearmanr

from .datasets import CODE_MAX
from .metrics import stage_report
from .utils import derive_seed, torch_seed

MAPS = ("prediction", "aleatoric_sigma", "epistemic_var", "alpha_mean", "beta_mean")
FILE_NAMES = {"prediction": "prediction", "aleatoric_sigma": "aleatoric", "epistemic_var": "epistemic",
              "alpha_mean": "alpha", "beta_mean": "beta"}
CHUNK = 32


@dataclass
class UncertaintyBundle:
    prediction: np.ndarray
    aleatoric_sigma: np.ndarray
    epistemic_var: np.ndarray
    alpha_mean: np.ndarray
    beta_mean: np.ndarray
    passes: int
    stage: int
    seed: int


def _as_batch(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) input, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValueError("inputs must be finite and within [0, 1]")
    return torch.from_numpy(arr[:, None])


def _shifted_moments(stack):
    # moments about the first pass: identical passes give exactly zero variance
    d = stack - stack[0]
    mean_d = d.mean(axis=0)
    var = np.clip((d * d).mean(axis=0) - mean_d * mean_d, 0.0, None)
    return stack[0] + mean_d, var


def stage_infer_batch(gen, images, k: int, passes: int, seed: int, device=None) -> list[UncertaintyBundle]:
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    if not 1 <= k <= gen.n_stages:
        raise ValueError(f"stage {k} out of range 1..{gen.n_stages}")
    x_all = _as_batch(images)
    if device is not None:
        x_all = x_all.to(device)
    preds, sigmas, alphas, betas = [], [], [], []
    with torch.no_grad():
        for t in range(passes):
            with torch_seed(derive_seed(seed, t)):
                outs = [gen(x_all[i:i + CHUNK], upto=k)[-1] for i in range(0, len(x_all), CHUNK)]
            grab = lambda f: torch.cat([f(o) for o in outs])[:, 0].double().cpu().numpy()  # noqa: E731
            preds.append(grab(lambda o: o.pred))
            sigmas.append(grab(lambda o: o.sigma))
            alphas.append(grab(lambda o: o.alpha))
            betas.append(grab(lambda o: o.beta))
    prediction, var = _shifted_moments(np.stack(preds))
    sigma = np.mean(np.stack(sigmas), axis=0)
    alpha = np.mean(np.stack(alphas), axis=0)
    beta = np.mean(np.stack(betas), axis=0)
    return [UncertaintyBundle(prediction[i], sigma[i], var[i], alpha[i], beta[i], passes, k, seed)
            for i in range(len(prediction))]


def stage_infer(gen, image, k: int, passes: int = 20, seed: int = 0, device=None) -> UncertaintyBundle:
    """MC inference truncated after stage ``k``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a single (H, W) image, got shape {image.shape}")
    return stage_infer_batch(gen, image, k, passes, seed, device)[0]


def mc_infer(gen, image, passes: int = 20, seed: int = 0, device=None) -> UncertaintyBundle:
    """MC inference through the full cascade."""
    return stage_infer(gen, image, gen.n_stages, passes, seed, device)


def evaluate_stages(gen, samples, stages=None, passes: int = 20, seed: int = 0, device=None):
    """Table-style metric reports (one per stage) using the MC-mean prediction.

    Returns ``(reports, bundles_by_stage)``.
    """
    samples = [s for s in samples if s.darkfield is not None]
    if not samples:
        raise ValueError("no paired samples to evaluate")
    stages = list(stages or range(1, gen.n_stages + 1))
    images = np.stack([s.attenuation for s in samples])
    reports, bundles = [], {}
    for k in stages:
        bs = stage_infer_batch(gen, images, k, passes, seed, device)
        bundles[k] = bs
        reports.append(stage_report([(b.prediction, s.darkfield) for b, s in zip(bs, samples)],
                                    stage=k, ids=[s.id for s in samples]))
    return reports, bundles


def aleatoric_calibration(bundles, samples) -> float:
    """Spearman correlation of predicted sigma vs. true noise sigma over pooled lung pixels."""
    pred, truth = [], []
    for b, s in zip(bundles, samples):
        if s.truth_noise_sigma is None:
            raise ValueError(f"{s.id}: no ground-truth noise map")
        mask = s.lung_mask if s.lung_mask is not None else np.ones_like(s.truth_noise_sigma, dtype=bool)
        pred.append(b.aleatoric_sigma[mask])
        truth.append(s.truth_noise_sigma[mask])
    return float(spearmanr(np.concatenate(pred), np.concatenate(truth)).statistic)


def _encoding_range(arr, name):
    if name == "prediction":
        return 0.0, 1.0
    lo, hi = float(arr.min()), float(arr.max())
    return lo, (hi if hi > lo else lo + 1.0)


def save_bundle(bundle: UncertaintyBundle, out_dir, *, model_checksum: str, sample_id: str | None = None) -> Path:
    """Write each map as 16-bit PNG (linear range in meta.json) plus exact float32 ``.npy``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoding = {}
    for name in MAPS:
        arr = getattr(bundle, name)
        lo, hi = _encoding_range(arr, name)
        codes = np.round(np.clip((arr - lo) / (hi - lo), 0, 1) * CODE_MAX).astype(np.uint16)
        Image.fromarray(codes).save(out / f"{FILE_NAMES[name]}.png")
        np.save(out / f"{FILE_NAMES[name]}.npy", arr.astype(np.float32))
        encoding[FILE_NAMES[name]] = {"low": lo, "high": hi, "code_max": CODE_MAX}
    meta = {"id": sample_id, "passes": bundle.passes, "stage": bundle.stage, "seed": bundle.seed,
            "model_checksum": model_checksum, "shape": list(bundle.prediction.shape),
            "epistemic": "population variance over passes", "encoding": encoding}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(bundle_dir) -> UncertaintyBundle:
    d = Path(bundle_dir)
    meta = json.loads((d / "meta.json").read_text())
    maps = {name: np.load(d / f"{FILE_NAMES[name]}.npy").astype(np.float64) for name in MAPS}
    return UncertaintyBundle(**maps, passes=meta["passes"], stage=meta["stage"], seed=meta["seed"])
