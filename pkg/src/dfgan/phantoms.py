"""Deterministic attenuation / dark-field phantom pairs.

A stand-in for paired clinical data.  Attenuation shows a soft-tissue torso,
two darker lung fields, rib bands, a heart shadow and (optionally) implants
or cables.  The dark-field target is bright inside the lungs, modulated by
the same smooth texture field that shades the lungs in attenuation, and
near zero elsewhere; ribs and implants leave no trace in it.  Heteroscedastic
GGD noise is added with a known per-pixel sigma: a small floor outside the
lungs, rising from apex to base inside them (optionally mixed with the
texture), so the true aleatoric map is available for calibration checks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .ggd import GGDParams, ggd_sample
from .utils import derive_seed


@dataclass
class PairedSample:
    id: str
    attenuation: np.ndarray
    darkfield: np.ndarray | None = None
    split: str = "train"
    truth_noise_sigma: np.ndarray | None = None
    lung_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.darkfield is not None and self.darkfield.shape != self.attenuation.shape:
            raise ValueError(f"{self.id}: attenuation {self.attenuation.shape} and "
                             f"darkfield {self.darkfield.shape} differ in shape")
        if self.split not in ("train", "val", "test", "ood"):
            raise ValueError(f"{self.id}: unknown split {self.split!r}")

    @property
    def synthetic(self) -> bool:
        return self.truth_noise_sigma is not None


@dataclass
class PhantomConfig:
    size: int = 64
    n_samples: int = 200
    lung_offset_x: tuple = (0.34, 0.42)   # |centre x| of each lung, in half-widths
    lung_offset_y: tuple = (-0.05, 0.10)
    lung_semi_x: tuple = (0.24, 0.30)
    lung_semi_y: tuple = (0.48, 0.60)
    texture_scale: float = 0.10           # Gaussian smoothing sigma as a fraction of size
    noise_sigma: tuple = (0.01, 0.25)     # [sigma_lo, sigma_hi] of the injected noise
    noise_beta: float = 2.0
    noise_depth_weight: float = 1.0       # share of lung noise driven by apex-to-base depth vs texture
    rib_contrast: float = 0.12
    confounder_prob: float = 0.2
    stripes: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("lung_offset_x", "lung_offset_y", "lung_semi_x", "lung_semi_y", "noise_sigma"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2 or val[0] > val[1]:
                raise ValueError(f"{name} must be an ordered [low, high] pair, got {val}")
            setattr(self, name, val)
        if self.size < 32:
            raise ValueError(f"size must be >= 32, got {self.size}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.noise_sigma[0] > 0:
            raise ValueError("noise_sigma low end must be > 0")
        if not 0 <= self.confounder_prob <= 1:
            raise ValueError("confounder_prob must be in [0, 1]")
        if not 0 <= self.noise_depth_weight <= 1:
            raise ValueError("noise_depth_weight must be in [0, 1]")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d or {}) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**(d or {}))


def _soft_ellipse(yy, xx, cy, cx, ay, ax, edge=0.15):
    r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    return np.clip((1.0 - r2) / edge, 0.0, 1.0), r2 < 1.0


def _texture(rng, size, scale):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=scale * size, mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def _confounders(rng, yy, xx):
    out = np.zeros_like(yy)
    # cable: thin sinusoidal wire running top to bottom
    x0, amp, freq = rng.uniform(-0.6, 0.6), rng.uniform(0.05, 0.2), rng.uniform(2, 5)
    out += 0.35 * (np.abs(xx - (x0 + amp * np.sin(freq * yy))) < 0.025)
    if rng.random() < 0.5:
        # pacemaker can, upper chest
        cy, cx = rng.uniform(-0.7, -0.4), rng.uniform(-0.6, 0.6)
        out += 0.5 * ((np.abs(yy - cy) < 0.08) & (np.abs(xx - cx) < 0.12))
    for _ in range(rng.integers(1, 4)):
        # lead markers
        cy, cx = rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)
        out += 0.6 * (((yy - cy) ** 2 + (xx - cx) ** 2) < 0.03 ** 2)
    return out


def phantom_components(cfg: PhantomConfig, index: int, noise_realization: int = 0) -> dict:
    """All intermediate maps of phantom ``index`` (pure function of its arguments)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, index, "geometry"))
    n = cfg.size
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")

    torso, _ = _soft_ellipse(yy, xx, 0.05, 0.0, 0.95, 0.85, edge=0.3)
    lungs = np.zeros_like(yy)
    hard = np.zeros(yy.shape, dtype=bool)
    depth = np.zeros_like(yy)   # 0 at each lung apex, 1 at its base
    for side in (-1, 1):
        cy, cx = rng.uniform(*cfg.lung_offset_y), side * rng.uniform(*cfg.lung_offset_x)
        ay, ax = rng.uniform(*cfg.lung_semi_y), rng.uniform(*cfg.lung_semi_x)
        soft, inside = _soft_ellipse(yy, xx, cy, cx, ay, ax)
        lungs = np.maximum(lungs, soft)
        hard |= inside
        depth = np.where(inside, np.clip((yy - (cy - ay)) / (2 * ay), 0, 1), depth)
    heart, _ = _soft_ellipse(yy, xx, rng.uniform(0.2, 0.35), rng.uniform(-0.15, 0.0), 0.22, 0.25, edge=0.5)
    texture = _texture(rng, n, cfg.texture_scale)
    n_ribs, phase = rng.uniform(4.5, 6.0), rng.uniform(0, 1)
    ribs = torso * (0.5 + 0.5 * np.cos(2 * np.pi * (yy * n_ribs / 2 + phase) + 2.0 * xx ** 2)) ** 6

    attenuation = 0.08 + 0.45 * torso - 0.3 * lungs * (0.3 + 0.7 * texture) + cfg.rib_contrast * ribs + 0.2 * heart
    if rng.random() < cfg.confounder_prob:
        attenuation = attenuation + _confounders(rng, yy, xx)
    attenuation = np.clip(attenuation, 0.0, 1.0)

    lung_signal = lungs * (1.0 - 0.6 * heart)
    clean = lung_signal * (0.45 + 0.3 * texture) + 0.04 * torso * (1.0 - lungs)
    lo, hi = cfg.noise_sigma
    # lung noise rises from apex to base with a texture-driven component; floor elsewhere
    sigma = lo + (hi - lo) * hard * (cfg.noise_depth_weight * depth + (1 - cfg.noise_depth_weight) * texture)

    params = GGDParams.from_sigma(sigma, cfg.noise_beta)
    noise = ggd_sample(sigma.shape, params, seed=derive_seed(cfg.seed, index, "noise", noise_realization))
    darkfield = clean + noise
    if cfg.stripes:
        stripe_rng = np.random.default_rng(derive_seed(cfg.seed, index, "stripes"))
        darkfield = darkfield + lungs * 0.05 * stripe_rng.standard_normal((n, 1)).repeat(n, axis=1)
    darkfield = np.clip(darkfield, 0.0, 1.0)

    return {
        "attenuation": attenuation, "darkfield": darkfield, "clean_darkfield": clean,
        "noise": noise, "sigma": sigma, "lung_mask": hard, "texture": texture,
    }


def phantom_id(index: int) -> str:
    return f"phantom_{index:05d}"


def generate_phantom_pair(cfg: PhantomConfig, index: int, noise_realization: int = 0) -> PairedSample:
    c = phantom_components(cfg, index, noise_realization)
    return PairedSample(
        id=phantom_id(index), attenuation=c["attenuation"], darkfield=c["darkfield"],
        split="train", truth_noise_sigma=c["sigma"], lung_mask=c["lung_mask"],
    )


def generate_phantoms(cfg: PhantomConfig) -> list[PairedSample]:
    return [generate_phantom_pair(cfg, i) for i in range(cfg.n_samples)]
