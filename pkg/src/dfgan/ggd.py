"""Generalized Gaussian distribution: effective sigma, negative log-likelihood, sampling.

The density used throughout is the canonical zero-mean GGD

    p(x | mu, alpha, beta) = beta / (2 alpha Gamma(1/beta)) * exp(-(|x - mu| / alpha) ** beta)

with per-pixel scale ``alpha`` and shape ``beta`` (beta=2 Gaussian, beta=1
Laplacian, beta<1 heavier tails).  Its standard deviation is

    sigma = alpha * sqrt(Gamma(3/beta) / Gamma(1/beta)).

Numpy functions serve the image/phantom side; the ``*_torch`` twins are the
differentiable versions used in training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import gammaln

BETA_MIN = 0.3
BETA_MAX = 10.0
ABS_EPS = 1e-12
LOG2 = math.log(2.0)


@dataclass
class GGDParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha, self.beta = np.broadcast_arrays(self.alpha, self.beta)
        self.validate()

    def validate(self, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX):
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha <= 0):
            raise ValueError("alpha must be finite and strictly positive")
        if np.any(self.beta < beta_min) or np.any(self.beta > beta_max) or not np.all(np.isfinite(self.beta)):
            raise ValueError(f"beta must lie in [{beta_min}, {beta_max}]")

    @property
    def shape(self):
        return self.alpha.shape

    @classmethod
    def from_sigma(cls, sigma, beta) -> "GGDParams":
        """Scale map that gives standard deviation ``sigma`` at shape ``beta``."""
        sigma = np.asarray(sigma, dtype=np.float64)
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), sigma.shape)
        return cls(alpha=sigma / _sigma_factor(beta), beta=beta)


def _sigma_factor(beta):
    return np.exp(0.5 * (gammaln(3.0 / beta) - gammaln(1.0 / beta)))


def effective_sigma(params: GGDParams) -> np.ndarray:
    params.validate()
    return params.alpha * _sigma_factor(params.beta)


def ggd_nll(target, pred, params: GGDParams):
    """Per-pixel GGD negative log-likelihood and its mean.

    Returns ``(nll_map, mean)``.  The full normalising constant (including
    ``log 2``) is kept so values are comparable between runs.
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape or target.shape != params.shape:
        raise ValueError(f"shape mismatch: target {target.shape}, pred {pred.shape}, params {params.shape}")
    params.validate()
    a, b = params.alpha, params.beta
    resid = np.sqrt((target - pred) ** 2 + ABS_EPS)
    nll = (resid / a) ** b + np.log(a) + gammaln(1.0 / b) - np.log(b) + LOG2
    return nll, float(nll.mean())


def ggd_sample(shape, params: GGDParams, seed) -> np.ndarray:
    """Zero-mean GGD noise via the Gamma-power transform.

    ``|x| / alpha = G ** (1/beta)`` with ``G ~ Gamma(1/beta, 1)`` and an
    independent random sign.  Deterministic for a given ``seed``.
    """
    shape = tuple(shape)
    alpha = np.broadcast_to(params.alpha, shape)
    beta = np.broadcast_to(params.beta, shape)
    params.validate()
    rng = np.random.default_rng(seed)
    g = rng.standard_gamma(1.0 / beta, size=shape)
    sign = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
    return sign * alpha * g ** (1.0 / beta)


def effective_sigma_torch(alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return alpha * torch.exp(0.5 * (torch.lgamma(3.0 / beta) - torch.lgamma(1.0 / beta)))


def ggd_nll_torch(target: torch.Tensor, pred: torch.Tensor,
                  alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Differentiable per-pixel NLL map (same formula as :func:`ggd_nll`)."""
    resid = torch.sqrt((target - pred) ** 2 + ABS_EPS)
    return (resid / alpha) ** beta + torch.log(alpha) + torch.lgamma(1.0 / beta) - torch.log(beta) + LOG2
