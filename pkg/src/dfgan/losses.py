"""Training objective: least-squares adversarial terms, GGD fidelity NLL, residual consistency.

Sign convention: every term is non-negative except the fidelity NLL, which
carries ``log alpha`` and goes negative once alpha is small.  The generator's
adversarial term is ``0.5 * mean((D(fake) - 1)^2)``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossWeights


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


def _check_finite(name, value):
    v = float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)


def box_blur_torch(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Box blur of ``(N, C, H, W)`` with edge replication (matches ``core_image.box_blur``)."""
    if kernel <= 0 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    if kernel > min(x.shape[-2:]):
        raise ValueError(f"kernel {kernel} larger than image {tuple(x.shape[-2:])}")
    if kernel == 1:
        return x
    r = kernel // 2
    return F.avg_pool2d(F.pad(x, (r, r, r, r), mode="replicate"), kernel, stride=1)


def local_residual_torch(x: torch.Tensor, kernel: int) -> torch.Tensor:
    return x - box_blur_torch(x, kernel)


def residual_consistency_loss(pred, target, kernel: int = 5) -> torch.Tensor:
    """Mean absolute difference between the high-frequency residuals of ``pred`` and ``target``."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target = pred[None, None], target[None, None]
    return (local_residual_torch(pred, kernel) - local_residual_torch(target, kernel)).abs().mean()


def adversarial_generator_loss(d_fake) -> torch.Tensor:
    return 0.5 * ((d_fake - 1) ** 2).mean()


def generator_loss(d_scores_fake, nll_map, residual_term, weights: LossWeights):
    """``L_G = L_adv + lambda_fidelity * mean(nll) + lambda_residual * residual``.

    Returns ``(total, breakdown)`` where ``breakdown`` holds plain floats for logging.
    """
    adv = adversarial_generator_loss(torch.as_tensor(d_scores_fake))
    nll = torch.as_tensor(nll_map).mean()
    res = torch.as_tensor(residual_term)
    for name, v in (("L_adv", adv), ("L_nll", nll), ("L_res", res)):
        _check_finite(name, v.detach())
    total = adv + weights.lambda_fidelity * nll + weights.lambda_residual * res
    breakdown = {name: float(v.detach()) for name, v in
                 (("L_adv", adv), ("L_nll", nll), ("L_res", res), ("L_total", total))}
    return total, breakdown


def discriminator_loss(d_scores_real, d_scores_fake) -> torch.Tensor:
    d_real = torch.as_tensor(d_scores_real)
    d_fake = torch.as_tensor(d_scores_fake)
    loss = 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    _check_finite("L_D", loss.detach())
    return loss
