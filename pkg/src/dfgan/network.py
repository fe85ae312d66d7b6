"""Progressive uncertainty-aware generator and conditional patch discriminator.

Each generator stage is a U-Net with three 1x1 output heads: the prediction
(sigmoid, in [0, 1]), the GGD scale alpha (softplus, > 0) and the GGD shape
beta (scaled sigmoid into [beta_min, beta_max]).  Stage 1 sees the
attenuation image; stage k > 1 sees attenuation, the previous prediction and
the min-max normalised previous sigma stacked as channels, and refines the
previous prediction, alpha and beta by adding offsets in each head's
pre-activation space.  Those offsets start at zero, so a fresh stage
reproduces its predecessor exactly.

Dropout in the decoder ignores ``module.train()/eval()`` so the same network
serves Monte Carlo inference; switch it off with :func:`set_dropout`.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .ggd import effective_sigma_torch
from .utils import module_checksum

ALPHA_FLOOR = 1e-4
LOGIT_CLAMP = 1e-4


def _inv_softplus(y):
    if isinstance(y, torch.Tensor):
        return y + torch.log(-torch.expm1(-y))
    return math.log(math.expm1(y))


class StageOutput(NamedTuple):
    pred: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return effective_sigma_torch(self.alpha, self.beta)


class MCDropout(nn.Module):
    """Element-wise dropout that stays active in eval mode (MC dropout)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)

    def forward(self, x):
        if self.p <= 0:
            return x
        return F.dropout(x, self.p, training=True)

    def extra_repr(self):
        return f"p={self.p}"


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, dropout=0.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(cout), nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.LeakyReLU(0.2),
        )
        self.drop = MCDropout(dropout) if dropout is not None else None

    def forward(self, x):
        x = self.body(x)
        return self.drop(x) if self.drop is not None else x


class GeneratorStage(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig, refine: bool):
        super().__init__()
        self.refine = refine
        self.levels = cfg.levels
        self.beta_min, self.beta_max = cfg.beta_min, cfg.beta_max
        widths = [cfg.base_width * 2 ** i for i in range(cfg.levels)]
        self.enc = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.enc.append(ConvBlock(prev, w, dropout=None))
            prev = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(cfg.levels - 1, 0, -1):
            self.up.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.dec.append(ConvBlock(2 * widths[i - 1], widths[i - 1], dropout=cfg.dropout_rate))
        self.head = nn.Conv2d(widths[0], 3, 1)
        self._init_heads(cfg)

    def _init_heads(self, cfg: ModelConfig):
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            if self.refine:
                # start as an exact copy of the previous stage's outputs
                self.head.weight.zero_()
                self.head.bias.zero_()
                return
            self.head.bias[1] = _inv_softplus(cfg.alpha_init - ALPHA_FLOOR)
            frac = self._beta_frac(2.0)
            self.head.bias[2] = math.log(frac / (1 - frac))

    def _beta_frac(self, beta):
        return (beta - self.beta_min) / (self.beta_max - self.beta_min)

    def _pre_activations(self, prev: StageOutput):
        """Inverse of the three head activations applied to ``prev``."""
        pred = torch.logit(prev.pred.clamp(LOGIT_CLAMP, 1 - LOGIT_CLAMP))
        alpha = _inv_softplus((prev.alpha - ALPHA_FLOOR).clamp_min(1e-12))
        beta = torch.logit(self._beta_frac(prev.beta).clamp(LOGIT_CLAMP, 1 - LOGIT_CLAMP))
        return torch.cat([pred, alpha, beta], dim=1)

    def forward(self, x, prev: StageOutput | None = None) -> StageOutput:
        h, w = x.shape[-2:]
        mult = 2 ** (self.levels - 1)
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < self.levels - 1:
                skips.append(x)
                x = F.avg_pool2d(x, 2)
        for up, block in zip(self.up, self.dec):
            x = block(torch.cat([up(x), skips.pop()], dim=1))
        raw = self.head(x)[..., :h, :w]
        if self.refine:
            raw = raw + self._pre_activations(prev)
        pred = torch.sigmoid(raw[:, 0:1])
        alpha = F.softplus(raw[:, 1:2]) + ALPHA_FLOOR
        beta = self.beta_min + (self.beta_max - self.beta_min) * torch.sigmoid(raw[:, 2:3])
        beta = beta.clamp(self.beta_min, self.beta_max)
        return StageOutput(pred, alpha, beta)


def attention_from_sigma(sigma):
    """Per-image min-max normalisation of a sigma map into [0, 1].

    Works on a single ``(H, W)`` map or a batch ``(N, 1, H, W)``; a constant
    map becomes all 0.5.
    """
    t = torch.as_tensor(sigma)
    flat = t.reshape(-1, t.shape[-2] * t.shape[-1]) if t.dim() > 2 else t.reshape(1, -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.full_like(flat, 0.5))
    return out.reshape(t.shape)


class ProgressiveGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList(
            [GeneratorStage(1, cfg, refine=False)]
            + [GeneratorStage(3, cfg, refine=True) for _ in range(cfg.n_stages - 1)]
        )

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage_input(self, k: int, x, prev: StageOutput | None):
        if k == 1:
            return x
        return torch.cat([x, prev.pred, attention_from_sigma(prev.sigma)], dim=1)

    def stage_forward(self, k: int, x, prev: StageOutput | None = None) -> StageOutput:
        """Run stage ``k`` (1-based) given the output of stage ``k - 1``."""
        if k > 1 and prev is None:
            raise ValueError(f"stage {k} needs the previous stage's output")
        if prev is not None and prev.pred.shape != x.shape:
            raise ValueError(f"shape mismatch: input {tuple(x.shape)} vs attention {tuple(prev.pred.shape)}")
        stage = self.stages[k - 1]
        return stage(self.stage_input(k, x, prev), prev if k > 1 else None)

    def forward(self, x, upto: int | None = None) -> list[StageOutput]:
        upto = self.n_stages if upto is None else upto
        if not 1 <= upto <= self.n_stages:
            raise ValueError(f"stage {upto} out of range 1..{self.n_stages}")
        outs, prev = [], None
        for k in range(1, upto + 1):
            prev = self.stage_forward(k, x, prev)
            outs.append(prev)
        return outs


def stage_forward(gen: ProgressiveGenerator, k: int, image, attention=None, prev_pred=None,
                  prev_alpha=None, prev_beta=None) -> StageOutput:
    """Single-stage forward on one image given explicit attention/previous prediction.

    ``image``, ``attention`` and ``prev_pred`` are ``(H, W)`` arrays or tensors.
    The previous alpha/beta maps that stage ``k`` refines default to the
    stage-1 initial values (``alpha_init`` and beta = 2).
    """
    x = torch.as_tensor(image, dtype=torch.float32)
    x = x.reshape(1, 1, *x.shape[-2:])
    if k == 1:
        if attention is not None:
            _check_same(x, attention)
        return gen.stages[0](x)
    if attention is None or prev_pred is None:
        raise ValueError(f"stage {k} needs attention and the previous prediction")
    att = _check_same(x, attention)
    pred = _check_same(x, prev_pred)
    alpha = _check_same(x, prev_alpha) if prev_alpha is not None else torch.full_like(x, gen.cfg.alpha_init)
    beta = _check_same(x, prev_beta) if prev_beta is not None else torch.full_like(x, 2.0)
    return gen.stages[k - 1](torch.cat([x, pred, att], dim=1), StageOutput(pred, alpha, beta))


def _check_same(x, other):
    t = torch.as_tensor(other, dtype=x.dtype)
    if t.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"shape mismatch: input {tuple(x.shape[-2:])} vs {tuple(t.shape[-2:])}")
    return t.reshape(x.shape)


def set_dropout(module: nn.Module, p: float):
    for m in module.modules():
        if isinstance(m, MCDropout):
            m.p = float(p)


def freeze_stages_below(gen: ProgressiveGenerator, k: int):
    """Freeze stages ``1..k-1``; stages ``k..n`` stay trainable.  Idempotent."""
    if not 1 <= k <= gen.n_stages:
        raise ValueError(f"stage {k} out of range 1..{gen.n_stages}")
    for i, stage in enumerate(gen.stages, start=1):
        stage.requires_grad_(i >= k)


def trainable_parameters(module: nn.Module):
    return [p for p in module.parameters() if p.requires_grad]


def stage_checksums(gen: ProgressiveGenerator) -> list[str]:
    return [module_checksum(s) for s in gen.stages]


class PatchDiscriminator(nn.Module):
    """Conditional critic over ``(candidate, condition)`` stacked as two channels.

    Output grid is the input size divided by ``2 ** downsamplings`` (floored).
    """

    def __init__(self, width: int = 32, downsamplings: int = 3):
        super().__init__()
        layers, cin = [], 2
        for i in range(downsamplings):
            cout = width * 2 ** i
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if i > 0:
                layers.append(_norm(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.factor = 2 ** downsamplings

    def forward(self, candidate, condition):
        if candidate.shape != condition.shape:
            raise ValueError(f"shape mismatch: candidate {tuple(candidate.shape)} vs condition {tuple(condition.shape)}")
        return self.net(torch.cat([candidate, condition], dim=1))


def discriminator_forward(d: PatchDiscriminator, candidate, condition):
    return d(candidate, condition)
