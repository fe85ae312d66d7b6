"""Stage-wise adversarial training of the progressive generator.

Each stage trains only its own generator block (earlier blocks frozen, their
outputs recomputed per sample under a fixed seed) against a conditional
patch discriminator, with Adam, a per-epoch cosine-annealed learning rate,
and best-checkpoint selection on validation NLL.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoints import save_checkpoint
from .config import AugmentConfig, StageTrainConfig
from .core_image import contrast_jitter, geometric_transform, rotate_small
from .ggd import ggd_nll_torch
from .losses import NonFiniteLossError, discriminator_loss, generator_loss, residual_consistency_loss
from .metrics import stage_report
from .network import StageOutput, freeze_stages_below, set_dropout, stage_checksums, trainable_parameters
from .phantoms import PairedSample
from .utils import derive_seed, torch_seed

log = logging.getLogger(__name__)

VAL_CHUNK = 16


class TrainingAborted(RuntimeError):
    def __init__(self, message, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainReport:
    stage: int
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = math.inf
    final_val_metrics: dict = field(default_factory=dict)
    checkpoint: str | None = None
    wall_time: float = 0.0


def cosine_lr(epoch: int, epochs: int, lr0: float, floor: float) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to ``floor`` at epoch ``epochs``."""
    if epoch == 0:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1 + math.cos(math.pi * epoch / epochs))


def draw_augmentation(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[str, float, float]:
    """``(geometric op, contrast factor, small-rotation angle)`` for one sample."""
    ops = list(cfg.probs)
    # fixed number of draws per call keeps the stream aligned whatever op is chosen
    op = ops[rng.choice(len(ops), p=[cfg.probs[o] for o in ops])]
    factor = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    angle = rng.uniform(-cfg.small_angle_deg, cfg.small_angle_deg)
    return op, factor, angle


def augment_pair(sample: PairedSample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> PairedSample:
    """One joint geometric op on every map of the pair; contrast jitter on attenuation only."""
    cfg = cfg or AugmentConfig()
    op, factor, angle = draw_augmentation(rng, cfg)
    h, w = sample.attenuation.shape
    if op in ("rot90_1", "rot90_3") and h != w:
        op = "rot90_2"

    def geo(img, is_mask=False):
        if img is None:
            return None
        if op == "small_rotation":
            out = rotate_small(np.asarray(img, dtype=np.float64), angle)
            return out > 0.5 if is_mask else out
        return geometric_transform(img, op)

    att = geo(sample.attenuation)
    if cfg.jitter > 0:
        att = contrast_jitter(att, factor)
    return PairedSample(
        id=sample.id, attenuation=att, darkfield=geo(sample.darkfield), split=sample.split,
        truth_noise_sigma=geo(sample.truth_noise_sigma), lung_mask=geo(sample.lung_mask, is_mask=True),
    )


def _stack(images, device):
    return torch.from_numpy(np.stack(images).astype(np.float32)[:, None]).to(device)


def frozen_outputs(gen, k: int, x: torch.Tensor, seeds) -> StageOutput | None:
    """Outputs of stage ``k - 1`` for each sample, each under its own fixed dropout seed."""
    if k == 1:
        return None
    outs = []
    with torch.no_grad():
        for i, seed in enumerate(seeds):
            with torch_seed(seed):
                outs.append(gen(x[i:i + 1], upto=k - 1)[-1])
    return StageOutput(*(torch.cat(parts) for parts in zip(*outs)))


def validate(gen, k: int, val: list[PairedSample], seed: int, device) -> dict:
    """Stage-``k`` validation under stochastic dropout with a fixed seed."""
    nll_sum, n_pix, preds = 0.0, 0, []
    with torch.no_grad(), torch_seed(derive_seed(seed, "validation")):
        for start in range(0, len(val), VAL_CHUNK):
            chunk = val[start:start + VAL_CHUNK]
            x = _stack([s.attenuation for s in chunk], device)
            y = _stack([s.darkfield for s in chunk], device)
            out = gen(x, upto=k)[-1]
            nll = ggd_nll_torch(y, out.pred, out.alpha, out.beta)
            nll_sum += float(nll.double().sum())
            n_pix += nll.numel()
            preds.extend(out.pred[:, 0].double().cpu().numpy())
    rep = stage_report([(p, s.darkfield) for p, s in zip(preds, val)], stage=k, ids=[s.id for s in val])
    return {"nll": nll_sum / n_pix, **{f"{m}": v for m, v in rep.mean.items()}}


def make_optimizers(gen, disc, cfg: StageTrainConfig):
    """Adam for the trainable parameters of stage ``cfg.stage_index`` and for the discriminator."""
    params = trainable_parameters(gen.stages[cfg.stage_index - 1])
    opt_g = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    return opt_g, opt_d


class JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a") if path is not None else None

    def write(self, record: dict):
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train_stage(gen, disc, train: list[PairedSample], val: list[PairedSample], cfg: StageTrainConfig, *,
                augment: AugmentConfig | None = None, run_dir=None, config_echo: dict | None = None,
                device=None, logger: JsonlLog | None = None, previews: bool = True) -> TrainReport:
    if not train:
        raise ValueError("training set is empty")
    device = torch.device(device or "cpu")
    k = cfg.stage_index
    if k > gen.n_stages:
        raise ValueError(f"stage {k} out of range 1..{gen.n_stages}")
    t0 = time.perf_counter()
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = run_dir / "checkpoints" if run_dir is not None else None
    own_log = logger is None
    logger = logger or JsonlLog(run_dir / "train_log.jsonl" if run_dir is not None else None)
    image_shape = train[0].attenuation.shape

    gen.to(device)
    disc.to(device)
    freeze_stages_below(gen, k)
    stage = gen.stages[k - 1]
    set_dropout(stage, cfg.dropout_rate)
    frozen_before = stage_checksums(gen)[:k - 1]

    torch.manual_seed(derive_seed(cfg.seed, k, "torch"))
    rng = np.random.default_rng(derive_seed(cfg.seed, k, "data"))
    opt_g, opt_d = make_optimizers(gen, disc, cfg)

    def save(name, trained):
        if ckpt_dir is None:
            return None
        return save_checkpoint(ckpt_dir / name, gen, disc, trained_stages=trained,
                               image_shape=image_shape, config=config_echo)

    sample_seeds = [derive_seed(cfg.seed, k, "frozen", i) for i in range(len(train))]
    last_good = save("last_good.pt", k - 1)
    report = TrainReport(stage=k)
    best_state = copy.deepcopy(stage.state_dict())
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.lr_floor)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            sums, n_batches = {}, 0
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = [augment_pair(train[i], rng, augment) for i in idx]
                x = _stack([s.attenuation for s in batch], device)
                y = _stack([s.darkfield for s in batch], device)
                prev = frozen_outputs(gen, k, x, [sample_seeds[i] for i in idx])
                out = gen.stage_forward(k, x, prev)

                loss_d = discriminator_loss(disc(y, x), disc(out.pred.detach(), x))
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()

                nll = ggd_nll_torch(y, out.pred, out.alpha, out.beta)
                res = residual_consistency_loss(out.pred, y, cfg.residual_kernel)
                loss_g, parts = generator_loss(disc(out.pred, x), nll, res, cfg.weights)
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()

                parts["L_D"] = loss_d.item()
                logger.write({"kind": "step", "stage": k, "epoch": epoch, "step": step, "lr": lr, **parts})
                for key, v in parts.items():
                    sums[key] = sums.get(key, 0.0) + v
                n_batches += 1
                step += 1

            record = {"kind": "epoch", "stage": k, "epoch": epoch, "lr": lr,
                      "train": {key: v / n_batches for key, v in sums.items()}}
            if val:
                record["val"] = validate(gen, k, val, cfg.seed, device)
                score = record["val"]["nll"]
            else:
                score = -epoch   # no validation data: keep the latest epoch
            if not math.isfinite(score):
                raise NonFiniteLossError("val_nll", score)
            logger.write(record)
            report.epochs.append(record)
            if score < report.best_val_nll:
                report.best_val_nll, report.best_epoch = score, epoch
                best_state = copy.deepcopy(stage.state_dict())
                report.checkpoint = str(save(f"stage{k}.pt", k)) if ckpt_dir is not None else None
            last_good = save("last_good.pt", k)
            if previews and run_dir is not None and val:
                _preview(gen, k, val[0], run_dir / "previews" / f"stage{k}_epoch{epoch:03d}.png", cfg.seed, device)
    except NonFiniteLossError as exc:
        logger.write({"kind": "abort", "stage": k, "step": step, "component": exc.component})
        if own_log:
            logger.close()
        raise TrainingAborted(f"stage {k} aborted at step {step}: {exc}", last_good) from exc

    stage.load_state_dict(best_state)
    if stage_checksums(gen)[:k - 1] != frozen_before:
        raise RuntimeError("frozen stages changed during training")
    if val:
        report.final_val_metrics = validate(gen, k, val, cfg.seed, device)
    report.wall_time = time.perf_counter() - t0
    if own_log:
        logger.close()
    return report


def train_progressive(gen, disc, train, val, cfgs, **kwargs) -> list[TrainReport]:
    """Train stages in order; each stage sees the frozen, best-checkpoint earlier stages."""
    cfgs = list(cfgs)
    indices = [c.stage_index for c in cfgs]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ValueError(f"stage configs must be in increasing stage order, got {indices}")
    return [train_stage(gen, disc, train, val, cfg, **kwargs) for cfg in cfgs]


def _preview(gen, k, sample, path, seed, device):
    from .panels import save_preview

    with torch.no_grad(), torch_seed(derive_seed(seed, "preview")):
        out = gen(_stack([sample.attenuation], device), upto=k)[-1]
    save_preview(path, sample.attenuation, sample.darkfield,
                 out.pred[0, 0].cpu().numpy(), out.sigma[0, 0].cpu().numpy(), title=f"stage {k}")
