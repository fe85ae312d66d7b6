"""Self-describing checkpoint container.

A checkpoint is a ``torch.save`` dict with the format tag and version, the
model config (enough to rebuild the architecture), the number of trained
stages, the input image shape, the run config echo, per-stage parameter
blocks and their checksums, and the discriminator state.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .config import ModelConfig
from .network import PatchDiscriminator, ProgressiveGenerator, stage_checksums

FORMAT = "dfgan-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def build_models(cfg: ModelConfig):
    return ProgressiveGenerator(cfg), PatchDiscriminator(cfg.disc_width, cfg.disc_downsamplings)


def save_checkpoint(path, gen: ProgressiveGenerator, disc: PatchDiscriminator | None, *,
                    trained_stages: int, image_shape, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "n_stages": gen.n_stages,
        "trained_stages": int(trained_stages),
        "image_shape": [int(s) for s in image_shape],
        "model_config": dataclasses.asdict(gen.cfg),
        "config": config or {},
        "stages": [{k: v.detach().cpu().clone() for k, v in s.state_dict().items()} for s in gen.stages],
        "stage_checksums": stage_checksums(gen),
        "discriminator": None if disc is None else {k: v.detach().cpu().clone() for k, v in disc.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    return payload


def load_checkpoint(path, model_cfg: ModelConfig | None = None):
    """Rebuild ``(generator, discriminator, payload)`` from ``path``.

    If ``model_cfg`` is given it must describe the same architecture as the
    stored one; any parameter shape mismatch raises :class:`CheckpointError`.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig(**payload["model_config"])
    cfg = model_cfg or stored
    if len(payload["stages"]) != cfg.n_stages:
        raise CheckpointError(f"{path}: checkpoint has {len(payload['stages'])} stages, "
                              f"architecture expects {cfg.n_stages}")
    gen, disc = build_models(cfg)
    try:
        for stage, state in zip(gen.stages, payload["stages"]):
            stage.load_state_dict(state, strict=True)
        if payload["discriminator"] is not None:
            disc.load_state_dict(payload["discriminator"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: checkpoint does not match the architecture ({exc})") from exc
    if stage_checksums(gen) != payload["stage_checksums"]:
        raise CheckpointError(f"{path}: stage checksums do not match stored parameters")
    return gen, disc, payload
