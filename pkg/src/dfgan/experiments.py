"""Scaled-down phantom experiment: generate, split, train all stages, evaluate per stage.

Used by the acceptance suite and by ``scripts/desk_experiment.py``.  Training uses the same
init seed, split and stage configs as ``dfgan train``; the phantoms stay in memory as float
arrays instead of going through 16-bit PNG files, so weights differ from a CLI run at the
quantisation level.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoints import build_models
from .config import RunConfig
from .datasets import assign_splits, by_split
from .inference import aleatoric_calibration, evaluate_stages
from .metrics import MetricsReport, format_table
from .network import stage_checksums
from .phantoms import PairedSample, PhantomConfig, generate_phantoms
from .trainer import train_stage
from .utils import derive_seed, torch_seed


@dataclass
class DeskResult:
    gen: object
    disc: object
    train: list[PairedSample]
    val: list[PairedSample]
    test: list[PairedSample]
    stage1_trained: str                 # stage-1 checksum right after its own training
    checksums: list[str]                # all stage checksums at the end
    train_reports: list
    log_path: Path | None
    seconds: float
    reports: list[MetricsReport] = field(default_factory=list)
    bundles: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)


def split_phantoms(phantom: PhantomConfig, split_seed: int):
    samples = generate_phantoms(phantom)
    splits = assign_splits([s.id for s in samples], split_seed)
    for s in samples:
        s.split = splits[s.id]
    return by_split(samples, "train"), by_split(samples, "val"), by_split(samples, "test")


def train_desk(cfg: RunConfig, phantom: PhantomConfig, run_dir=None, previews: bool = False) -> DeskResult:
    train, val, test = split_phantoms(phantom, cfg.split_seed)
    train = train[:cfg.train.max_train_pairs]
    with torch_seed(derive_seed(cfg.seed, "init")):
        gen, disc = build_models(cfg.model)
    t0 = time.perf_counter()
    reports, stage1 = [], None
    for stage_cfg in cfg.stage_configs():
        reports.append(train_stage(gen, disc, train, val, stage_cfg, augment=cfg.augment, run_dir=run_dir,
                                   config_echo=cfg.to_dict(), previews=previews))
        if stage_cfg.stage_index == 1:
            stage1 = stage_checksums(gen)[0]
    log_path = Path(run_dir) / "train_log.jsonl" if run_dir is not None else None
    return DeskResult(gen, disc, train, val, test, stage1, stage_checksums(gen), reports, log_path,
                      time.perf_counter() - t0)


def evaluate_desk(result: DeskResult, passes: int = 20, seed: int = 0) -> DeskResult:
    result.reports, result.bundles = evaluate_stages(result.gen, result.test, passes=passes, seed=seed)
    result.calibration = {k: aleatoric_calibration(b, result.test) for k, b in result.bundles.items()}
    return result


def summary(result: DeskResult) -> dict:
    return {
        "n_train": len(result.train), "n_val": len(result.val), "n_test": len(result.test),
        "train_seconds": round(result.seconds, 1),
        "stage_checksums": result.checksums,
        "stage1_unchanged": result.checksums[0] == result.stage1_trained,
        "metrics": {r.stage: {"mean": r.mean, "std": r.std} for r in result.reports},
        "aleatoric_spearman": result.calibration,
        "mean_sigma": {k: float(np.mean([b.aleatoric_sigma.mean() for b in v])) for k, v in result.bundles.items()},
        "best_epochs": {r.stage: r.best_epoch for r in result.train_reports},
    }


def write_summary(result: DeskResult, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_table(result.reports) + "\n")
    path = out / "desk_summary.json"
    path.write_text(json.dumps(summary(result), indent=2) + "\n")
    return path


def desk_config(raw: dict) -> tuple[RunConfig, PhantomConfig]:
    """Split a YAML mapping into the run config and its ``phantom:`` section."""
    raw = dict(raw)
    phantom = PhantomConfig.from_dict(raw.pop("phantom", {}) or {})
    return RunConfig.from_dict(raw), phantom

