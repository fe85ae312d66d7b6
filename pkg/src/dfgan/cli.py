"""Command-line entry points.

    dfgan generate-phantoms --config phantoms.yaml --out DATA
    dfgan train     --config run.yaml --data DATA --out RUN [--stage K --resume CKPT]
    dfgan infer     --checkpoint CKPT --input DIR --out OUT [--passes 20 --seed 0 --stage K]
    dfgan evaluate  --checkpoint C1 [C2 ...] --data DATA --out OUT [--split test]

Exit codes: 0 success, 2 usage or config error, 3 numeric abort during
training.  Every command writes one ``manifest.json`` into its output
directory; the device comes from ``--device`` or ``$DFGAN_DEVICE`` (cpu).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoints import CheckpointError, build_models, load_checkpoint
from .config import RunConfig, load_yaml, save_yaml
from .datasets import (IngestionError, by_split, load_dataset, load_ood, ood_sources, read_image,
                       write_dataset)
from .inference import aleatoric_calibration, evaluate_stages, save_bundle, stage_infer
from .metrics import dump_records, format_table, stage_report
from .panels import save_stage_panel, save_uncertainty_panel
from .phantoms import PhantomConfig, generate_phantoms
from .trainer import JsonlLog, TrainingAborted, train_progressive
from .utils import default_device, derive_seed, file_checksum, module_checksum, torch_seed

log = logging.getLogger("dfgan")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    artifacts: list
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        self.finished = _now()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _relative(paths, root) -> list[str]:
    root = Path(root)
    return sorted(str(Path(p).relative_to(root)) for p in paths)


def _device(arg):
    return torch.device(arg) if arg else default_device()


def _load_phantom_config(path) -> PhantomConfig:
    data = load_yaml(path)
    return PhantomConfig.from_dict(data.get("phantom", data))


def cmd_generate_phantoms(args) -> int:
    started = _now()
    cfg = _load_phantom_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = write_dataset(generate_phantoms(cfg), out)
    checksums = {str(p.relative_to(out)): file_checksum(p) for p in written}
    RunManifest(
        command="generate-phantoms", config=cfg.to_dict(), seeds={"phantom_seed": cfg.seed},
        inputs={"config": str(args.config)}, artifacts=sorted(checksums), started=started,
        extra={"n_pairs": cfg.n_samples, "checksums": checksums},
    ).write(out)
    log.info("wrote %d phantom pairs to %s", cfg.n_samples, out)
    return EXIT_OK


def _run_config(path) -> tuple[RunConfig, dict]:
    raw = load_yaml(path) if path else {}
    return RunConfig.from_dict(raw), raw


def cmd_train(args) -> int:
    started = _now()
    cfg, raw = _run_config(args.config)
    samples = load_dataset(args.data, seed=cfg.split_seed)
    train, val = by_split(samples, "train"), by_split(samples, "val")
    train = train[:cfg.train.max_train_pairs]
    if not train:
        raise UsageError(f"{args.data}: no training pairs after the split")
    device = _device(args.device)

    if args.resume:
        gen, disc, payload = load_checkpoint(args.resume, cfg.model)
        trained = payload["trained_stages"]
    else:
        if args.stage and args.stage > 1:
            raise UsageError(f"--stage {args.stage} needs --resume with stages 1..{args.stage - 1} trained")
        with torch_seed(derive_seed(cfg.seed, "init")):
            gen, disc = build_models(cfg.model)
        trained = 0
    if args.stage:
        if not 1 <= args.stage <= gen.n_stages:
            raise UsageError(f"--stage must be in 1..{gen.n_stages}")
        if trained < args.stage - 1:
            raise UsageError(f"{args.resume}: only {trained} stage(s) trained, stage {args.stage} needs "
                             f"{args.stage - 1}")
        stages = [args.stage]
    else:
        stages = list(range(trained + 1, gen.n_stages + 1))
        if not stages:
            raise UsageError(f"{args.resume}: all {gen.n_stages} stages are already trained")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    if "phantom" in raw:
        echo["phantom"] = raw["phantom"]
    save_yaml(echo, out / "config.yaml")
    manifest = RunManifest(
        command="train", config=echo, seeds={"seed": cfg.seed, "split_seed": cfg.split_seed},
        inputs={"config": str(args.config) if args.config else None, "data": str(args.data),
                "resume": str(args.resume) if args.resume else None},
        artifacts=[], started=started,
        extra={"stages": stages, "n_train": len(train), "n_val": len(val), "device": str(device)},
    )
    manifest.extra["stage_configs"] = [dataclasses.asdict(cfg.stage_config(k)) for k in stages]
    if args.dry_run:
        manifest.status = "dry-run"
        manifest.write(out)
        print(yaml.safe_dump(echo, sort_keys=False), end="")
        return EXIT_OK
    logger = JsonlLog(out / "train_log.jsonl")
    try:
        reports = train_progressive(gen, disc, train, val, [cfg.stage_config(k) for k in stages],
                                    augment=cfg.augment, run_dir=out, config_echo=echo, device=device,
                                    logger=logger, previews=not args.no_previews)
    except TrainingAborted as exc:
        logger.close()
        manifest.status = "aborted"
        manifest.extra["error"] = str(exc)
        manifest.extra["last_good"] = str(exc.last_good) if exc.last_good else None
        manifest.artifacts = _relative([p for p in out.rglob("*") if p.is_file()], out)
        manifest.write(out)
        print(f"dfgan train: {exc}; last good checkpoint: {exc.last_good}", file=sys.stderr)
        return EXIT_ABORT
    logger.close()
    summary = [dataclasses.asdict(r) for r in reports]
    (out / "train_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    manifest.extra["stage_checksums"] = [module_checksum(s) for s in gen.stages]
    manifest.extra["best_epochs"] = {r.stage: r.best_epoch for r in reports}
    manifest.artifacts = _relative([p for p in out.rglob("*") if p.is_file()], out)
    manifest.write(out)
    return EXIT_OK


def _checked_stage(requested, payload, path) -> int:
    trained = payload["trained_stages"]
    if trained < 1:
        raise UsageError(f"{path}: checkpoint has no trained stages")
    k = requested or trained
    if not 1 <= k <= trained:
        raise UsageError(f"{path}: stage {k} requested but only stages 1..{trained} are trained")
    return k


def cmd_infer(args) -> int:
    started = _now()
    if args.passes < 1:
        raise UsageError("--passes must be >= 1")
    gen, _, payload = load_checkpoint(args.checkpoint)
    k = _checked_stage(args.stage, payload, args.checkpoint)
    shape = tuple(args.shape) if args.shape else tuple(payload["image_shape"])
    sources = ood_sources(args.input)
    samples = load_ood(args.input, shape)
    if not samples:
        raise UsageError(f"{args.input}: no readable input images")
    device = _device(args.device)
    gen.to(device)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_sum = file_checksum(args.checkpoint)
    written = []
    for s in samples:
        bundle = stage_infer(gen, s.attenuation, k, passes=args.passes, seed=args.seed, device=device)
        bdir = save_bundle(bundle, out / "bundles" / s.id, model_checksum=model_sum, sample_id=s.id)
        written += [p for p in bdir.iterdir()]
        written.append(save_uncertainty_panel(out / "panels" / f"{s.id}.png", s.attenuation, bundle,
                                              epistemic_std=args.epistemic_std))
    RunManifest(
        command="infer",
        config={"passes": args.passes, "stage": k, "shape": list(shape), "epistemic_std": args.epistemic_std,
                "model": payload["model_config"]},
        seeds={"seed": args.seed}, inputs={"checkpoint": str(args.checkpoint), "input": str(args.input)},
        artifacts=_relative(written, out), started=started,
        extra={"model_checksum": model_sum, "n_inputs": len(samples),
               "skipped": len(sources) - len(samples), "device": str(device)},
    ).write(out)
    return EXIT_OK


def _read_predictions(pred_dir, ids) -> dict:
    pred_dir = Path(pred_dir)
    found = {}
    for sid in ids:
        for cand in (pred_dir / sid / "prediction.npy", pred_dir / f"{sid}.npy", pred_dir / f"{sid}.png"):
            if cand.exists():
                found[sid] = read_image(cand)
                break
    return found


def cmd_evaluate(args) -> int:
    started = _now()
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give either --checkpoint (one or more) or --predictions")
    models = [load_checkpoint(c) for c in args.checkpoint or []]
    split_seed = args.split_seed
    if split_seed is None:
        split_seed = int(models[0][2]["config"].get("split_seed", 0)) if models else 0
    samples = load_dataset(args.data, seed=split_seed)
    pairs = samples if args.split == "all" else by_split(samples, args.split)
    if not pairs:
        raise UsageError(f"{args.data}: no paired samples in split '{args.split}'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    device = _device(args.device)

    reports, uncertainty, written = [], {}, []
    if args.predictions:
        preds = _read_predictions(args.predictions, [s.id for s in pairs])
        matched = [s for s in pairs if s.id in preds]
        if not matched:
            raise UsageError(f"{args.predictions}: no predictions match the evaluated pairs")
        reports.append(stage_report([(preds[s.id], s.darkfield) for s in matched], stage=args.stage or 1,
                                    ids=[s.id for s in matched]))
    else:
        jobs = []
        for path, (gen, _, payload) in zip(args.checkpoint, models):
            if args.stages:
                stages = [_checked_stage(k, payload, path) for k in args.stages]
            elif len(models) == 1:
                stages = list(range(1, payload["trained_stages"] + 1))
            else:
                stages = [_checked_stage(None, payload, path)]
            jobs += [(k, path, gen) for k in stages]
        seen = [k for k, _, _ in jobs]
        if len(set(seen)) != len(seen):
            raise UsageError(f"stage rows requested more than once: {sorted(seen)}")
        panel_bundles = {}
        for k, path, gen in sorted(jobs, key=lambda j: j[0]):
            gen.to(device)
            reps, bundles = evaluate_stages(gen, pairs, [k], passes=args.passes, seed=args.seed, device=device)
            reports += reps
            b = bundles[k]
            stats = {"checkpoint": str(path),
                     "mean_aleatoric_sigma": float(np.mean([x.aleatoric_sigma.mean() for x in b])),
                     "mean_epistemic_var": float(np.mean([x.epistemic_var.mean() for x in b]))}
            if all(s.truth_noise_sigma is not None for s in pairs):
                stats["aleatoric_spearman"] = aleatoric_calibration(b, pairs)
            uncertainty[k] = stats
            panel_bundles[k] = b[:args.panels]
        for i, s in enumerate(pairs[:args.panels]):
            written.append(save_stage_panel(out / "panels" / f"{s.id}.png", s.darkfield,
                                            [panel_bundles[k][i] for k in sorted(panel_bundles)]))

    table = format_table(reports)
    (out / "report.txt").write_text(table + "\n")
    (out / "report.jsonl").write_text(dump_records(reports))
    written += [out / "report.txt", out / "report.jsonl"]
    if uncertainty:
        (out / "uncertainty.json").write_text(json.dumps(uncertainty, indent=2, sort_keys=True) + "\n")
        written.append(out / "uncertainty.json")
    print(table)
    RunManifest(
        command="evaluate",
        config={"split": args.split, "passes": args.passes, "stages": [r.stage for r in reports]},
        seeds={"seed": args.seed, "split_seed": split_seed},
        inputs={"checkpoints": [str(c) for c in args.checkpoint or []], "data": str(args.data),
                "predictions": str(args.predictions) if args.predictions else None},
        artifacts=_relative(written, out), started=started,
        extra={"n_pairs": len(pairs), "device": str(device)},
    ).write(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfgan", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-phantoms", help="write a deterministic phantom dataset")
    g.add_argument("--config", required=True, help="YAML with phantom settings (top level or under 'phantom:')")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_phantoms)

    t = sub.add_parser("train", help="progressive stage-wise training")
    t.add_argument("--config", help="run config YAML (defaults: published protocol)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, help="train only this stage (earlier stages frozen)")
    t.add_argument("--resume", help="checkpoint holding the already-trained earlier stages")
    t.add_argument("--device")
    t.add_argument("--no-previews", action="store_true", help="skip per-epoch preview panels")
    t.add_argument("--dry-run", action="store_true", help="resolve and echo the config, then stop")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="MC-dropout inference on unpaired inputs")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="image directory, or a dataset root (uses attenuation/)")
    i.add_argument("--out", required=True)
    i.add_argument("--passes", type=int, default=20)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--stage", type=int, help="truncate the cascade after this stage (default: last trained)")
    i.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"),
                   help="resample inputs to this shape (default: the training shape)")
    i.add_argument("--epistemic-std", action="store_true", help="show epistemic std instead of variance in panels")
    i.add_argument("--device")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="per-stage MSE/PSNR/SSIM table")
    e.add_argument("--checkpoint", nargs="+", help="one checkpoint (all its stages) or one per stage")
    e.add_argument("--predictions", help="directory of precomputed predictions instead of checkpoints")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split-seed", type=int, help="default: the checkpoint's split_seed")
    e.add_argument("--stages", type=int, nargs="+", help="stage rows to evaluate")
    e.add_argument("--stage", type=int, help="row label for --predictions (default 1)")
    e.add_argument("--passes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--panels", type=int, default=2, help="stage-comparison panels for the first N pairs")
    e.add_argument("--device")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, IngestionError, CheckpointError, FileNotFoundError, yaml.YAMLError, ValueError) as exc:
        print(f"dfgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
