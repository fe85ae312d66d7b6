"""Desk-scale phantom experiment: train all three stages on CPU and report per-stage metrics.

    python scripts/desk_experiment.py --config scripts/configs/desk.yaml --out runs/desk
"""

import argparse
import json
import logging
from pathlib import Path

from dfgan.config import load_yaml
from dfgan.experiments import desk_config, evaluate_desk, summary, train_desk, write_summary
from dfgan.metrics import format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "desk.yaml"))
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--passes", type=int, help="MC passes for evaluation (default: config value)")
    ap.add_argument("--previews", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run_cfg, phantom = desk_config(load_yaml(args.config))
    result = train_desk(run_cfg, phantom, run_dir=args.out, previews=args.previews)
    evaluate_desk(result, passes=args.passes or run_cfg.passes, seed=run_cfg.seed)
    write_summary(result, args.out)
    print(format_table(result.reports))
    info = summary(result)
    print(json.dumps({k: info[k] for k in ("n_train", "n_test", "train_seconds", "stage1_unchanged",
                                           "aleatoric_spearman")}, indent=2))


if __name__ == "__main__":
    main()
