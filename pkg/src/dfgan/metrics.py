"""MSE / PSNR / SSIM and per-stage reporting.

SSIM uses the canonical constants (11x11 Gaussian window, sigma 1.5,
K1=0.01, K2=0.03, data range 1) and averages the SSIM map over the valid
windows only (no padding).  Report standard deviations are population stds.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRIC_NAMES = ("mse", "psnr", "ssim")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / err))


def psnr(a, b, data_range: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), data_range)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation
    win = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, win, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, win, axis=1) @ g


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_map(a, b, data_range).mean())


@dataclass
class MetricsReport:
    stage: int
    n: int
    per_image: list = field(default_factory=list)   # [{"id", "mse", "psnr", "ssim"}]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def row(self) -> str:
        cells = [f"{self.mean[m]:.4f} ± {self.std[m]:.4f}" if m == "mse"
                 else f"{self.mean[m]:.2f} ± {self.std[m]:.2f}" for m in METRIC_NAMES]
        return f"{self.stage:<6d}| " + " | ".join(f"{c:<17s}" for c in cells)

    def to_records(self) -> list[dict]:
        recs = [{"kind": "summary", "stage": self.stage, "n": self.n,
                 "mean": dict(self.mean), "std": dict(self.std), "std_type": "population"}]
        recs += [{"kind": "image", "stage": self.stage, **img} for img in self.per_image]
        return recs


def stage_report(pairs, stage: int, ids=None) -> MetricsReport:
    """Per-image metrics plus mean and population std over ``(generated, target)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("stage_report needs at least one (generated, target) pair")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    per_image = []
    for sid, (gen, tgt) in zip(ids, pairs):
        err = mse(gen, tgt)
        per_image.append({"id": sid, "mse": err, "psnr": psnr_from_mse(err), "ssim": ssim(gen, tgt)})
    mean = {m: float(np.mean([r[m] for r in per_image])) for m in METRIC_NAMES}
    std = {m: float(np.std([r[m] for r in per_image])) for m in METRIC_NAMES}
    return MetricsReport(stage=stage, n=len(pairs), per_image=per_image, mean=mean, std=std)


def format_table(reports) -> str:
    header = f"{'Stage':<6s}| " + " | ".join(f"{h:<17s}" for h in ("MSE", "PSNR", "SSIM"))
    lines = [header, "-" * len(header)]
    lines += [r.row() for r in sorted(reports, key=lambda r: r.stage)]
    lines.append("(mean ± population std over images)")
    return "\n".join(lines)


def dump_records(reports) -> str:
    return "".join(json.dumps(rec) + "\n" for r in reports for rec in r.to_records())


def parse_records(text: str) -> list[MetricsReport]:
    by_stage: dict[int, MetricsReport] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        stage = rec["stage"]
        if rec["kind"] == "summary":
            rep = by_stage.setdefault(stage, MetricsReport(stage=stage, n=0))
            rep.n, rep.mean, rep.std = rec["n"], rec["mean"], rec["std"]
        elif rec["kind"] == "image":
            rep = by_stage.setdefault(stage, MetricsReport(stage=stage, n=0))
            rep.per_image.append({k: v for k, v in rec.items() if k not in ("kind", "stage")})
    return [by_stage[s] for s in sorted(by_stage)]


def report_as_dict(report: MetricsReport) -> dict:
    return asdict(report)
