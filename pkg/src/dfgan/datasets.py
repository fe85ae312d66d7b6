"""Paired dataset I/O, split assignment and the out-of-distribution loader.

On-disk layout::

    root/attenuation/<id>.png     16-bit (or 8-bit) grayscale, or <id>.npy float
    root/darkfield/<id>.png       same id, same shape
    root/meta/<id>.json           optional: {"attenuation": {"scale", "offset"}, ...,
                                             "synthetic": bool}
    root/meta/<id>_sigma.npy      optional (phantoms): true per-pixel noise sigma
    root/meta/<id>_lung.npy       optional (phantoms): boolean lung mask
    root/calibration.json         optional dataset-wide {"attenuation": {...}, "darkfield": {...}}

Stored codes map to [0, 1] as ``offset + scale * code``.  Without a mapping
the fixed range of the file's integer type is used (``code / 65535`` for
16-bit, ``code / 255`` for 8-bit); ``.npy`` files are taken as-is.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .core_image import area_resample
from .phantoms import PairedSample

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".npy")
CODE_MAX = 65535
# paper split: 227 / 15 / 27 of 269 patients
VAL_FRACTION = 15 / 269
TEST_FRACTION = 27 / 269
SPLITS = ("train", "val", "test")


class IngestionError(ValueError):
    pass


class EmptyDatasetError(IngestionError):
    pass


def encode_u16(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * CODE_MAX).astype(np.uint16)


def write_png16(img, path) -> Path:
    path = Path(path)
    Image.fromarray(encode_u16(img)).save(path)
    return path


def read_raw(path) -> tuple[np.ndarray, float]:
    """Raw pixel array and the full-scale code of its type (1.0 for float data)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        return np.asarray(arr, dtype=np.float64), 1.0
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I", "F"):
            im = im.convert("L")
        arr = np.array(im)
    if arr.dtype == np.uint8:
        full = 255.0
    elif arr.dtype == np.uint16 or (np.issubdtype(arr.dtype, np.integer) and arr.max(initial=0) <= CODE_MAX):
        full = float(CODE_MAX)
    elif np.issubdtype(arr.dtype, np.integer):
        full = float(np.iinfo(arr.dtype).max)
    else:
        full = 1.0
    return arr.astype(np.float64), full


def read_image(path, mapping: dict | None = None) -> np.ndarray:
    raw, full = read_raw(path)
    if mapping:
        return float(mapping.get("offset", 0.0)) + float(mapping["scale"]) * raw
    return (1.0 / full) * raw  # same arithmetic as the default unit mapping


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    files = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            if p.stem in files:
                raise IngestionError(f"duplicate id {p.stem!r}: {files[p.stem].name} and {p.name}")
            files[p.stem] = p
    return files


def split_sizes(n: int) -> dict[str, int]:
    n_test = int(round(n * TEST_FRACTION))
    n_val = int(round(n * VAL_FRACTION))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def assign_splits(ids, seed: int = 0) -> dict[str, str]:
    """Seeded partition of ``ids`` into train/val/test with the 227/15/27 proportions."""
    ids = sorted(ids)
    sizes = split_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    out = {}
    for rank, idx in enumerate(order):
        if rank < sizes["test"]:
            out[ids[idx]] = "test"
        elif rank < sizes["test"] + sizes["val"]:
            out[ids[idx]] = "val"
        else:
            out[ids[idx]] = "train"
    return out


def _check_unit(img, path):
    if not np.all(np.isfinite(img)):
        raise IngestionError(f"{path}: non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise IngestionError(f"{path}: values outside [0, 1] after normalisation "
                             f"(min={img.min():.4g}, max={img.max():.4g})")


def load_dataset(root, seed: int = 0) -> list[PairedSample]:
    root = Path(root)
    att = _index_dir(root / "attenuation")
    dark = _index_dir(root / "darkfield")
    if not att and not dark:
        raise EmptyDatasetError(f"{root}: no images found under attenuation/ or darkfield/")
    orphans = sorted(set(att) ^ set(dark))
    if orphans:
        raise IngestionError(f"{root}: ids without a counterpart: {', '.join(orphans)}")
    calib_path = root / "calibration.json"
    calib = json.loads(calib_path.read_text()) if calib_path.exists() else {}
    splits = assign_splits(att, seed)
    samples = []
    for sid in sorted(att):
        meta_path = root / "meta" / f"{sid}.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        a = read_image(att[sid], meta.get("attenuation") or calib.get("attenuation"))
        d = read_image(dark[sid], meta.get("darkfield") or calib.get("darkfield"))
        _check_unit(a, att[sid])
        _check_unit(d, dark[sid])
        if a.shape != d.shape:
            raise IngestionError(f"{dark[sid]}: shape {d.shape} does not match attenuation {a.shape}")
        sigma_path = root / "meta" / f"{sid}_sigma.npy"
        lung_path = root / "meta" / f"{sid}_lung.npy"
        samples.append(PairedSample(
            id=sid, attenuation=a, darkfield=d, split=splits[sid],
            truth_noise_sigma=np.load(sigma_path) if sigma_path.exists() else None,
            lung_mask=np.load(lung_path) if lung_path.exists() else None,
        ))
    return samples


def write_dataset(samples, root) -> list[Path]:
    """Write samples in the documented layout; returns every file written (sorted)."""
    root = Path(root)
    for sub in ("attenuation", "darkfield", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    written = []
    unit = {"scale": 1.0 / CODE_MAX, "offset": 0.0}
    for s in samples:
        written.append(write_png16(s.attenuation, root / "attenuation" / f"{s.id}.png"))
        written.append(write_png16(s.darkfield, root / "darkfield" / f"{s.id}.png"))
        meta = {"attenuation": unit, "darkfield": unit, "synthetic": s.synthetic}
        meta_path = root / "meta" / f"{s.id}.json"
        meta_path.write_text(json.dumps(meta, sort_keys=True) + "\n")
        written.append(meta_path)
        if s.truth_noise_sigma is not None:
            p = root / "meta" / f"{s.id}_sigma.npy"
            np.save(p, np.asarray(s.truth_noise_sigma, dtype=np.float64))
            written.append(p)
        if s.lung_mask is not None:
            p = root / "meta" / f"{s.id}_lung.npy"
            np.save(p, np.asarray(s.lung_mask, dtype=bool))
            written.append(p)
    return sorted(written)


def by_split(samples, split: str) -> list[PairedSample]:
    return [s for s in samples if s.split == split]


def ood_sources(root) -> list[Path]:
    """Image files that :func:`load_ood` would try to read from ``root``."""
    root = Path(root)
    src = root / "attenuation" if (root / "attenuation").is_dir() else root
    if not src.is_dir():
        raise FileNotFoundError(f"{src}: not a directory")
    return [p for p in sorted(src.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]


def load_ood(root, target_shape) -> list[PairedSample]:
    """Load unpaired grayscale images, area-resample to ``target_shape`` and normalise to [0, 1].

    A directory in dataset layout contributes its ``attenuation/`` images;
    otherwise every image file directly inside ``root`` is used.  Unreadable
    files are skipped with a warning.
    """
    files = ood_sources(root)
    samples, skipped = [], []
    for p in files:
        try:
            img = read_image(p)
        except Exception as exc:  # noqa: BLE001 - any decoder failure means "unreadable"
            log.warning("skipping unreadable OOD file %s: %s", p, exc)
            skipped.append(p.name)
            continue
        if img.ndim != 2:
            log.warning("skipping %s: expected a single-channel image, got shape %s", p, img.shape)
            skipped.append(p.name)
            continue
        img = np.clip(area_resample(img, target_shape), 0.0, 1.0)
        samples.append(PairedSample(id=p.stem, attenuation=img, darkfield=None, split="ood"))
    log.info("OOD load from %s: %d images loaded, %d skipped", root, len(samples), len(skipped))
    return samples
