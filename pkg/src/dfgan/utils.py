"""Seeding, hashing and device helpers shared across the package."""
from __future__ import annotations

import hashlib
import os
import zlib
from contextlib import contextmanager

import numpy as np
import torch

DEVICE_ENV = "DFGAN_DEVICE"


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key)


def derive_seed(*keys) -> int:
    """Mix integer/string keys into an independent 31-bit seed.

    ``derive_seed(seed, i)`` for different ``i`` gives statistically
    independent streams (SeedSequence entropy mixing), so per-pass and
    per-sample randomness never depends on execution order.
    """
    ss = np.random.SeedSequence([_key_to_int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint32)[0] & 0x7FFFFFFF)


@contextmanager
def torch_seed(seed: int):
    """Run a block under a fixed torch RNG state without touching the global stream."""
    devices = [torch.cuda.current_device()] if torch.cuda.is_available() else []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        yield


def module_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_device() -> torch.device:
    """Device from ``$DFGAN_DEVICE`` (``cpu`` unless set)."""
    name = os.environ.get(DEVICE_ENV, "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        raise RuntimeError(f"{DEVICE_ENV}={name} but no CUDA device is available")
    return torch.device(name)
