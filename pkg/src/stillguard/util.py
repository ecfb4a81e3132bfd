"""Shared helpers: seed derivation, hashing, atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch


def stable_seed(base: int, *parts: object) -> int:
    """Derive a child seed from a base seed and a label path.

    Uses sha256 so the stream is stable across Python versions and
    processes (``hash()`` is salted and unusable here).
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little") % (2**31 - 1)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_fingerprint(t: torch.Tensor) -> str:
    return sha256_bytes(t.detach().cpu().contiguous().numpy().tobytes())


def canonical_json(obj: object) -> str:
    """JSON with sorted keys and no whitespace jitter, for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: object) -> str:
    return sha256_bytes(canonical_json(obj).encode())


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
