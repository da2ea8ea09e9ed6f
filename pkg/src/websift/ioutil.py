"""Small IO helpers shared across modules."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
from typing import Any, BinaryIO


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators.

    Used wherever bytes must be reproducible: manifests, journal entries,
    fingerprinted artifacts.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def open_maybe_gzip(path: str, mode: str = "rb") -> BinaryIO:
    """Open a shard file, transparently handling a .gz suffix."""
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file and rename so readers never see a partial file."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
