"""Versioned single-file container used by every persisted artifact.

Layout: an ASCII magic line, a JSON header line (version, metadata, payload
length and SHA-256), then an npz payload holding the raw arrays. The
checksum makes truncation and corruption detectable with a byte position.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, IntegrityError

CONTAINER_VERSION = 1


def save_container(path: str | Path, magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomically write a container file (single writer per path)."""
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **{k: arrays[k] for k in sorted(arrays)})
    payload = buf.getvalue()
    header = {
        "version": CONTAINER_VERSION,
        "meta": meta,
        "payload_size": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = magic.encode("ascii") + b"\n"
    blob += json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += payload
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_container(path: str | Path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container, returning (meta, arrays)."""
    path = Path(path)
    data = path.read_bytes()
    if not data:
        raise IntegrityError(f"{path} is empty", position=0)

    nl1 = data.find(b"\n")
    if nl1 < 0:
        raise IntegrityError(f"{path}: no magic line found", position=len(data))
    found_magic = data[:nl1].decode("ascii", errors="replace")
    if found_magic != magic:
        raise FormatVersionError(f"{path}: expected magic {magic!r}, found {found_magic!r}")

    nl2 = data.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise IntegrityError(f"{path}: header line is truncated", position=len(data))
    try:
        header = json.loads(data[nl1 + 1 : nl2].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: header is not valid JSON ({exc})", position=nl1 + 1) from exc

    if header.get("version") != CONTAINER_VERSION:
        raise FormatVersionError(
            f"{path}: container version {header.get('version')!r} unsupported (expected {CONTAINER_VERSION})"
        )

    payload = data[nl2 + 1 :]
    expected_size = header["payload_size"]
    if len(payload) != expected_size:
        raise IntegrityError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected_size}",
            position=len(data),
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch", position=nl2 + 1)

    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise IntegrityError(f"{path}: payload is not a readable array archive ({exc})", position=nl2 + 1) from exc
    return header["meta"], arrays
