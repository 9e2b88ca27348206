"""Versioned on-disk container for named float64 tensors.

Layout: one line of UTF-8 JSON (version, free-form metadata, and a tensor
manifest with name/shape/offset), a newline, then a contiguous
little-endian float64 blob. Offsets count blob elements, not bytes.
Both encoder weight files and embedding archives use this container.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class TensorFileError(ValueError):
    """Raised for version, manifest, or blob inconsistencies."""


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors in manifest order; rejects non-finite values."""
    manifest = []
    parts = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise TensorFileError(f"tensor {name!r} contains non-finite values")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        parts.append(arr.reshape(-1))
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": manifest,
    }
    blob = np.concatenate(parts) if parts else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob.astype("<f8").tobytes())


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read tensors back; returns (tensors, meta).

    Validates the format version, that manifest entries tile the blob
    contiguously, and that every value is finite.
    """
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n")
    if sep < 0:
        raise TensorFileError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise TensorFileError(
            f"{path}: format_version {version} not supported (expected {FORMAT_VERSION})"
        )
    blob = np.frombuffer(raw[sep + 1 :], dtype="<f8")
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header.get("tensors", []):
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if offset != expected_offset:
            raise TensorFileError(
                f"{path}: tensor {name!r} at offset {offset}, expected {expected_offset}"
                " (manifest does not tile the blob)"
            )
        if offset + size > blob.size:
            raise TensorFileError(
                f"{path}: tensor {name!r} needs elements [{offset}, {offset + size})"
                f" but the blob holds only {blob.size} (length mismatch)"
            )
        tensors[name] = blob[offset : offset + size].reshape(shape).copy()
        if not np.all(np.isfinite(tensors[name])):
            raise TensorFileError(f"{path}: tensor {name!r} contains non-finite values")
        expected_offset = offset + size
    if expected_offset != blob.size:
        raise TensorFileError(
            f"{path}: blob holds {blob.size} elements but the manifest accounts"
            f" for {expected_offset} (length mismatch)"
        )
    return tensors, header.get("meta", {})
