"""Checkpoint container: one JSON header line + raw little-endian float32 blobs.

The header records layer specs, parameter names/shapes per section, the seed,
and free-form metadata; blobs follow in the order listed by "section_order"
and, within a section, parameter declaration order. Saving the same state
twice yields byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..artifacts import atomic_write_bytes
from ..errors import DatasetIOError, DimensionError
from .autodiff import Parameter

MAGIC = "marl-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, sections: dict[str, list[Parameter]], header: dict) -> None:
    """Write parameters grouped into named sections plus a metadata header."""
    meta = dict(header)
    meta["format"] = MAGIC
    meta["version"] = VERSION
    meta["section_order"] = list(sections.keys())
    meta["sections"] = {
        name: [{"name": p.name, "shape": list(p.data.shape)} for p in params]
        for name, params in sections.items()
    }
    blob = bytearray()
    for params in sections.values():
        for p in params:
            blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    payload = json.dumps(meta, sort_keys=True).encode() + b"\n" + bytes(blob)
    atomic_write_bytes(path, payload)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, list[np.ndarray]]]:
    """Read a checkpoint; returns (header, {section: [float32 arrays]})."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint {path}: {e}") from e
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetIOError(f"checkpoint {path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"checkpoint {path}: bad header: {e}") from e
    if header.get("format") != MAGIC:
        raise DatasetIOError(f"checkpoint {path}: not a {MAGIC} file")

    offset = nl + 1
    out: dict[str, list[np.ndarray]] = {}
    for name in header["section_order"]:
        arrays = []
        for entry in header["sections"][name]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(raw):
                raise DimensionError(f"checkpoint {path}: truncated blob for {entry['name']}")
            arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
            arrays.append(arr)
            offset = end
        out[name] = arrays
    if offset != len(raw):
        raise DimensionError(f"checkpoint {path}: {len(raw) - offset} trailing bytes")
    return header, out
