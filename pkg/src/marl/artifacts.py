"""Artifact IO: atomic writes, deterministic formats, logging, and locking.

Every writer goes through a temp-file-plus-rename so a crashed stage never
leaves a partial artifact, and every format avoids timestamps so reruns are
byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from PIL import Image

from .errors import DatasetIOError, DimensionError, LockError


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def atomic_write_npy(path: str | Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, arr)
    atomic_write_bytes(path, buf.getvalue())


def write_gray_png(path: str | Path, pixels: np.ndarray) -> None:
    """[0, 1] grayscale array to an 8-bit PNG (round-half-up quantization)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"gray png needs a 2-D array, got {arr.shape}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_gray_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetIOError(f"cannot read png {path}: {e}") from e


def write_matrix_blob(path: str | Path, header: dict, matrix: np.ndarray) -> None:
    """JSON header line + one little-endian float32 blob."""
    meta = dict(header)
    meta["shape"] = list(matrix.shape)
    payload = json.dumps(meta, sort_keys=True).encode() + b"\n" + \
        np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    atomic_write_bytes(path, payload)


def read_matrix_blob(path: str | Path) -> tuple[dict, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetIOError(f"{path}: missing header line")
    header = json.loads(raw[:nl].decode())
    shape = tuple(header["shape"])
    matrix = np.frombuffer(raw[nl + 1 :], dtype="<f4")
    if matrix.size != int(np.prod(shape)):
        raise DimensionError(f"{path}: blob has {matrix.size} values, header says {shape}")
    return header, matrix.reshape(shape).copy()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def log_event(stage: str, event: str, **fields) -> None:
    """One JSONL progress record on stderr; artifacts never depend on these."""
    rec = {"stage": stage, "event": event}
    rec.update(fields)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


class StageLock:
    """Single writer per output directory, backed by a lock file."""

    def __init__(self, out_dir: str | Path, timeout: float = 0.5):
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        self._path = Path(out_dir) / ".marl.lock"
        self._lock = FileLock(str(self._path))
        self._timeout = timeout

    def __enter__(self):
        try:
            self._lock.acquire(timeout=self._timeout)
        except Timeout as e:
            raise LockError(f"another stage holds {self._path}") from e
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False
