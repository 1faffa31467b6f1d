"""Binary tensor, image, checkpoint, and index-file formats.

All integers are little-endian uint32; all payloads are C-order float32.
Formats are self-describing enough for a reader with this file and
nothing else:

AGT1 tensor     b"AGT1" | ndim | extents[ndim] | float32 payload
PGM image       standard binary P5, values scaled so the map maximum is 255
AGCK checkpoint b"AGCK" | count | count x (name_len | name_utf8 | ndim |
                extents[ndim] | float32 payload) | config_len | config_utf8
index file      one sample per line: relpath TAB label TAB box, where box
                is "x0,y0,x1,y1" (half-open pixel bounds) or "-" if absent
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, DataError

_U32 = struct.Struct("<I")


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(fh, what: str) -> int:
    return _U32.unpack(_read_exact(fh, 4, what))[0]


# ---------------------------------------------------------------------------
# AGT1 tensors
# ---------------------------------------------------------------------------

def write_agt(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes intact
    with open(path, "wb") as fh:
        fh.write(b"AGT1")
        fh.write(_U32.pack(arr.ndim))
        for ext in arr.shape:
            fh.write(_U32.pack(ext))
        fh.write(arr.tobytes())


def read_agt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"AGT1":
            raise DataError(f"{path}: bad magic {magic!r}, expected b'AGT1'")
        ndim = _read_u32(fh, "ndim")
        if ndim > 8:
            raise DataError(f"{path}: implausible ndim {ndim}")
        shape = tuple(_read_u32(fh, f"extent {i}") for i in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = _read_exact(fh, 4 * count, "payload")
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


# ---------------------------------------------------------------------------
# PGM images
# ---------------------------------------------------------------------------

def write_pgm(path, arr: np.ndarray) -> None:
    """Write a 2-D map as binary PGM, scaled so its maximum maps to 255."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"PGM writer expects a 2-D array, got shape {arr.shape}")
    arr = np.maximum(arr, 0.0)
    peak = arr.max()
    if peak > 0:
        arr = arr / peak
    pix = np.round(arr * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


# ---------------------------------------------------------------------------
# AGCK checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict, config_text: str = "") -> None:
    """Write named float32 tensors plus a config echo; names are sorted so
    the byte stream is a pure function of the contents."""
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(b"AGCK")
        fh.write(_U32.pack(len(names)))
        for name in names:
            arr = np.asarray(tensors[name], dtype="<f4", order="C")
            nb = name.encode("utf-8")
            fh.write(_U32.pack(len(nb)))
            fh.write(nb)
            fh.write(_U32.pack(arr.ndim))
            for ext in arr.shape:
                fh.write(_U32.pack(ext))
            fh.write(arr.tobytes())
        cb = config_text.encode("utf-8")
        fh.write(_U32.pack(len(cb)))
        fh.write(cb)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, config text)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        try:
            magic = _read_exact(fh, 4, "magic")
            if magic != b"AGCK":
                raise CheckpointError(f"{path}: bad magic {magic!r}, expected b'AGCK'")
            count = _read_u32(fh, "tensor count")
            tensors = {}
            for k in range(count):
                nlen = _read_u32(fh, f"name length of tensor {k}")
                name = _read_exact(fh, nlen, f"name of tensor {k}").decode("utf-8")
                ndim = _read_u32(fh, f"ndim of {name}")
                if ndim > 8:
                    raise CheckpointError(f"{path}: implausible ndim {ndim} for {name}")
                shape = tuple(_read_u32(fh, f"extent of {name}") for _ in range(ndim))
                n_el = int(np.prod(shape, dtype=np.int64)) if shape else 1
                payload = _read_exact(fh, 4 * n_el, f"payload of {name}")
                tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            clen = _read_u32(fh, "config length")
            config_text = _read_exact(fh, clen, "config echo").decode("utf-8")
            if fh.read(1):
                raise CheckpointError(f"{path}: trailing bytes after config echo")
        except DataError as exc:
            raise CheckpointError(str(exc)) from exc
    return tensors, config_text


# ---------------------------------------------------------------------------
# dataset index files
# ---------------------------------------------------------------------------

def format_box(box: Optional[Sequence[int]]) -> str:
    if box is None:
        return "-"
    x0, y0, x1, y1 = (int(v) for v in box)
    return f"{x0},{y0},{x1},{y1}"


def parse_box(text: str):
    if text == "-":
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise DataError(f"malformed box {text!r}; expected x0,y0,x1,y1 or '-'")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise DataError(f"malformed box {text!r}: {exc}") from exc


def write_index(path, entries) -> None:
    """entries: iterable of (relpath, label, box-or-None)."""
    with open(path, "w", encoding="utf-8") as fh:
        for relpath, label, box in entries:
            fh.write(f"{relpath}\t{int(label)}\t{format_box(box)}\n")


def read_index(path):
    entries = []
    path = Path(path)
    if not path.exists():
        raise DataError(f"index file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            relpath, label_s, box_s = parts
            try:
                label = int(label_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad label {label_s!r}") from exc
            entries.append((relpath, label, parse_box(box_s)))
    return entries
