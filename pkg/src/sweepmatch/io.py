"""PGM and PFM raster I/O plus the atomic-write helper used by every writer."""
from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import BadMagic, FormatError, TruncatedFile


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary sibling file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise TruncatedFile("header ended early")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) as a uint8 (H, W) array."""
    with open(path, "rb") as fh:
        tok = _read_header_tokens(fh, 4)
        if tok[0] != b"P5":
            raise BadMagic(f"{path}: not a P5 PGM")
        w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
        data = fh.read(w * h)
    if len(data) < w * h:
        raise TruncatedFile(f"{path}: expected {w * h} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image) -> None:
    """Write an 8-bit image; float inputs in [0, 1] are scaled and rounded."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with atomic_write(path) as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM into a float32 (H, W) array, top row first."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise BadMagic(f"{path}: not a grayscale PFM")
        dims = _read_header_tokens(fh, 2)
        w, h = int(dims[0]), int(dims[1])
        scale = float(_read_header_tokens(fh, 1)[0])
        data = fh.read()
    need = 4 * w * h
    if len(data) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, got {len(data)}")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data[:need], dtype=dtype).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


def write_pfm(path, array) -> None:
    """Write a little-endian single-channel PFM (rows stored bottom-up)."""
    arr = np.asarray(array, dtype="<f4")
    h, w = arr.shape
    with atomic_write(path) as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(arr)).tobytes())


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` text (``#`` comments, blank lines ignored)."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items: dict) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in items.items())
    with atomic_write(path, "w") as fh:
        fh.write(text)
