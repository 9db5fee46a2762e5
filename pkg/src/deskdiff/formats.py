"""Deterministic writers for images, grids, and records.

Everything here must produce byte-identical files for equal inputs: fixed
float formatting, sorted JSON keys, binary netpbm with an explicit value
mapping.  Images live in [-1, 1] and quantize by the same affine map
everywhere.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ShapeMismatchError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map linearly onto 0..255."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"ppm wants (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_uint8(image).tobytes())


def write_pgm(path, grid: np.ndarray) -> None:
    """Grayscale dump of a nonnegative map, min-max stretched to 0..255."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeMismatchError(f"pgm wants a 2-d grid, got shape {grid.shape}")
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        norm = (grid - lo) / (hi - lo)
    else:
        norm = np.zeros_like(grid)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.round(norm * 255.0).astype(np.uint8).tobytes())


def format_float(x) -> str:
    return "%.17g" % float(x)


def write_csv(path, header: list[str], rows: list) -> None:
    """Floats at full round-trip precision, everything else via str."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [format_float(c) if isinstance(c, float) else str(c)
                     for c in row]
            fh.write(",".join(cells) + "\n")


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_json(obj))


def write_jsonl_line(fh, obj) -> None:
    fh.write(json.dumps(obj, sort_keys=True) + "\n")
