"""Binary masks: union labels, lesion bounding boxes, crops and resampling.

Masks are plain 2-D ``uint8`` numpy arrays holding only 0 and 1. Use
:func:`as_mask` to validate foreign arrays before handing them around.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import DimensionError, IoError, RangeError

ATTRIBUTES = ("G", "M", "N", "P", "S")
ATTRIBUTE_NAMES = {
    "G": "Globules",
    "M": "Milia-like cysts",
    "N": "Negative network",
    "P": "Pigment network",
    "S": "Streaks",
}


def as_mask(arr) -> np.ndarray:
    """Return ``arr`` as a contiguous uint8 0/1 array, or raise."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"mask must be a non-empty 2-D array, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    if not np.all((a == 0) | (a == 1)):
        raise RangeError("mask elements must be exactly 0 or 1")
    return np.ascontiguousarray(a, dtype=np.uint8)


@dataclass
class AttributeMaskSet:
    """Per-attribute masks of one sample plus the optional lesion mask.

    Absent attributes are simply missing from ``masks`` and read back as
    all-zero through :meth:`get`.
    """

    shape: tuple[int, int]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    lesion: np.ndarray | None = None

    def __post_init__(self):
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        clean = {}
        for key, m in self.masks.items():
            if key not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {key!r}; expected one of {ATTRIBUTES}")
            if m is None:
                continue
            m = as_mask(m)
            if m.shape != self.shape:
                raise DimensionError(f"mask {key} has shape {m.shape}, expected {self.shape}")
            clean[key] = m
        self.masks = clean
        if self.lesion is not None:
            self.lesion = as_mask(self.lesion)
            if self.lesion.shape != self.shape:
                raise DimensionError(f"lesion mask has shape {self.lesion.shape}, expected {self.shape}")

    def get(self, attribute: str) -> np.ndarray:
        if attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {attribute!r}")
        m = self.masks.get(attribute)
        return m if m is not None else np.zeros(self.shape, dtype=np.uint8)

    def present(self) -> list[str]:
        return [a for a in ATTRIBUTES if a in self.masks and self.masks[a].any()]


class CropBox(NamedTuple):
    """Half-open pixel box ``[row_lo, row_hi) x [col_lo, col_hi)``."""

    row_lo: int
    row_hi: int
    col_lo: int
    col_hi: int

    @property
    def height(self) -> int:
        return self.row_hi - self.row_lo

    @property
    def width(self) -> int:
        return self.col_hi - self.col_lo

    def contains(self, other: "CropBox") -> bool:
        return (self.row_lo <= other.row_lo and other.row_hi <= self.row_hi
                and self.col_lo <= other.col_lo and other.col_hi <= self.col_hi)


def union_mask(masks: AttributeMaskSet | Mapping[str, np.ndarray | None]) -> np.ndarray:
    """Pixelwise OR of all present attribute masks (the pretext label)."""
    if isinstance(masks, AttributeMaskSet):
        present = list(masks.masks.values())
        shape = masks.shape
    else:
        present = [as_mask(m) for m in masks.values() if m is not None]
        if not present:
            raise DimensionError("cannot infer mask shape: no mask present")
        shape = present[0].shape
    out = np.zeros(shape, dtype=np.uint8)
    for m in present:
        if m.shape != shape:
            raise DimensionError(f"mask shape {m.shape} differs from {shape}")
        np.bitwise_or(out, m, out=out)
    return out


def lesion_bbox(mask, offset: int = 40) -> CropBox:
    """Tight box around the nonzero pixels, grown by ``offset`` and clamped.

    An all-zero mask yields the full-image box.
    """
    if offset < 0:
        raise RangeError(f"offset must be >= 0, got {offset}")
    m = as_mask(mask)
    h, w = m.shape
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return CropBox(0, h, 0, w)
    return CropBox(
        max(0, int(rows[0]) - offset),
        min(h, int(rows[-1]) + 1 + offset),
        max(0, int(cols[0]) - offset),
        min(w, int(cols[-1]) + 1 + offset),
    )


def _check_box(box: CropBox, h: int, w: int):
    if not (0 <= box.row_lo < box.row_hi <= h and 0 <= box.col_lo < box.col_hi <= w):
        raise DimensionError(f"box {tuple(box)} outside a {h}x{w} array")


def crop(arr: np.ndarray, box: CropBox) -> np.ndarray:
    """Copy of the box region; the last two axes are the spatial ones."""
    a = np.asarray(arr)
    if a.ndim < 2:
        raise DimensionError("crop needs at least two axes")
    _check_box(box, a.shape[-2], a.shape[-1])
    return a[..., box.row_lo:box.row_hi, box.col_lo:box.col_hi].copy()


def paste(arr: np.ndarray, box: CropBox, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`crop`: place ``arr`` into a zero canvas of ``shape``."""
    a = np.asarray(arr)
    _check_box(box, *shape)
    if a.shape[-2:] != (box.height, box.width):
        raise DimensionError(f"array of shape {a.shape} does not fit box {tuple(box)}")
    out = np.zeros(a.shape[:-2] + tuple(shape), dtype=a.dtype)
    out[..., box.row_lo:box.row_hi, box.col_lo:box.col_hi] = a
    return out


def nearest_indices(src: int, dst: int) -> np.ndarray:
    # pixel-centre sampling: floor((i + 1/2) * src / dst), in exact integers
    return ((2 * np.arange(dst) + 1) * src) // (2 * dst)


def resize_mask(mask, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbour resampling; the output stays binary."""
    if new_h < 1 or new_w < 1:
        raise RangeError(f"target size must be positive, got {new_h}x{new_w}")
    m = as_mask(mask)
    rows = nearest_indices(m.shape[0], new_h)
    cols = nearest_indices(m.shape[1], new_w)
    return m[np.ix_(rows, cols)]


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    """1 where ``p >= threshold``. Accepts any shape whose values lie in [0, 1]."""
    p = np.asarray(probabilities, dtype=np.float64)
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise RangeError("probabilities must lie in [0, 1]")
    return (p >= threshold).astype(np.uint8)


# -- PGM (P5) mask files ---------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_pgm(path, mask) -> None:
    """Write a binary mask as an 8-bit P5 file with values 0/255."""
    m = as_mask(mask)
    h, w = m.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write((m * 255).astype(np.uint8).tobytes())
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    """Read a P5 file; any nonzero byte becomes 1."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IoError(f"cannot read mask file {path}: {exc}", path) from exc
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise IoError(f"truncated PGM header in {path}", path)
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise IoError(f"{path} is not a binary PGM (P5) file", path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IoError(f"malformed PGM header in {path}", path) from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise IoError(f"unsupported PGM geometry in {path}", path)
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise IoError(f"PGM payload too short in {path}", path)
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) != 0).astype(np.uint8)
