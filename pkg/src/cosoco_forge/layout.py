"""Hilbert tile layout between archive byte offsets and image pixels.

Bytes are cut into ``w*w`` chunks; each chunk fills one ``w x w`` tile along
a Hilbert curve and tiles are stacked top to bottom. The curve starts at
``(x, y) = (0, 0)`` and ends at ``(w - 1, 0)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .tar import TarStream

HILBERT_ORIENTATION = "hilbert-qr/origin=0,0/end=n-1,0"

# Byte-class channel codes.
CLASS_PADDING = 0
CLASS_ZERO = 32
CLASS_ASCII = 96
CLASS_OTHER = 160
CLASS_FF = 224

STRUCT_PADDING = 0
STRUCT_PALETTE = tuple(32 + 24 * i for i in range(8))
STRUCT_HEADER_OFFSET = 16

CHANNELS = ("value", "byte_class", "structure")


class LayoutError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _check_order(order: int) -> int:
    if order < 1:
        raise LayoutError(f"Hilbert order must be positive, got {order}")
    return 1 << order


def hilbert_d2xy(order: int, d: int) -> Tuple[int, int]:
    n = _check_order(order)
    if not 0 <= d < n * n:
        raise IndexError(f"index {d} outside [0, {n * n})")
    x = y = 0
    t = d
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x, y = s - 1 - x, s - 1 - y
            x, y = y, x
        x += s * rx
        y += s * ry
        t //= 4
        s *= 2
    return x, y


def hilbert_xy2d(order: int, x: int, y: int) -> int:
    n = _check_order(order)
    if not (0 <= x < n and 0 <= y < n):
        raise IndexError(f"cell ({x}, {y}) outside {n}x{n} grid")
    d = 0
    s = n // 2
    while s > 0:
        rx = 1 if x & s else 0
        ry = 1 if y & s else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x, y = s - 1 - (x & (s - 1)), s - 1 - (y & (s - 1))
            x, y = y, x
        s //= 2
    return d


@lru_cache(maxsize=16)
def hilbert_table(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised ``d -> (x, y)`` for all ``4**order`` indices (read-only)."""
    n = _check_order(order)
    t = np.arange(n * n, dtype=np.int64)
    x = np.zeros_like(t)
    y = np.zeros_like(t)
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x = x + s * rx
        y = y + s * ry
        t = t // 4
        s *= 2
    x.flags.writeable = False
    y.flags.writeable = False
    return x, y


@lru_cache(maxsize=16)
def hilbert_inverse_table(order: int) -> np.ndarray:
    """``inv[y, x] = d`` for the order's grid (read-only)."""
    n = 1 << order
    xs, ys = hilbert_table(order)
    inv = np.empty((n, n), dtype=np.int64)
    inv[ys, xs] = np.arange(n * n)
    inv.flags.writeable = False
    return inv


@dataclass(frozen=True)
class TileLayout:
    tile_width: int
    n_bytes: int

    def __post_init__(self):
        if not _is_pow2(self.tile_width) or self.tile_width < 2:
            raise LayoutError(f"tile width must be a power of two >= 2, got {self.tile_width}")
        if self.n_bytes < 0:
            raise LayoutError("n_bytes must be non-negative")

    @property
    def order(self) -> int:
        return self.tile_width.bit_length() - 1

    @property
    def tile_bytes(self) -> int:
        return self.tile_width * self.tile_width

    @property
    def n_tiles(self) -> int:
        return max(1, -(-self.n_bytes // self.tile_bytes))

    @property
    def capacity(self) -> int:
        return self.n_tiles * self.tile_bytes

    @property
    def image_width(self) -> int:
        return self.tile_width

    @property
    def image_height(self) -> int:
        return self.n_tiles * self.tile_width

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image_height, self.image_width


def offset_to_pixel(layout: TileLayout, offset: int) -> Tuple[int, int]:
    if not 0 <= offset < layout.capacity:
        raise IndexError(f"offset {offset} outside [0, {layout.capacity})")
    t, d = divmod(offset, layout.tile_bytes)
    x, y = hilbert_d2xy(layout.order, d)
    return t * layout.tile_width + y, x


def pixel_to_offset(layout: TileLayout, row: int, col: int) -> int:
    h, w = layout.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} image")
    t, y = divmod(row, layout.tile_width)
    return t * layout.tile_bytes + hilbert_xy2d(layout.order, col, y)


def offsets_to_pixels(layout: TileLayout, offsets) -> Tuple[np.ndarray, np.ndarray]:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.size and (offsets.min() < 0 or offsets.max() >= layout.capacity):
        raise IndexError("offsets outside layout capacity")
    xs, ys = hilbert_table(layout.order)
    t, d = np.divmod(offsets, layout.tile_bytes)
    return t * layout.tile_width + ys[d], xs[d]


def pixels_to_offsets(layout: TileLayout, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    inv = hilbert_inverse_table(layout.order)
    t, y = np.divmod(rows, layout.tile_width)
    return t * layout.tile_bytes + inv[y, cols]


def byte_class_table() -> np.ndarray:
    table = np.full(256, CLASS_OTHER, dtype=np.uint8)
    table[0x20:0x7F] = CLASS_ASCII
    table[[0x09, 0x0A, 0x0D]] = CLASS_ASCII
    table[0x00] = CLASS_ZERO
    table[0xFF] = CLASS_FF
    return table


_CLASS_TABLE = byte_class_table()


def byte_class(b: int) -> int:
    return int(_CLASS_TABLE[b])


def structure_codes(stream: TarStream) -> np.ndarray:
    """Per-byte structure code: palette colour per member, brighter on headers."""
    codes = np.full(stream.total_len, STRUCT_PADDING, dtype=np.uint8)
    for i, e in enumerate(stream.entries):
        base = STRUCT_PALETTE[i % len(STRUCT_PALETTE)]
        off, n = e.header_span
        codes[off:off + n] = base + STRUCT_HEADER_OFFSET
        off, n = e.content_span
        codes[off:off + n] = base
    return codes


@dataclass(frozen=True, eq=False)
class EncodedImage:
    """``pixels`` is ``(height, width, 3)`` uint8: value, byte class, structure."""

    pixels: np.ndarray
    layout: TileLayout
    source_digest: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def value(self) -> np.ndarray:
        return self.pixels[..., 0]

    @property
    def byte_class(self) -> np.ndarray:
        return self.pixels[..., 1]

    @property
    def structure(self) -> np.ndarray:
        return self.pixels[..., 2]

    @property
    def is_full_resolution(self) -> bool:
        return self.pixels.shape[:2] == self.layout.shape

    def metadata(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "tile_width": self.layout.tile_width,
            "n_bytes": self.layout.n_bytes,
            "channels": list(CHANNELS),
            "orientation": HILBERT_ORIENTATION,
            "source_sha256": self.source_digest,
        }


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray
    layout: TileLayout
    ranges: Tuple[Tuple[int, int], ...] = ()

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def ratio(self) -> float:
        return float(self.bits.sum()) / self.bits.size


def _scatter(layout: TileLayout, flat: np.ndarray) -> np.ndarray:
    """Place a ``capacity``-long per-offset array into image shape."""
    w = layout.tile_width
    xs, ys = hilbert_table(layout.order)
    out = np.empty((layout.n_tiles, w, w) + flat.shape[1:], dtype=flat.dtype)
    out[:, ys, xs] = flat.reshape((layout.n_tiles, layout.tile_bytes) + flat.shape[1:])
    return out.reshape((layout.image_height, w) + flat.shape[1:])


def _gather(layout: TileLayout, image: np.ndarray) -> np.ndarray:
    w = layout.tile_width
    xs, ys = hilbert_table(layout.order)
    tiles = image.reshape((layout.n_tiles, w, w) + image.shape[2:])
    return tiles[:, ys, xs].reshape((layout.capacity,) + image.shape[2:])


def encode_image(stream: TarStream, w: int = 256) -> EncodedImage:
    if not _is_pow2(w) or w < 2:
        raise LayoutError(f"tile width must be a power of two >= 2, got {w}")
    if stream.total_len == 0:
        raise LayoutError("cannot encode an empty byte stream")
    layout = TileLayout(w, stream.total_len)
    n = stream.total_len
    raw = np.frombuffer(stream.raw_bytes, dtype=np.uint8)
    flat = np.zeros((layout.capacity, 3), dtype=np.uint8)
    flat[:n, 0] = raw
    flat[:n, 1] = _CLASS_TABLE[raw]
    flat[:n, 2] = structure_codes(stream)
    digest = hashlib.sha256(stream.raw_bytes).hexdigest()
    return EncodedImage(_scatter(layout, flat), layout, digest)


def decode_bytes(image: EncodedImage) -> bytes:
    """Read the value channel back in offset order, dropping tail padding."""
    if not image.is_full_resolution:
        raise LayoutError("cannot decode a resampled image")
    flat = _gather(image.layout, image.value)
    return flat[: image.layout.n_bytes].tobytes()


def merge_ranges(ranges: Iterable[Sequence[int]]) -> List[Tuple[int, int]]:
    """Merge overlapping or touching ``(offset, length)`` ranges."""
    spans = sorted((int(o), int(o) + int(n)) for o, n in ranges if int(n) > 0)
    merged: List[List[int]] = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b - a) for a, b in merged]


def build_mask(layout: TileLayout, affected_ranges: Iterable[Sequence[int]]) -> Mask:
    ranges = merge_ranges(affected_ranges)
    flat = np.zeros(layout.capacity, dtype=np.uint8)
    for off, n in ranges:
        if off < 0 or off + n > layout.n_bytes:
            raise IndexError(f"range ({off}, {n}) outside [0, {layout.n_bytes})")
        flat[off:off + n] = 1
    return Mask(_scatter(layout, flat), layout, tuple(ranges))


def _block_factors(h: int, w: int, th: int, tw: int) -> Tuple[int, int]:
    if th <= 0 or tw <= 0:
        raise LayoutError("target dimensions must be positive")
    if th > h or tw > w:
        raise LayoutError(f"target {th}x{tw} larger than source {h}x{w}")
    if w % tw:
        raise LayoutError(f"target width {tw} does not divide source width {w}")
    return -(-h // th), w // tw


def _pad_height(a: np.ndarray, rows: int) -> np.ndarray:
    if a.shape[0] == rows:
        return a
    pad = [(0, rows - a.shape[0])] + [(0, 0)] * (a.ndim - 1)
    return np.pad(a, pad)


def downsample(image: EncodedImage, target_h: int, target_w: int) -> EncodedImage:
    """Block-mean resample (round half up) of all three channels."""
    fy, fx = _block_factors(image.height, image.width, target_h, target_w)
    src = _pad_height(image.pixels, target_h * fy).astype(np.int64)
    sums = src.reshape(target_h, fy, target_w, fx, 3).sum(axis=(1, 3))
    count = fy * fx
    out = ((2 * sums + count) // (2 * count)).astype(np.uint8)
    return EncodedImage(out, image.layout, image.source_digest)


def downsample_mask(mask: Mask, target_h: int, target_w: int) -> Mask:
    fy, fx = _block_factors(mask.height, mask.width, target_h, target_w)
    src = _pad_height(mask.bits, target_h * fy)
    out = src.reshape(target_h, fy, target_w, fx).max(axis=(1, 3))
    return Mask(out.astype(np.uint8), mask.layout, mask.ranges)
