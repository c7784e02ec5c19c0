import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosoco_forge.layout import (CLASS_ASCII, CLASS_FF, CLASS_OTHER, CLASS_PADDING, CLASS_ZERO,
                                 STRUCT_HEADER_OFFSET, STRUCT_PALETTE, LayoutError, TileLayout,
                                 build_mask, byte_class, decode_bytes, downsample, downsample_mask,
                                 encode_image, hilbert_d2xy, hilbert_table, hilbert_xy2d, merge_ranges,
                                 offset_to_pixel, offsets_to_pixels, pixel_to_offset, pixels_to_offsets)
from cosoco_forge.tar import parse_tar

from conftest import make_tar
from oracles import hilbert_cells

# frozen from the recursive oracle in oracles.py
ORDER2 = {0: (0, 0), 1: (1, 0), 2: (1, 1), 3: (0, 1), 5: (0, 3), 6: (1, 3), 7: (1, 2), 15: (3, 0)}
ORDER3_D17 = (1, 4)
ORDER8_D12345 = (62, 123)


def test_frozen_hilbert_cells():
    for d, xy in ORDER2.items():
        assert hilbert_d2xy(2, d) == xy
    assert hilbert_d2xy(3, 17) == ORDER3_D17
    assert hilbert_d2xy(8, 12345) == ORDER8_D12345
    assert hilbert_xy2d(3, *ORDER3_D17) == 17


@pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
def test_matches_recursive_oracle(order):
    cells = hilbert_cells(order)
    xs, ys = hilbert_table(order)
    assert list(zip(xs.tolist(), ys.tolist())) == cells
    assert [hilbert_d2xy(order, d) for d in range(len(cells))] == cells


def test_curve_endpoints():
    for order in range(1, 9):
        n = 1 << order
        assert hilbert_d2xy(order, 0) == (0, 0)
        assert hilbert_d2xy(order, n * n - 1) == (n - 1, 0)


def test_hilbert_errors():
    with pytest.raises(LayoutError):
        hilbert_d2xy(0, 0)
    with pytest.raises(IndexError):
        hilbert_d2xy(2, 16)
    with pytest.raises(IndexError):
        hilbert_xy2d(2, 4, 0)


def test_byte_classes():
    assert byte_class(0x00) == CLASS_ZERO
    assert byte_class(0xFF) == CLASS_FF
    assert byte_class(ord("A")) == CLASS_ASCII
    assert byte_class(0x0A) == CLASS_ASCII
    assert byte_class(0x7F) == CLASS_OTHER
    assert byte_class(0x80) == CLASS_OTHER


def test_first_tile_maps_first_bytes():
    lay = TileLayout(256, 200_000)
    assert lay.shape == (4 * 256, 256)
    assert offset_to_pixel(lay, 0) == (0, 0)
    assert offset_to_pixel(lay, 65535) == (0, 255)
    assert offset_to_pixel(lay, 65536) == (256, 0)
    assert pixel_to_offset(lay, 256 + 1, 0) == 65536 + 3  # (x=0, y=1) is the 4th cell
    with pytest.raises(IndexError):
        offset_to_pixel(lay, lay.capacity)


@given(st.integers(1, 6), st.integers(0, 10**6))
def test_pixel_offset_inverse(order, n_bytes):
    lay = TileLayout(1 << order, n_bytes)
    offs = np.arange(lay.capacity)
    r, c = offsets_to_pixels(lay, offs)
    assert np.array_equal(pixels_to_offsets(lay, r, c), offs)
    k = int(offs[-1] // 2)
    assert pixel_to_offset(lay, *offset_to_pixel(lay, k)) == k


def test_encode_channels_and_padding(small_tar):
    s = parse_tar(small_tar)
    im = encode_image(s, 64)
    assert im.pixels.shape == (64 * -(-s.total_len // 4096), 64, 3)
    assert decode_bytes(im) == small_tar
    flat_struct = np.zeros(im.layout.capacity, np.uint8)
    r, c = offsets_to_pixels(im.layout, np.arange(im.layout.capacity))
    flat_struct = im.structure[r, c]
    e = s.entries[1]
    assert flat_struct[e.header_span[0]] == STRUCT_PALETTE[1] + STRUCT_HEADER_OFFSET
    assert flat_struct[e.content_span[0]] == STRUCT_PALETTE[1]
    assert flat_struct[e.content_end] == 0  # padding
    pad = im.byte_class[r[s.total_len:], c[s.total_len:]]
    assert (pad == CLASS_PADDING).all()


def test_mask_counts_and_ranges():
    lay = TileLayout(16, 1000)
    m = build_mask(lay, [(10, 5), (12, 10), (500, 1)])
    assert m.ranges == ((10, 12), (500, 1))
    assert m.bits.sum() == 13
    rows, cols = np.nonzero(m.bits)
    offs = set(pixels_to_offsets(lay, rows, cols).tolist())
    assert offs == set(range(10, 22)) | {500}
    with pytest.raises(IndexError):
        build_mask(lay, [(995, 10)])


def test_merge_ranges():
    assert merge_ranges([(5, 2), (0, 3), (3, 2), (20, 0)]) == [(0, 7)]


def test_downsample_round_half_up():
    data = make_tar([("a", bytes([1, 2] * 3000))])
    im = encode_image(parse_tar(data), 16)
    small = downsample(im, im.height // 2, 8)
    blk = im.pixels[:2, :2].astype(int).sum(axis=(0, 1))
    assert small.pixels[0, 0].tolist() == ((2 * blk + 4) // 8).tolist()
    with pytest.raises(LayoutError):
        downsample(im, im.height, 5)
    with pytest.raises(LayoutError):
        downsample(im, im.height + 1, 16)


def test_downsample_mask_keeps_any_bit():
    lay = TileLayout(16, 512)
    m = build_mask(lay, [(3, 1)])
    d = downsample_mask(m, 1, 1)
    assert d.bits.tolist() == [[1]]
    h_pad = downsample_mask(build_mask(TileLayout(16, 600), [(0, 1)]), 3, 4)
    assert h_pad.bits.shape == (3, 4) and h_pad.bits.sum() == 1
