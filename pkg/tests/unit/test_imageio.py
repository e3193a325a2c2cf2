"""Unit tests for array dumps, bundles and PGM previews"""

import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest

from stoch_future.errors import DatasetError
from stoch_future.imageio import (HEADER_SIZE, INSTANCE_PALETTE, MAGIC, decode_array,
                                  encode_array, frame_to_2d, instance_map_to_gray, read_array,
                                  read_bundle, read_pgm, tile_frames, to_uint8, write_array,
                                  write_bundle, write_pgm, write_sequence_preview)


def test_block_header_layout():
    """Test magic, dtype code, rank and extents"""
    blob = encode_array(np.zeros((2, 3), dtype=np.float32))

    assert blob[:7] == MAGIC
    assert blob[7:9] == bytes([1, 2])
    assert blob[9:HEADER_SIZE] == bytes(7)
    assert struct.unpack('<2I', blob[HEADER_SIZE:HEADER_SIZE + 8]) == (2, 3)
    assert len(blob) == HEADER_SIZE + 8 + 6 * 4


def test_int64_is_stored_as_int32():
    """Test that default numpy integers are narrowed"""
    array, _ = decode_array(encode_array(np.arange(4)))

    assert array.dtype == np.int32
    np.testing.assert_array_equal(array, [0, 1, 2, 3])


def test_unsupported_dtype_rejected():
    """Test that complex arrays cannot be encoded"""
    with pytest.raises(DatasetError):
        encode_array(np.zeros(2, dtype=np.complex128))


def test_bad_magic_and_truncation():
    """Test decoding errors"""
    blob = encode_array(np.ones(4))

    with pytest.raises(DatasetError):
        decode_array(b'XXXXXXX' + blob[7:])
    with pytest.raises(DatasetError):
        decode_array(blob[:-1])


def test_array_file():
    """Test writing an array into a nested directory"""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_array(str(Path(tmpdir) / 'a' / 'x.sdl'), np.eye(3))

        np.testing.assert_array_equal(read_array(path), np.eye(3))


def test_bundle_names_are_sorted():
    """Test that bundles keep every named array"""
    arrays = {'frames': np.zeros((2, 1, 3, 3)), 'depth': np.ones((2, 1, 3, 3), np.float32),
              'seed': np.array([4], dtype=np.int32)}
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_bundle(str(Path(tmpdir) / 'seq.sdl'), arrays)
        blob = Path(path).read_bytes()
        loaded = read_bundle(path)

    assert blob[2:7] == b'depth'
    assert set(loaded) == set(arrays)
    assert loaded['depth'].dtype == np.float32
    assert int(loaded['seed'][0]) == 4


def test_missing_bundle():
    """Test that a missing sequence file is a dataset error"""
    with pytest.raises(DatasetError):
        read_bundle('/nonexistent/seq.sdl')


def test_to_uint8_scaling():
    """Test min/max scaling, clipping and flat images"""
    np.testing.assert_array_equal(to_uint8(np.array([0.0, 0.5, 1.0])), [0, 128, 255])
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 2.0]), 0.0, 1.0), [0, 255])
    assert not to_uint8(np.full((2, 2), 3.0)).any()


def test_pgm_file():
    """Test the P5 header and pixel payload"""
    image = np.array([[0.0, 1.0], [0.5, 0.25]])
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_pgm(str(Path(tmpdir) / 'x.pgm'), image, 0.0, 1.0)
        assert Path(path).read_bytes().startswith(b'P5\n2 2\n255\n')
        pixels = read_pgm(path)

    np.testing.assert_array_equal(pixels, [[0, 255], [128, 64]])


def test_pgm_needs_2d():
    """Test that colour stacks are refused"""
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(DatasetError):
            write_pgm(str(Path(tmpdir) / 'x.pgm'), np.zeros((3, 2, 2)))


def test_instance_palette():
    """Test that background is black and ids cycle through the palette"""
    gray = instance_map_to_gray(np.array([0, 1, 2, 16]))

    assert gray[0] == 0
    assert gray[1] == INSTANCE_PALETTE[1]
    assert gray[2] == INSTANCE_PALETTE[2]
    assert gray[3] == INSTANCE_PALETTE[1]


def test_tile_frames_layout():
    """Test grid size, padding and frame placement"""
    grid = tile_frames([np.zeros((2, 3)), np.full((2, 3), 0.5), np.ones((2, 3))], columns=2)

    assert grid.shape == (2 * 3 + 1, 2 * 4 + 1)
    assert grid[1, 1] == 0.0
    assert grid[1, 5] == 0.5
    assert grid[4, 1] == 1.0
    assert grid[0, 0] == 1.0


def test_frame_to_2d_averages_channels():
    """Test channel averaging"""
    frame = np.stack([np.zeros((2, 2)), np.ones((2, 2))])

    np.testing.assert_array_equal(frame_to_2d(frame), np.full((2, 2), 0.5))
    assert frame_to_2d(np.zeros((4, 5))).shape == (4, 5)


def test_sequence_preview_pads_short_rows():
    """Test that rows of different lengths share one grid"""
    rows = [[np.zeros((1, 2, 2))] * 3, [np.zeros((1, 2, 2))]]
    with tempfile.TemporaryDirectory() as tmpdir:
        pixels = read_pgm(write_sequence_preview(str(Path(tmpdir) / 'p.pgm'), rows))

    assert pixels.shape == (2 * 3 + 1, 3 * 3 + 1)
    assert pixels[4, 4] == 255
    assert pixels[4, 1] == 0
