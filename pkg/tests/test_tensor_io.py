#!/usr/bin/env python3
"""
Binary Format Tests
===================

SWT1 tensors, Netpbm images and the checkpoint container.
"""

import io
import pathlib
import struct
import sys

import numpy as np
import pytest

# Add the scripts directory to path
sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "scripts"))

from tensor_engine import Tensor
from tensor_io import (
    CHECKPOINT_MAGIC,
    SWT_MAGIC,
    FormatError,
    decode_checkpoint,
    decode_tensor,
    encode_checkpoint,
    encode_tensor,
    load_tensor,
    read_netpbm,
    save_tensor,
    write_netpbm,
)


class TestSWT:
    def test_header_layout(self):
        raw = encode_tensor(Tensor(np.zeros((2, 3, 4, 5), np.float32)))
        assert raw[:8] == SWT_MAGIC
        assert struct.unpack("<4IB", raw[8:25]) == (2, 3, 4, 5, 0)
        assert len(raw) == 25 + 2 * 3 * 4 * 5 * 4

    def test_round_trip_preserves_dtype_and_values(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
        save_tensor(Tensor(data, dtype=np.float64), tmp_path / "t.swt")
        loaded = load_tensor(tmp_path / "t.swt")
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded.data, data)

    def test_lower_rank_is_left_padded(self):
        loaded = decode_tensor(io.BytesIO(encode_tensor(np.ones((4, 5), np.float32))))
        assert loaded.shape == (1, 1, 4, 5)

    def test_bad_magic(self):
        raw = b"NOTSWT1\0" + encode_tensor(np.ones(1, np.float32))[8:]
        with pytest.raises(FormatError):
            decode_tensor(io.BytesIO(raw))

    def test_truncated_payload(self):
        raw = encode_tensor(np.ones((1, 1, 2, 2), np.float32))
        with pytest.raises(FormatError):
            decode_tensor(io.BytesIO(raw[:-3]))

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_tensor(np.ones(3, np.int32))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tensor(tmp_path / "absent.swt")


class TestNetpbm:
    def test_pgm_with_comment_lines(self, tmp_path):
        path = tmp_path / "mask.pgm"
        path.write_bytes(b"P5\n# made by hand\n3 2\n# another\n255\n" + bytes([0, 128, 255, 1, 2, 3]))
        pixels, maxval = read_netpbm(path)
        assert maxval == 255
        np.testing.assert_array_equal(pixels, [[0, 128, 255], [1, 2, 3]])

    def test_ppm_exact_bytes(self, tmp_path):
        pixels = np.array([[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [10, 20, 30]]], np.uint8)
        path = tmp_path / "img.ppm"
        write_netpbm(path, pixels)
        assert path.read_bytes() == b"P6\n2 2\n255\n" + pixels.tobytes()
        loaded, _ = read_netpbm(path)
        np.testing.assert_array_equal(loaded, pixels)

    def test_sixteen_bit_big_endian(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5 2 1 65535\n" + struct.pack(">2H", 1000, 65535))
        pixels, maxval = read_netpbm(path)
        assert maxval == 65535
        np.testing.assert_array_equal(pixels, [[1000, 65535]])

    def test_ascii_variant_rejected(self, tmp_path):
        path = tmp_path / "ascii.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(FormatError, match="P5 or P6"):
            read_netpbm(path)

    def test_short_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
        with pytest.raises(FormatError):
            read_netpbm(path)

    def test_write_rejects_two_channel_pixels(self, tmp_path):
        with pytest.raises(FormatError):
            write_netpbm(tmp_path / "bad.ppm", np.zeros((2, 2, 2), np.uint8))


class TestCheckpoint:
    def entries(self):
        return [
            ("stem.first.conv.weight", Tensor(np.arange(6.0).reshape(1, 1, 2, 3), dtype=np.float32)),
            ("head.saliency.bias", Tensor(np.array([0.5]), dtype=np.float64)),
        ]

    def test_round_trip(self):
        config, entries = decode_checkpoint(encode_checkpoint({"variant": "full"}, self.entries()))
        assert config == {"variant": "full"}
        assert list(entries) == ["stem.first.conv.weight", "head.saliency.bias"]
        np.testing.assert_array_equal(entries["stem.first.conv.weight"].data[0, 0], [[0, 1, 2], [3, 4, 5]])
        assert entries["head.saliency.bias"].dtype == np.float64

    def test_encoding_is_deterministic(self):
        first = encode_checkpoint({"b": 1, "a": 2}, self.entries())
        second = encode_checkpoint({"a": 2, "b": 1}, self.entries())
        assert first == second
        assert first.startswith(CHECKPOINT_MAGIC)

    def test_single_flipped_byte_fails_crc(self):
        raw = bytearray(encode_checkpoint({}, self.entries()))
        raw[40] ^= 0x01
        with pytest.raises(FormatError, match="CRC"):
            decode_checkpoint(bytes(raw))

    def test_duplicate_paths_rejected(self):
        entry = self.entries()[0]
        with pytest.raises(FormatError, match="duplicate"):
            decode_checkpoint(encode_checkpoint({}, [entry, entry]))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"\0" * 64)
