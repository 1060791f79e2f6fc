#!/usr/bin/env python3
"""
Binary formats: SWT1 tensors, Netpbm (P5/P6) images, checkpoint containers.

SWT1 layout:
    8-byte magic "SWTENS1\\0", 4 x uint32 LE dims (N, C, H, W),
    1-byte dtype tag (0=f32, 1=f64), raw LE values in row-major order.

Checkpoint layout:
    8-byte magic "SWCKPT1\\0", uint32 LE length + canonical JSON config,
    uint32 LE entry count, then per entry a uint32 LE length-prefixed UTF-8
    path followed by an SWT1 record, then a uint32 LE CRC32 of every
    preceding byte.
"""

import io
import json
import logging
import pathlib
import re
import struct
import zlib
from typing import Any, Dict, Iterable, Tuple, Union

import numpy as np

from tensor_engine import Tensor

logger = logging.getLogger(__name__)

SWT_MAGIC = b"SWTENS1\0"
CHECKPOINT_MAGIC = b"SWCKPT1\0"
DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, pathlib.Path]


class FormatError(ValueError):
    """Raised for corrupt or unsupported binary content."""


def _rank4(shape: Tuple[int, ...]) -> Tuple[int, int, int, int]:
    if len(shape) > 4:
        raise FormatError(f"SWT1 stores at most rank-4 tensors, got shape {shape}")
    return (1,) * (4 - len(shape)) + tuple(int(d) for d in shape)


def encode_tensor(tensor: Union[Tensor, np.ndarray]) -> bytes:
    """Serialize one tensor as an SWT1 record (lower ranks are left-padded with 1s)."""
    array = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if array.dtype not in DTYPE_TAGS:
        raise FormatError(f"SWT1 supports float32/float64 only, got {array.dtype}")
    tag = DTYPE_TAGS[array.dtype]
    header = SWT_MAGIC + struct.pack("<4IB", *_rank4(array.shape), tag)
    return header + np.ascontiguousarray(array, dtype=TAG_DTYPES[tag]).tobytes()


def decode_tensor(stream: io.BufferedIOBase) -> Tensor:
    """Read one SWT1 record from ``stream``."""
    header = stream.read(len(SWT_MAGIC) + 17)
    if len(header) < len(SWT_MAGIC) + 17 or header[:8] != SWT_MAGIC:
        raise FormatError("missing or truncated SWT1 header")
    n, c, h, w, tag = struct.unpack("<4IB", header[8:])
    if tag not in TAG_DTYPES:
        raise FormatError(f"unknown SWT1 dtype tag {tag}")
    if min(n, c, h, w) < 1:
        raise FormatError(f"SWT1 dims must be >= 1, got {(n, c, h, w)}")
    dtype = TAG_DTYPES[tag]
    count = n * c * h * w
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"SWT1 payload truncated: expected {count} values")
    array = np.frombuffer(payload, dtype=dtype).reshape(n, c, h, w)
    return Tensor(array, dtype=np.float32 if tag == 0 else np.float64)


def save_tensor(tensor: Union[Tensor, np.ndarray], path: PathLike) -> None:
    pathlib.Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path: PathLike) -> Tensor:
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor file not found: {path}")
    with open(path, "rb") as f:
        return decode_tensor(f)


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_netpbm(path: PathLike) -> Tuple[np.ndarray, int]:
    """
    Read a binary PGM (P5) or PPM (P6) file.

    Returns:
        tuple: (pixels as H x W or H x W x 3 unsigned array, maxval)

    Raises:
        FormatError: on an unknown magic number, bad header or short payload
    """
    data = pathlib.Path(path).read_bytes()
    tokens = []
    position = 0
    for _ in range(4):
        match = _HEADER_TOKEN.match(data, position)
        if not match:
            raise FormatError(f"truncated Netpbm header in {path}")
        tokens.append(match.group(1))
        position = match.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported Netpbm magic {magic!r} in {path} (expected P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"malformed Netpbm header in {path}: {e}") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid Netpbm geometry {width}x{height} maxval={maxval} in {path}")

    position += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = data[position:position + expected]
    if len(payload) != expected:
        raise FormatError(f"Netpbm payload truncated in {path}: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape), maxval


def write_netpbm(path: PathLike, pixels: np.ndarray) -> None:
    """Write 8-bit pixels as P5 (H x W) or P6 (H x W x 3)."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = "P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6"
    else:
        raise FormatError(f"cannot write pixels of shape {pixels.shape} as Netpbm")
    height, width = pixels.shape[:2]
    header = f"{magic}\n{width} {height}\n255\n".encode("ascii")
    pathlib.Path(path).write_bytes(header + np.clip(pixels, 0, 255).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(config: Dict[str, Any], entries: Iterable[Tuple[str, Tensor]]) -> bytes:
    body = io.BytesIO()
    body.write(CHECKPOINT_MAGIC)
    config_bytes = canonical_json(config).encode("utf-8")
    body.write(struct.pack("<I", len(config_bytes)))
    body.write(config_bytes)
    entries = list(entries)
    body.write(struct.pack("<I", len(entries)))
    for path, tensor in entries:
        name = path.encode("utf-8")
        body.write(struct.pack("<I", len(name)))
        body.write(name)
        body.write(encode_tensor(tensor))
    raw = body.getvalue()
    return raw + struct.pack("<I", zlib.crc32(raw) & 0xFFFFFFFF)


def decode_checkpoint(raw: bytes) -> Tuple[Dict[str, Any], Dict[str, Tensor]]:
    """
    Parse a checkpoint container.

    Returns:
        tuple: (config dict, ordered path -> tensor map)

    Raises:
        FormatError: bad magic, CRC mismatch or truncated records
    """
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(f"checkpoint CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}")

    stream = io.BytesIO(raw[8:-4])
    (config_len,) = struct.unpack("<I", stream.read(4))
    config = json.loads(stream.read(config_len).decode("utf-8"))
    (count,) = struct.unpack("<I", stream.read(4))
    entries: Dict[str, Tensor] = {}
    for _ in range(count):
        length_bytes = stream.read(4)
        if len(length_bytes) != 4:
            raise FormatError("checkpoint truncated inside entry table")
        (name_len,) = struct.unpack("<I", length_bytes)
        name = stream.read(name_len).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate checkpoint path: {name}")
        entries[name] = decode_tensor(stream)
    logger.debug(f"Decoded checkpoint with {len(entries)} entries")
    return config, entries
