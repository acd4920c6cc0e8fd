# storage.py
"""
Byte-exact file formats: tensors, trajectories, the reference K/V cache,
cross-attention maps, and binary PPM/PGM images.

Layouts are documented in FILE_FORMATS.md. All integers and floats are
little-endian; every float payload is 32-bit.
"""

import hashlib
import logging
import re
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import torch

from attention import AttentionSite, ReferenceFeatureCache
from errors import (
    ChecksumMismatch, CorruptHeader, DuplicateEntry, IncompleteCache, IoError,
    MalformedHeader, TruncatedPayload, UnsupportedFormat,
)
from masks import CrossAttnRecord
from scheduler import LatentTrajectory

PathLike = Union[str, Path]

TENSOR_MAGIC = b"SPRF"
KV_MAGIC = b"SPRK"
MAPS_MAGIC = b"SPRM"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0

_TENSOR_HEADER = struct.Struct("<4sIBI")
_U32 = struct.Struct("<I")
_CONTAINER_HEADER = struct.Struct("<4sII")
_ENTRY_KEY = struct.Struct("<II")
_DIGEST_SIZE = 32


# -------------------------
# low-level file helpers
# -------------------------
def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        logging.exception("Read failed: %s", path)
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path: PathLike, payload: bytes):
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        logging.exception("Write failed: %s", path)
        raise IoError(f"cannot write {path}: {exc}") from exc


class _Cursor:
    """Bounded reader over a byte buffer; short reads raise TruncatedPayload."""

    def __init__(self, buffer: bytes, offset: int = 0, end: int = None):
        self.buffer = buffer
        self.offset = offset
        self.end = len(buffer) if end is None else end

    def take(self, count: int) -> bytes:
        if self.offset + count > self.end:
            raise TruncatedPayload(f"needed {count} bytes at offset {self.offset}, only {self.end - self.offset} left")
        chunk = self.buffer[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def remaining(self) -> int:
        return self.end - self.offset


def _seal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def _unseal(buffer: bytes, what: str) -> bytes:
    if len(buffer) < _DIGEST_SIZE:
        raise TruncatedPayload(f"{what} is shorter than its checksum")
    body, digest = buffer[:-_DIGEST_SIZE], buffer[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"{what} checksum does not match its contents")
    return body


# -------------------------
# TensorFile
# -------------------------
def pack_tensor(tensor: torch.Tensor) -> bytes:
    array = tensor.detach().to(torch.float32).contiguous().numpy()
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, array.ndim)
    dims = b"".join(_U32.pack(d) for d in array.shape)
    return header + dims + array.astype("<f4").tobytes(order="C")


def unpack_tensor(cursor: _Cursor) -> torch.Tensor:
    magic, version, dtype, ndim = cursor.unpack(_TENSOR_HEADER)
    if magic != TENSOR_MAGIC:
        raise CorruptHeader(f"bad tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeader(f"unsupported tensor version {version}")
    if dtype != DTYPE_FLOAT32:
        raise CorruptHeader(f"unsupported tensor dtype code {dtype}")
    dims = [cursor.unpack(_U32)[0] for _ in range(ndim)]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = cursor.take(4 * count)
    array = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return torch.from_numpy(array.copy())


def write_tensor(path: PathLike, tensor: torch.Tensor):
    _write_bytes(path, pack_tensor(tensor))
    logging.info("Wrote tensor %s to %s", tuple(tensor.shape), path)


def read_tensor(path: PathLike) -> torch.Tensor:
    cursor = _Cursor(_read_bytes(path))
    tensor = unpack_tensor(cursor)
    if cursor.remaining():
        raise CorruptHeader(f"{cursor.remaining()} trailing bytes after tensor in {path}")
    return tensor


# -------------------------
# trajectories
# -------------------------
def write_trajectory(path: PathLike, trajectory: LatentTrajectory):
    write_tensor(path, trajectory.stack())


def read_trajectory(path: PathLike) -> LatentTrajectory:
    return LatentTrajectory.from_stack(read_tensor(path))


# -------------------------
# reference K/V cache
# -------------------------
def write_kv_cache(path: PathLike, cache: ReferenceFeatureCache):
    cache.validate()
    parts = [_CONTAINER_HEADER.pack(KV_MAGIC, FORMAT_VERSION, len(cache))]
    for t, layer in cache.keys():
        K, V = cache.lookup_kv(t, layer)
        parts.append(_ENTRY_KEY.pack(t, layer))
        parts.append(pack_tensor(K))
        parts.append(pack_tensor(V))
    _write_bytes(path, _seal(b"".join(parts)))
    logging.info("Wrote reference cache with %d entries to %s", len(cache), path)


def read_kv_cache(path: PathLike, sites: List[AttentionSite] = None) -> ReferenceFeatureCache:
    """
    Parse a KVCacheFile. Sites default to one single-head site per stored
    layer; pass the backend's sites to recover head layout and resolution.
    """
    cursor = _Cursor(_unseal(_read_bytes(path), f"reference cache {path}"))
    magic, version, count = cursor.unpack(_CONTAINER_HEADER)
    if magic != KV_MAGIC:
        raise CorruptHeader(f"bad reference cache magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeader(f"unsupported reference cache version {version}")
    if count < 1:
        raise IncompleteCache("reference cache file holds no entries")

    sites_by_layer = {s.layer_index: s for s in (sites or [])}
    cache = ReferenceFeatureCache(sites or [])
    previous = None
    for _ in range(count):
        key = cursor.unpack(_ENTRY_KEY)
        if key == previous:
            raise DuplicateEntry(f"reference cache repeats step {key[0]}, layer {key[1]}")
        if previous is not None and key < previous:
            raise CorruptHeader(f"reference cache entries out of order at {key}")
        previous = key
        K = unpack_tensor(cursor)
        V = unpack_tensor(cursor)
        t, layer = key
        site = sites_by_layer.get(layer) or AttentionSite(layer, (1, K.shape[0]), 1, K.shape[1])
        cache.record_kv(t, site, K, V)
    if cursor.remaining():
        raise CorruptHeader(f"{cursor.remaining()} trailing bytes in reference cache {path}")
    return cache


# -------------------------
# cross-attention maps
# -------------------------
def write_cross_attn(path: PathLike, record: CrossAttnRecord):
    parts = [_CONTAINER_HEADER.pack(MAPS_MAGIC, FORMAT_VERSION, len(record))]
    for step, layer, (h, w), probs in record.entries():
        heads, _, seq_len = probs.shape
        parts.append(_ENTRY_KEY.pack(step, layer))
        parts.append(pack_tensor(probs.reshape(heads, h, w, seq_len)))
    _write_bytes(path, _seal(b"".join(parts)))
    logging.info("Wrote %d cross-attention entries (%d maps) to %s", len(record), record.map_count(), path)


def read_cross_attn(path: PathLike) -> CrossAttnRecord:
    cursor = _Cursor(_unseal(_read_bytes(path), f"cross-attention maps {path}"))
    magic, version, count = cursor.unpack(_CONTAINER_HEADER)
    if magic != MAPS_MAGIC:
        raise CorruptHeader(f"bad cross-attention maps magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeader(f"unsupported cross-attention maps version {version}")

    record = CrossAttnRecord()
    for _ in range(count):
        step, layer = cursor.unpack(_ENTRY_KEY)
        grid = unpack_tensor(cursor)
        if grid.dim() != 4:
            raise CorruptHeader(f"cross-attention entry ({step}, {layer}) is not [heads, h, w, tokens]")
        heads, h, w, seq_len = grid.shape
        record.add_probs(step, layer, (h, w), grid.reshape(heads, h * w, seq_len))
    if cursor.remaining():
        raise CorruptHeader(f"{cursor.remaining()} trailing bytes in cross-attention maps {path}")
    return record


# -------------------------
# PPM / PGM
# -------------------------
_WHITESPACE = b" \t\n\r\v\f"


def _parse_netpbm(buffer: bytes, expected: bytes) -> Tuple[int, int, int]:
    """Return (width, height, raster offset) of a binary P5/P6 image."""
    if len(buffer) < 2:
        raise MalformedHeader("file too short for a netpbm header")
    magic = buffer[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6") and magic != expected:
        raise UnsupportedFormat(f"{magic.decode()} image where {expected.decode()} was expected")
    if magic != expected:
        raise MalformedHeader(f"not a netpbm file (magic {magic!r})")

    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(buffer):
            raise MalformedHeader("header ends before width, height and maxval")
        byte = buffer[pos:pos + 1]
        if byte in (b"#",):
            newline = buffer.find(b"\n", pos)
            pos = len(buffer) if newline < 0 else newline + 1
        elif byte in [bytes([c]) for c in _WHITESPACE]:
            pos += 1
        else:
            match = re.match(rb"[0-9]+", buffer[pos:])
            if not match:
                raise MalformedHeader(f"unexpected byte {byte!r} in header")
            token = match.group(0)
            pos += len(token)
            if pos < len(buffer) and buffer[pos] not in _WHITESPACE and buffer[pos:pos + 1] != b"#":
                raise MalformedHeader("header field is not followed by whitespace")
            fields.append(int(token))

    if pos >= len(buffer) or buffer[pos] not in _WHITESPACE:
        raise MalformedHeader("missing whitespace between header and raster")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeader(f"invalid image size {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"maxval {maxval} not supported (8-bit only)")
    return width, height, pos + 1


def _read_netpbm(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    buffer = _read_bytes(path)
    width, height, offset = _parse_netpbm(buffer, magic)
    size = width * height * channels
    raster = buffer[offset:offset + size]
    if len(raster) < size:
        raise TruncatedPayload(f"{path}: raster has {len(raster)} of {size} bytes")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return np.frombuffer(raster, dtype=np.uint8).reshape(shape).copy()


def _write_netpbm(path: PathLike, image: np.ndarray, magic: bytes):
    height, width = image.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    _write_bytes(path, header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    logging.info("Wrote %dx%d %s image to %s", width, height, magic.decode(), path)


def read_ppm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_ppm(path: PathLike, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise UnsupportedFormat(f"PPM needs an [H, W, 3] image, got {image.shape}")
    _write_netpbm(path, image, b"P6")


def read_pgm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def write_pgm(path: PathLike, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2:
        raise UnsupportedFormat(f"PGM needs an [H, W] image, got {image.shape}")
    _write_netpbm(path, image, b"P5")
