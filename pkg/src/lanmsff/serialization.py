"""
Binary weight files.

Layout (all integers little-endian):

    header   magic b"LNMSFFW1" | version u16 | architecture hash (16 bytes)
             | payload length u64 | record count u32
    payload  per record: name length u16 | utf-8 name | dtype flag u8
             (0 = float32, 1 = float64) | rank u8 | extents u32 * rank
             | little-endian values
    trailer  blake2b-64 over header + payload

Records are every parameter in registration order followed by every
batch-normalization buffer. Values keep the model's own float width, so a
save/load round trip is bit-exact.

Loading checks, in order: magic, declared length (truncation), checksum,
architecture hash.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Tuple, Union

import numpy as np

from .exceptions import (
    ChecksumError,
    ConfigMismatchError,
    SerializationError,
    TruncatedPayloadError,
)
from .layers import load_state_arrays, state_arrays
from .model import LANMSFF, LANMSFFConfig, build_model

logger = logging.getLogger(__name__)

MAGIC = b"LNMSFFW1"
VERSION = 1
_HEADER = struct.Struct("<8sH16sQI")
_CHECKSUM_SIZE = 8
_DTYPE_FLAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_FLAG_DTYPES = {flag: dtype for dtype, flag in _DTYPE_FLAGS.items()}

Sink = Union[str, Path, BinaryIO]


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_SIZE).digest()


def encode_weights(model: LANMSFF) -> bytes:
    arrays = state_arrays(model)
    records: List[bytes] = []
    for name, array in arrays.items():
        dtype = np.dtype(array.dtype).newbyteorder("<")
        if dtype not in _DTYPE_FLAGS:
            raise SerializationError(f"{name}: unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        parts = [
            struct.pack("<H", len(encoded)),
            encoded,
            struct.pack("<BB", _DTYPE_FLAGS[dtype], array.ndim),
            struct.pack(f"<{array.ndim}I", *array.shape),
            np.ascontiguousarray(array, dtype=dtype).tobytes(),
        ]
        records.append(b"".join(parts))
    payload = b"".join(records)
    header = _HEADER.pack(MAGIC, VERSION, model.config.architecture_hash(), len(payload), len(records))
    return header + payload + _checksum(header + payload)


def decode_weights(blob: bytes, config: LANMSFFConfig) -> Dict[str, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(
            f"file holds {len(blob)} bytes, shorter than the {_HEADER.size}-byte header"
        )
    magic, version, arch_hash, payload_length, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SerializationError(f"not a LANMSFF weight file (magic {magic!r})")
    if version != VERSION:
        raise SerializationError(f"unsupported weight format version {version}")
    expected = _HEADER.size + payload_length + _CHECKSUM_SIZE
    if len(blob) < expected:
        raise TruncatedPayloadError(f"file holds {len(blob)} bytes, header declares {expected}")
    body = blob[: _HEADER.size + payload_length]
    if _checksum(body) != blob[_HEADER.size + payload_length : expected]:
        raise ChecksumError("weight file checksum does not match its contents")
    if arch_hash != config.architecture_hash():
        raise ConfigMismatchError(
            "weight file was written for a different architecture "
            f"(file {arch_hash.hex()}, config {config.architecture_hash().hex()})"
        )

    arrays: Dict[str, np.ndarray] = {}
    offset = _HEADER.size
    for _ in range(count):
        (name_length,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset : offset + name_length].decode("utf-8")
        offset += name_length
        flag, rank = struct.unpack_from("<BB", body, offset)
        offset += 2
        shape: Tuple[int, ...] = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        dtype = _FLAG_DTYPES.get(flag)
        if dtype is None:
            raise SerializationError(f"{name}: unknown dtype flag {flag}")
        size = int(np.prod(shape)) * dtype.itemsize
        arrays[name] = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += size
    if offset != len(body):
        raise SerializationError(f"payload has {len(body) - offset} trailing bytes after {count} records")
    return arrays


def save_weights(model: LANMSFF, sink: Sink) -> None:
    """Write ``model``'s parameters and BN statistics to a path or binary stream."""
    blob = encode_weights(model)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(blob)
        logger.info("wrote %d bytes of weights to %s", len(blob), sink)
    else:
        sink.write(blob)


def load_weights(source: Sink, config: LANMSFFConfig) -> LANMSFF:
    """
    Build a model for ``config`` and fill it from a weight file.

    Raises:
        TruncatedPayloadError: the file is shorter than its header declares.
        ChecksumError: the contents were altered.
        ConfigMismatchError: the file belongs to another architecture.
        SerializationError: any other structural defect.
    """
    blob = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    arrays = decode_weights(blob, config)
    model = build_model(config)
    expected = state_arrays(model)
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    if missing or unexpected:
        raise SerializationError(f"record names differ: missing {missing}, unexpected {unexpected}")
    for name, array in arrays.items():
        if array.shape != expected[name].shape:
            raise SerializationError(f"{name}: stored shape {array.shape}, model expects {expected[name].shape}")
    load_state_arrays(model, arrays)
    return model
