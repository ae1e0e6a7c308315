"""
Binary parameter container
Shared on-disk format for frozen pre-trained blocks (version 1) and training checkpoints (version 2)

Layout (little-endian):
    magic "MLVG" | version u16 | architecture tag u8 | d_llm u32 | layer_index u32
    [version 2 only] metadata length u32 | metadata JSON bytes
    sections until the trailer:
        name length u16 | name bytes | [version 2 only] flags u8, dtype u8 |
        rank u8 | extents u32 x rank | values (float32, or the section dtype in version 2)
    trailer: 64-bit checksum of every preceding byte
"""

import contextlib
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List

import numpy as np

from exceptions import FormatError

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX platforms
    fcntl = None

logger = logging.getLogger(__name__)

MAGIC = b"MLVG"
FROZEN_VERSION = 1
CHECKPOINT_VERSION = 2
NO_ARCHITECTURE = 255

_HEADER = struct.Struct("<4sHBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
FLAG_TRAINABLE = 0x01


@dataclass
class ContainerSection:
    name: str
    array: np.ndarray
    trainable: bool = False


@dataclass
class Container:
    version: int
    architecture_tag: int
    d_llm: int
    layer_index: int
    sections: List[ContainerSection] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {section.name: section.array for section in self.sections}


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_container(container: Container) -> bytes:
    """Serialize a container to bytes"""
    if container.version not in (FROZEN_VERSION, CHECKPOINT_VERSION):
        raise ValueError(f"Unsupported container version {container.version}")
    parts = [_HEADER.pack(MAGIC, container.version, container.architecture_tag, container.d_llm, container.layer_index)]

    if container.version == CHECKPOINT_VERSION:
        metadata = json.dumps(container.metadata, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(metadata)))
        parts.append(metadata)

    for section in container.sections:
        name = section.name.encode("utf-8")
        array = np.asarray(section.array)
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        if container.version == CHECKPOINT_VERSION:
            dtype = np.dtype("<f8") if array.dtype == np.float64 else np.dtype("<f4")
            parts.append(struct.pack("<BB", FLAG_TRAINABLE if section.trainable else 0, _DTYPE_TAGS[dtype]))
        else:
            dtype = np.dtype("<f4")
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())

    payload = b"".join(parts)
    return payload + struct.pack("<Q", checksum64(payload))


def decode_container(raw: bytes) -> Container:
    """
    Parse container bytes

    Raises:
        FormatError: Bad magic, unknown version, truncation or checksum mismatch
    """
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("Bad magic bytes, expected 'MLVG'", 0)
    if len(raw) < _HEADER.size + 8:
        raise FormatError("File truncated inside the header", len(raw))
    _, version, architecture_tag, d_llm, layer_index = _HEADER.unpack_from(raw, 0)
    if version not in (FROZEN_VERSION, CHECKPOINT_VERSION):
        raise FormatError(f"Unsupported container version {version}", 4)

    end = len(raw) - 8
    (stored,) = struct.unpack_from("<Q", raw, end)
    if stored != checksum64(raw[:end]):
        raise FormatError("Checksum mismatch (file truncated or corrupt)", end)

    offset = _HEADER.size
    metadata: Dict[str, Any] = {}

    def need(count: int, what: str) -> None:
        if offset + count > end:
            raise FormatError(f"Truncated {what}", offset)

    if version == CHECKPOINT_VERSION:
        need(4, "metadata length")
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        need(length, "metadata")
        try:
            metadata = json.loads(raw[offset:offset + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"Unreadable metadata: {exc}", offset) from exc
        offset += length

    sections: List[ContainerSection] = []
    while offset < end:
        need(2, "section name length")
        (name_length,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        need(name_length, "section name")
        name = raw[offset:offset + name_length].decode("utf-8", errors="replace")
        offset += name_length

        trainable = False
        dtype = np.dtype("<f4")
        if version == CHECKPOINT_VERSION:
            need(2, f"flags of section '{name}'")
            flags, dtype_tag = struct.unpack_from("<BB", raw, offset)
            if dtype_tag not in _DTYPES:
                raise FormatError(f"Unknown dtype tag {dtype_tag} in section '{name}'", offset + 1)
            trainable = bool(flags & FLAG_TRAINABLE)
            dtype = _DTYPES[dtype_tag]
            offset += 2

        need(1, f"rank of section '{name}'")
        rank = raw[offset]
        offset += 1
        need(4 * rank, f"extents of section '{name}'")
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(count * dtype.itemsize, f"values of section '{name}'")
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * dtype.itemsize
        sections.append(ContainerSection(name=name, array=values.astype(dtype.newbyteorder("=")), trainable=trainable))

    return Container(version, architecture_tag, d_llm, layer_index, sections, metadata)


@contextlib.contextmanager
def exclusive_lock(path: str) -> Iterator[None]:
    """Hold an exclusive advisory lock on a sidecar lock file while writing `path`"""
    lock_path = f"{path}.lock"
    with open(lock_path, "w") as handle:
        if fcntl is not None:
            fcntl.flock(handle, fcntl.LOCK_EX)
        try:
            yield
        finally:
            if fcntl is not None:
                fcntl.flock(handle, fcntl.LOCK_UN)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write through a temporary file and rename, under the per-file lock"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with exclusive_lock(path):
        handle, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(handle, "wb") as stream:
                stream.write(payload)
            os.replace(temp_path, path)
        except Exception:
            with contextlib.suppress(OSError):
                os.remove(temp_path)
            raise


def write_container(path: str, container: Container) -> None:
    atomic_write_bytes(path, encode_container(container))
    logger.info(f"Wrote container v{container.version} with {len(container.sections)} sections to {path}")


def read_container(path: str) -> Container:
    with open(path, "rb") as stream:
        raw = stream.read()
    return decode_container(raw)
