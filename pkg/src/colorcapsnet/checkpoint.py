# checkpoint.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

# Byte layout (all integers little-endian u32, payloads little-endian float32):
#   b"CCPS" | version | entry count
#   per entry: name length | UTF-8 name | rank | extents... | payload
#   metadata count | per pair: key length | key | value length | value

import dataclasses
import logging
import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from colorcapsnet.errors import (BadMagicError, DuplicateEntryError, MalformedCheckpointError,
                                 TruncatedCheckpointError, UnknownVersionError, WeightImportError)

logger = logging.getLogger(__name__)

MAGIC = b"CCPS"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


@dataclasses.dataclass
class Checkpoint:
    entries: list[tuple[str, np.ndarray]] = dataclasses.field(default_factory=list)
    metadata: dict[str, str] = dataclasses.field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        _check_unique([name for name, _ in self.entries])

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        return cls([(name, np.asarray(value, dtype=np.float32)) for name, value in tensors.items()],
                   dict(metadata or {}))

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]


def _check_unique(names: list[str]) -> None:
    seen = set()
    for name in names:
        if name in seen:
            raise DuplicateEntryError(f"duplicate checkpoint entry '{name}'")
        seen.add(name)


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _string(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return _u32(len(encoded)) + encoded


def encode(checkpoint: Checkpoint) -> bytes:
    _check_unique(checkpoint.names())
    parts = [MAGIC, _u32(checkpoint.format_version), _u32(len(checkpoint.entries))]
    for name, value in checkpoint.entries:
        array = np.asarray(value)
        parts.append(_string(name))
        parts.append(_u32(array.ndim))
        parts.extend(_u32(extent) for extent in array.shape)
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    parts.append(_u32(len(checkpoint.metadata)))
    for key, value in checkpoint.metadata.items():
        parts.append(_string(key))
        parts.append(_string(str(value)))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {size} bytes at offset {self.offset}, file has {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        start = self.offset
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedCheckpointError(f"string at offset {start} is not valid UTF-8: {e}")


def decode(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic = reader.take(4) if len(data) >= 4 else data
    if magic != MAGIC:
        raise BadMagicError(f"not a CCPS checkpoint (magic {magic!r})")
    version = reader.u32()
    if version not in SUPPORTED_VERSIONS:
        raise UnknownVersionError(f"unsupported checkpoint version {version}")

    entries = []
    for _ in range(reader.u32()):
        name = reader.string()
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(reader.take(4 * count), dtype="<f4")
        entries.append((name, payload.astype(np.float32).reshape(shape)))
    _check_unique([name for name, _ in entries])

    metadata = {}
    for _ in range(reader.u32()):
        key = reader.string()
        metadata[key] = reader.string()
    return Checkpoint(entries, metadata, version)


def save(path: str, checkpoint: Checkpoint) -> None:
    """Writes atomically: a temp file in the target directory is renamed over `path`."""
    payload = encode(checkpoint)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ccps-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError:
        logger.exception(f"Failed to write checkpoint {path}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"Saved checkpoint {path} ({len(checkpoint.entries)} entries)")


def load(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    checkpoint = decode(data)
    logger.debug(f"Loaded checkpoint {path} ({len(checkpoint.entries)} entries)")
    return checkpoint


def import_external(checkpoint: Checkpoint, model, name_map: Mapping[str, str]):
    """Copies checkpoint tensors into model slots.

    Args:
        checkpoint (Checkpoint): Source of the external tensors.
        model (ModelParams): Destination; slots not named in `name_map` keep their values.
        name_map (dict): Checkpoint entry name -> model tensor name.

    Returns:
        ModelParams: A new model; imported tensors remain trainable.
    """
    entries = checkpoint.tensors()
    slots = model.named_tensors()
    updates = {}
    for source, target in name_map.items():
        if source not in entries:
            raise WeightImportError(f"checkpoint has no tensor '{source}'", [source])
        if target not in slots:
            raise WeightImportError(f"model has no slot '{target}' for '{source}'", [source])
        value = entries[source]
        if value.shape != slots[target].shape:
            raise WeightImportError(
                f"tensor '{source}' has shape {list(value.shape)}, slot '{target}' expects "
                f"{list(slots[target].shape)}", [source])
        updates[target] = value.astype(slots[target].dtype, copy=True)
        logger.debug(f"Imported {source} -> {target} {list(value.shape)}")
    if updates:
        logger.info(f"Imported {len(updates)} external tensor(s)")
    return model.replace(updates)
