# data_io.py
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

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator

from colorcapsnet.colorspace import image_rgb_to_normalized_lab, lightness_plane
from colorcapsnet.errors import ColorCapsError, DomainError, ImageFormatError, ManifestError, ShapeError
from colorcapsnet.patches import slice_image

logger = logging.getLogger(__name__)

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
_CHANNEL_MAGIC = {1: b"P5", 3: b"P6"}


# --- netpbm ---

def _read_header(data: bytes, path: str) -> tuple[bytes, list[int], int]:
    """Returns magic, [width, height, maxval] and the payload offset."""
    magic = data[:2]
    if magic not in _MAGIC_CHANNELS:
        raise ImageFormatError(f"{path}: unsupported netpbm magic {magic!r} (expected P5 or P6)")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed or truncated header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: truncated header")
    return magic, fields, pos + 1


def load_image(path: str) -> np.ndarray:
    """Reads binary PGM (P5) or PPM (P6) with maxval 255 into uint8 [C, H, W]."""
    with open(path, "rb") as f:
        data = f.read()
    magic, (width, height, maxval), offset = _read_header(data, path)
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    channels = _MAGIC_CHANNELS[magic]
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def write_image(path: str, image: np.ndarray) -> None:
    """Writes uint8 [1, H, W] as P5 or [3, H, W] as P6, header without comments."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in _CHANNEL_MAGIC:
        raise ShapeError(f"expected an image of shape [1|3, H, W], got {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise DomainError(f"{path}: pixel values must lie in [0, 255]")
        image = image.astype(np.uint8)
    channels, height, width = image.shape
    header = b"%s\n%d %d\n255\n" % (_CHANNEL_MAGIC[channels], width, height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())
    logger.debug(f"Wrote {width}x{height} {_CHANNEL_MAGIC[channels].decode()} image to {path}")


# --- manifest ---

class ManifestRecord(BaseModel):
    color: str
    gray: str | None = None


class DatasetManifest(BaseModel):
    records: list[ManifestRecord]
    n: int = 9
    seed: int = 42

    @field_validator("n")
    @classmethod
    def _patch_size(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"n must be >= 1, got {value}")
        return value


def load_manifest(path: str) -> DatasetManifest:
    """Reads a JSON manifest; relative image paths resolve against its directory."""
    try:
        with open(path, "r") as f:
            raw = json.load(f)
        manifest = DatasetManifest.model_validate(raw)
    except FileNotFoundError:
        logger.error(f"Manifest not found at: {path}")
        raise ManifestError(f"manifest not found: {path}")
    except (json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Invalid manifest {path}: {e}")
        raise ManifestError(f"invalid manifest {path}: {e}")

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str | None) -> str | None:
        return None if p is None else os.path.normpath(os.path.join(base, p))

    records = [ManifestRecord(color=resolve(r.color), gray=resolve(r.gray)) for r in manifest.records]
    missing = [p for r in records for p in (r.color, r.gray) if p is not None and not os.path.exists(p)]
    if missing:
        logger.error(f"Manifest {path} references missing files: {missing}")
        raise ManifestError(f"manifest references missing files: {', '.join(missing)}")
    logger.info(f"Loaded manifest {path} with {len(records)} record(s)")
    return manifest.model_copy(update={"records": records})


# --- patch pairs ---

@dataclasses.dataclass(frozen=True)
class PatchPair:
    gray: np.ndarray      # [1, n, n] in [0, 1]
    lab: np.ndarray       # [3, n, n] normalized Lab in [0, 1]
    source: str
    index: int


@dataclasses.dataclass
class PairStats:
    records: int = 0
    skipped: int = 0
    pairs: int = 0


def _record_planes(record: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
    color = load_image(record.color)
    if color.shape[0] != 3:
        raise ImageFormatError(f"{record.color}: color image must be P6")
    lab = image_rgb_to_normalized_lab(color)
    if record.gray is None:
        return lightness_plane(color), lab
    gray = load_image(record.gray)
    if gray.shape[0] != 1:
        raise ImageFormatError(f"{record.gray}: grayscale image must be P5")
    if gray.shape[1:] != color.shape[1:]:
        raise ShapeError(f"{record.gray} is {gray.shape[2]}x{gray.shape[1]}, "
                         f"{record.color} is {color.shape[2]}x{color.shape[1]}")
    return (gray.astype(np.float32) / 255.0), lab


def _load_record(record: ManifestRecord):
    try:
        return _record_planes(record), None
    except (ColorCapsError, OSError) as e:
        return None, e


def build_pairs(manifest: DatasetManifest, n: int | None = None, stats: PairStats | None = None,
                workers: int = 1) -> Iterator[PatchPair]:
    """Streams co-located gray/Lab patch pairs, record by record, row-major.

    The gray plane comes from the record's grayscale file when present,
    otherwise from the normalized L channel. Records that fail to load or
    whose sizes disagree are skipped and counted in `stats.skipped`.
    With `workers > 1` records load concurrently; output order is unchanged.
    """
    n = n or manifest.n
    stats = stats if stats is not None else PairStats()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded: Iterable = pool.map(_load_record, manifest.records)
            yield from _emit(manifest.records, loaded, n, stats)
    else:
        yield from _emit(manifest.records, map(_load_record, manifest.records), n, stats)


def _emit(records, loaded, n: int, stats: PairStats) -> Iterator[PatchPair]:
    for record, (planes, error) in zip(records, loaded):
        stats.records += 1
        if error is None:
            try:
                gray_patches, grid = slice_image(planes[0], n)
                lab_patches, _ = slice_image(planes[1], n)
            except ColorCapsError as e:
                error = e
        if error is not None:
            stats.skipped += 1
            logger.warning(f"Skipping record {record.color}: {error} (skipped so far: {stats.skipped})")
            continue
        for index in range(grid.count):
            stats.pairs += 1
            yield PatchPair(gray_patches[index], lab_patches[index], record.color, index)


def scan_pairs(pairs: Iterable[PatchPair]) -> int:
    """Checks every pair's value ranges; returns the number of pairs seen."""
    count = 0
    for pair in pairs:
        for name, plane in (("gray", pair.gray), ("lab", pair.lab)):
            if plane.min() < 0.0 or plane.max() > 1.0:
                raise DomainError(f"{pair.source}[{pair.index}]: {name} values outside [0, 1]")
        count += 1
    return count


def shuffle_batches(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Deterministic permutation from (seed, epoch), cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [[pairs[i] for i in order[start:start + batch_size]]
            for start in range(0, len(pairs), batch_size)]


def stack_batch(batch: Sequence[PatchPair]) -> tuple[np.ndarray, np.ndarray]:
    gray = np.stack([pair.gray for pair in batch]).astype(np.float32)
    lab = np.stack([pair.lab for pair in batch]).astype(np.float32)
    return gray, lab
