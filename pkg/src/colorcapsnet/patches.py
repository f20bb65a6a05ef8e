# patches.py
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
import logging

import numpy as np

from colorcapsnet.errors import PaddingError, PatchCountError, ShapeError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PatchGrid:
    original_height: int
    original_width: int
    n: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int

    def __post_init__(self):
        if self.rows * self.n != self.original_height + self.pad_bottom \
                or self.cols * self.n != self.original_width + self.pad_right \
                or not (0 <= self.pad_bottom < self.n and 0 <= self.pad_right < self.n):
            raise ShapeError(f"inconsistent patch grid {self}")

    @classmethod
    def for_image(cls, height: int, width: int, n: int) -> "PatchGrid":
        rows, cols = -(-height // n), -(-width // n)
        return cls(height, width, n, rows, cols, rows * n - height, cols * n - width)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col


def slice_image(image: np.ndarray, n: int) -> tuple[np.ndarray, PatchGrid]:
    """Cuts [C, H, W] into row-major, non-overlapping n x n tiles.

    Bottom and right edges are reflect-padded (mirrored without repeating
    the border pixel) up to the next multiple of n.

    Returns:
        tuple: patches [rows*cols, C, n, n] and the PatchGrid to undo the cut.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected an image of shape [C, H, W], got {image.shape}")
    channels, height, width = image.shape
    if n < 1 or height < 1 or width < 1:
        raise ShapeError(f"cannot slice a {height}x{width} image into {n}x{n} patches")
    if n > 2 * min(height, width):
        raise PaddingError(f"patch size {n} exceeds twice the smaller image side ({height}x{width})")

    grid = PatchGrid.for_image(height, width, n)
    padded = np.pad(image, ((0, 0), (0, grid.pad_bottom), (0, grid.pad_right)), mode="reflect")
    tiles = padded.reshape(channels, grid.rows, n, grid.cols, n).transpose(1, 3, 0, 2, 4)
    patches = np.ascontiguousarray(tiles.reshape(grid.count, channels, n, n))
    logger.debug(f"Sliced {height}x{width} image into {grid.rows}x{grid.cols} patches of {n}x{n}")
    return patches, grid


def reassemble(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of slice_image: tiles patches back and crops the padding."""
    if patches.ndim != 4 or patches.shape[0] != grid.count:
        raise PatchCountError(f"grid expects {grid.count} patches, got {patches.shape[0] if patches.ndim else 0}")
    if patches.shape[2:] != (grid.n, grid.n):
        raise ShapeError(f"patches have extent {patches.shape[2:]}, grid expects {grid.n}x{grid.n}")
    channels = patches.shape[1]
    tiles = patches.reshape(grid.rows, grid.cols, channels, grid.n, grid.n).transpose(2, 0, 3, 1, 4)
    full = tiles.reshape(channels, grid.rows * grid.n, grid.cols * grid.n)
    return np.ascontiguousarray(full[:, :grid.original_height, :grid.original_width])
