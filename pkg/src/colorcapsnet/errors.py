# errors.py
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

# Every error also derives from the builtin a caller would naturally catch,
# so `except ValueError` keeps working around library calls.


class ColorCapsError(Exception):
    """Base class for all errors raised by colorcapsnet."""


class ShapeError(ColorCapsError, ValueError):
    """Tensor extents do not agree with what an operation expects."""


class EmptyBatchError(ColorCapsError, ValueError):
    """A train-mode statistic was requested over zero samples."""


class ConfigurationError(ColorCapsError, ValueError):
    """A configuration value violates its documented range."""


class DomainError(ColorCapsError, ValueError):
    """Input values fall outside the domain an operation accepts."""


class WeightImportError(ColorCapsError, ValueError):
    """External weights are missing or mis-shaped.

    Args:
        message (str): Human readable description.
        names (list[str]): The offending tensor names.
    """

    def __init__(self, message: str, names: list[str] | None = None):
        super().__init__(message)
        self.names = list(names or [])


class PaddingError(ColorCapsError, ValueError):
    """Reflect padding cannot produce the requested patch grid."""


class PatchCountError(ColorCapsError, ValueError):
    """Number of patches does not match the grid being reassembled."""


class ImageFormatError(ColorCapsError, ValueError):
    """A netpbm file is malformed or uses an unsupported variant."""


class ManifestError(ColorCapsError, ValueError):
    """A dataset manifest cannot be read or validated."""


class CheckpointError(ColorCapsError, ValueError):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DuplicateEntryError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    """A name or metadata string is not valid UTF-8."""


class UsageError(ColorCapsError):
    """The command line cannot be parsed or is missing a required flag."""
