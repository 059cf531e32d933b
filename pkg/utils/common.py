"""Shared constants, exception types and validators for every hisop module."""

from __future__ import annotations

from typing import Final, Sequence

import numpy as np


#constants
EMPTY_CLASS: Final[int] = 0
IGNORE_LABEL: Final[int] = 255
LOG_EPS: Final[float] = 1e-12
GN_EPS: Final[float] = 1e-5
AFFINITY_EPS: Final[float] = 1e-12

BORDER_ZERO: Final[str] = "zero"
BORDER_CLAMP: Final[str] = "clamp"
BORDERS: Final[tuple[str, ...]] = (BORDER_ZERO, BORDER_CLAMP)


#errors
class HisopError(ValueError):
    """Base class of every domain error raised by the pipeline."""


class ShapeError(HisopError):
    """Array extents or ranks do not agree."""


class ArgumentError(HisopError):
    """A scalar argument is outside its valid range."""


class BehindCameraError(HisopError):
    """A point has non-positive depth in the camera frame."""


class ConfigError(HisopError):
    """A run configuration is malformed or names an invalid flag combination."""


class FormatError(HisopError):
    """A binary or text file does not follow its documented format."""


class UndefinedLossError(HisopError):
    """A loss term has no supervised element to average over."""


class SceneOverlapWarning(UserWarning):
    """Two scene primitives overlap; the first-listed one wins."""


#validation
def ensure_shape(array: np.ndarray, shape: Sequence[int | None], name: str = "array") -> None:
    """Validate the rank and extents of an array.

    Args:
        array: Array to validate
        shape: Expected extents; None matches any extent on that axis
        name: Name used in the error message

    Raises:
        ShapeError: If the rank or any fixed extent differs
    """
    if array.ndim != len(shape):
        raise ShapeError(f"Expected {name} of rank {len(shape)}, got shape {array.shape}")
    for axis, (got, want) in enumerate(zip(array.shape, shape)):
        if want is not None and got != want:
            raise ShapeError(
                f"Expected {name} extent {want} on axis {axis}, got shape {array.shape}"
            )


def ensure_finite(array: np.ndarray, name: str = "array") -> None:
    """Validate that an array holds no NaN or Inf values.

    Raises:
        ArgumentError: If any value is not finite
    """
    if not np.all(np.isfinite(array)):
        raise ArgumentError(f"{name} contains non-finite values")


def as_dense(values: object, rank: int | None = None, name: str = "array") -> np.ndarray:
    """Convert input to a contiguous float64 array, optionally checking its rank.

    Args:
        values: Anything numpy can turn into an array
        rank: Required rank, or None to accept any
        name: Name used in error messages

    Returns:
        np.ndarray: C-contiguous float64 copy or view of the input
    """
    array = np.ascontiguousarray(values, dtype=np.float64)
    if rank is not None and array.ndim != rank:
        raise ShapeError(f"Expected {name} of rank {rank}, got shape {array.shape}")
    return array


def check_choice(value: str, choices: Sequence[str], name: str) -> str:
    """Validate that a string option is one of the allowed values.

    Raises:
        ArgumentError: If the value is not allowed
    """
    if value not in choices:
        raise ArgumentError(f"Unknown {name} '{value}'. Expected one of {list(choices)}")
    return value
