"""Input-validation helpers shared by the numeric core and the estimators."""

import numpy as np

from .errors import ShapeMismatchError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite, C-contiguous float64 2-D array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite, contiguous float64 1-D array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def as_image_batch(x, name: str = "images") -> np.ndarray:
    """Coerce ``x`` to a finite float64 (count, channels, height, width) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeMismatchError(f"{name} must be 4-D (N, C, H, W), got shape {arr.shape}")
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def check_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def check_square(arr: np.ndarray, name: str = "matrix") -> None:
    if arr.shape[0] != arr.shape[1]:
        raise ShapeMismatchError(f"{name} must be square, got shape {arr.shape}")


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{names} must share a shape, got {a.shape} and {b.shape}")


def check_positive_int(value: int, name: str) -> int:
    ivalue = int(value)
    if ivalue <= 0 or ivalue != value:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return ivalue
