"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np


class DomainError(ValueError):
    """Raised when a query falls outside the calibrated domain."""


class InsufficientGridError(ValueError):
    """Raised when a grid has too few nodes for the requested stencil."""


def check_positive(name: str, value: float, *, strict: bool = True) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if strict and value <= 0.0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and value < 0.0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_in_range(name: str, value: float, low: float, high: float,
                   *, closed: bool = True) -> float:
    value = float(value)
    ok = low <= value <= high if closed else low < value < high
    if not ok:
        bracket = "[]" if closed else "()"
        raise ValueError(
            f"{name} must lie in {bracket[0]}{low}, {high}{bracket[1]}, got {value}"
        )
    return value


def check_increasing(name: str, values: Iterable[float], *, min_len: int = 1) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size < min_len:
        raise InsufficientGridError(f"{name} needs at least {min_len} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if arr.size > 1 and np.any(np.diff(arr) <= 0.0):
        raise ValueError(f"{name} must be strictly increasing")
    return arr


def check_finite_array(name: str, values, *, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
