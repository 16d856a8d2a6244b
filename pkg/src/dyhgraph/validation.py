"""Small input-validation helpers used by the public entry points."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError


def check_option(name: str, value: str, options: Sequence[str]) -> str:
    if value not in options:
        raise ConfigurationError(
            f"{name} must be one of {sorted(options)}, got {value!r}"
        )
    return value


def check_unit_interval(name: str, value: float, *, include_one: bool = True) -> float:
    value = float(value)
    top_ok = value <= 1.0 if include_one else value < 1.0
    if not (0.0 <= value and top_ok):
        bound = "[0, 1]" if include_one else "[0, 1)"
        raise ConfigurationError(f"{name} must lie in {bound}, got {value!r}")
    return value


def check_positive_int(name: str, value: int) -> int:
    if int(value) != value or value <= 0:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def as_label_vector(y, n: int | None = None, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr.astype(np.int64)


def check_same_length(name_a: str, a: Iterable, name_b: str, b: Iterable) -> None:
    la, lb = len(list(a)) if not hasattr(a, "__len__") else len(a), len(b)  # type: ignore[arg-type]
    if la != lb:
        raise ValidationError(f"{name_a} has length {la} but {name_b} has length {lb}")
