"""Input validation helpers used at public API boundaries."""
import math

import numpy as np

from .exceptions import DimensionMismatch, InvalidParameter, NotFittedError


def check_positive(value, name):
    """Return ``value`` as float, raising InvalidParameter unless finite and > 0."""
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidParameter(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise InvalidParameter(f"{name} must be finite and > 0, got {value}")
    return value


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InvalidParameter(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_points(points, name="points", dim=3):
    """Coerce to a C-contiguous ``(n, dim)`` float64 array of finite values."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, dim))
    if arr.ndim == 1 and arr.shape[0] == dim:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionMismatch(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_vector(vec, name, dim=3):
    arr = np.asarray(vec, dtype=np.float64).reshape(-1)
    if arr.shape[0] != dim:
        raise DimensionMismatch(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter(f"{name} contains NaN or Inf")
    return arr


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
