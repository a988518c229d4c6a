"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Every public entry point funnels its array arguments through one of these so
that shape and dtype errors surface early with a readable message.
"""
import math

import numpy as np

from .exceptions import DimensionMismatchError, MalformedInputError


def check_mask(mask, name="mask"):
    """Return ``mask`` as a 2-D boolean array (height, width)."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MalformedInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise MalformedInputError(f"{name} must be at least 1x1, got {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise MalformedInputError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def check_prob_mask(mask, name="mask"):
    """Return ``mask`` as a 2-D float array with values in [0, 1]."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise MalformedInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise MalformedInputError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise DimensionMismatchError(
            f"{names[0]} has shape {np.shape(a)} but {names[1]} has shape {np.shape(b)}"
        )


def check_unit_interval(value, name):
    value = float(value)
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise MalformedInputError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_vector(values, name="vector", length=None):
    """Return a finite 1-D float64 array, optionally of fixed ``length``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise MalformedInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DimensionMismatchError(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.isfinite(arr).all():
        raise MalformedInputError(f"{name} contains non-finite values")
    return arr


def check_offset(offset, name="offset"):
    if offset is None:
        return None
    dx, dy = offset
    if int(dx) != dx or int(dy) != dy:
        raise MalformedInputError(f"{name} must be integer pixels, got {offset}")
    return int(dx), int(dy)
