"""Input-validation helpers shared by the library and the estimators."""

from __future__ import annotations

import numpy as np


def as_vector(value, name: str, length: int | None = None) -> np.ndarray:
    """Return ``value`` as a finite 1-D float array, checking its length."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def positive_vector(value, name: str, length: int | None = None) -> np.ndarray:
    """Like :func:`as_vector` but every entry must be strictly positive.

    A scalar is broadcast to ``length`` when a length is given.
    """
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape == (1,) and length is not None and length != 1:
        arr = np.full(length, arr[0])
    arr = as_vector(arr, name, length)
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive, got {arr}")
    return arr


def check_spd(mat, name: str, rtol: float = 1e-10) -> np.ndarray:
    """Validate a symmetric positive definite matrix.

    Args:
        mat: Square array-like.
        name: Label used in the error message.
        rtol: Relative tolerance on the asymmetry ``|M - M^T|``.

    Returns:
        The matrix as a symmetrised float array.

    Raises:
        ValueError: If the matrix is not square, not symmetric or not
            positive definite. The message names the offending matrix.
    """
    arr = np.atleast_2d(np.asarray(mat, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    scale = max(np.abs(arr).max(), 1.0)
    if np.abs(arr - arr.T).max() > rtol * scale:
        raise ValueError(f"{name} is not symmetric")
    sym = 0.5 * (arr + arr.T)
    try:
        np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None
    return sym


def check_int(value, name: str, minimum: int = 0) -> int:
    """Return ``value`` as an int no smaller than ``minimum``."""
    if isinstance(value, (bool, np.bool_)):
        raise TypeError(f"{name} must be an integer")
    if isinstance(value, (float, np.floating)):
        if not float(value).is_integer():
            raise ValueError(f"{name} must be an integer, got {value}")
    out = int(value)
    if out < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {out}")
    return out
