"""Small dense-array kernels shared by the model, baselines and optimizer.

Matrices are plain 2-D numpy arrays (fields as rows, embedding channels as
columns). Every function checks shapes explicitly and never relies on numpy
broadcasting: a mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def set_precision(name: str) -> None:
    """Select the global compute dtype, ``"float64"`` (default) or ``"float32"``."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return np.dtype(_dtype).name


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=_dtype)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _vector(s, n: int, what: str) -> np.ndarray:
    s = np.asarray(s, dtype=_dtype)
    if s.ndim != 1 or s.shape[0] != n:
        raise ShapeError(f"{what}: expected vector of length {n}, got shape {s.shape}")
    return s


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    return a * b


def rowwise_scale(a, s) -> np.ndarray:
    """Multiply row ``i`` of ``a`` by ``s[i]`` (a diagonal matrix times ``a``)."""
    a = as_matrix(a)
    s = _vector(s, a.shape[0], "rowwise_scale")
    return a * s[:, None]


def concat_rows_flat(a) -> np.ndarray:
    """Concatenate the rows of ``a`` into one vector, row-major."""
    return as_matrix(a).reshape(-1).copy()


def unflatten(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=_dtype)
    if v.ndim != 1 or v.shape[0] != rows * cols:
        raise ShapeError(f"unflatten: length {v.shape} cannot form {rows}x{cols}")
    return v.reshape(rows, cols).copy()


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0)


def sigmoid(x):
    """Logistic function, evaluated without overflow.

    The result is clamped to the open interval (0, 1): in floating point the
    exact value rounds to 0 or 1 once ``|x|`` exceeds ~37 (float64), and
    downstream code relies on strict bounds.
    """
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else _dtype
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    info = np.finfo(dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return out[()] if out.ndim == 0 else out
