"""Backend selection for the hot interaction kernels.

The compiled extension (``fint._ckernels``) is used when it was built;
otherwise, or when ``FINT_PURE_PYTHON=1`` is set, the numpy fallback in
``fint._pykernels`` is used. Both expose the same three functions.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

import numpy as np

_MODULES = {"compiled": "fint._ckernels", "python": "fint._pykernels"}


def load_backend(name: str) -> ModuleType:
    if name not in _MODULES:
        raise ValueError(f"unknown kernel backend {name!r}")
    return importlib.import_module(_MODULES[name])


def available_backends() -> list[str]:
    names = []
    for name in _MODULES:
        try:
            load_backend(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select() -> tuple[str, ModuleType]:
    if os.environ.get("FINT_PURE_PYTHON", "") not in ("", "0"):
        return "python", load_backend("python")
    try:
        return "compiled", load_backend("compiled")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()


def use_backend(name: str) -> None:
    """Switch the active backend at runtime (benchmarks and tests)."""
    global BACKEND, _impl
    _impl = load_backend(name)
    BACKEND = name


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def interact_forward(V0, Vprev, W, U):
    """Batched interaction layer. Returns ``(V_next, W @ V0)``."""
    return _impl.interact_forward(_c(V0), _c(Vprev), _c(W), _c(U))


def interact_backward(V0, Vprev, A, W, U, G, dV0_acc=None):
    """Returns ``(dVprev, dV0, dW, dU)``.

    ``dV0`` is this layer's contribution only, unless ``dV0_acc`` (a
    C-contiguous array shaped like ``V0``) is passed: the contribution is then
    added into it in place and ``dV0`` is that same array.
    """
    if dV0_acc is not None and not dV0_acc.flags.c_contiguous:
        raise ValueError("dV0_acc must be C-contiguous")
    return _impl.interact_backward(_c(V0), _c(Vprev), _c(A), _c(W), _c(U), _c(G), dV0_acc)


def segment_sum(inverse, values, n_segments: int):
    inverse = np.ascontiguousarray(inverse, dtype=np.int64)
    return _impl.segment_sum(inverse, _c(values), int(n_segments))
