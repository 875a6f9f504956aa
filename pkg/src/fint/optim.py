"""Binary cross-entropy and Adam with lazy row-sparse updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkernel import ShapeError

PROB_EPS = 1e-12


@dataclass
class SparseRows:
    """Gradient touching only ``rows`` (sorted, unique) of a 2-D parameter."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out

    def scaled(self, c: float) -> "SparseRows":
        return SparseRows(self.rows, self.values * c, self.shape)


def dense(g) -> np.ndarray:
    return g.to_dense() if isinstance(g, SparseRows) else g


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.float64)


def bce_loss(yhat, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its per-item gradient w.r.t. ``yhat``.

    Probabilities are clipped to ``[1e-12, 1 - 1e-12]`` and the gradient is
    taken at the clipped value.
    """
    y = check_labels(y)
    p = np.clip(np.asarray(yhat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: predictions {p.shape} vs labels {y.shape}")
    n = y.shape[0]
    # metrics.logloss calls this function, so both report the identical float
    loss = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))) / n
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / n
    return loss, grad


def bce_logit_grad(yhat, y) -> np.ndarray:
    """Gradient of mean BCE w.r.t. the logit, ``(yhat - y) / n``; avoids sigmoid saturation."""
    y = check_labels(y)
    return (np.asarray(yhat, dtype=np.float64) - y) / y.shape[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        vals = g.values if isinstance(g, SparseRows) else g
        sq += float(np.sum(np.square(vals, dtype=np.float64)))
    norm = np.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads
    c = max_norm / norm
    return {k: (g.scaled(c) if isinstance(g, SparseRows) else g * c) for k, g in grads.items()}


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update.

    Dense gradients get the standard bias-corrected update. A
    :class:`SparseRows` gradient only touches its rows: moments of untouched
    rows are neither decayed nor applied (lazy Adam).
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if isinstance(g, SparseRows):
            if tuple(g.shape) != p.shape:
                raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
            r = g.rows
            m[r] = b1 * m[r] + (1.0 - b1) * g.values
            v[r] = b2 * v[r] + (1.0 - b2) * np.square(g.values)
            p[r] -= state.lr * (m[r] / c1) / (np.sqrt(v[r] / c2) + state.eps)
        else:
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
