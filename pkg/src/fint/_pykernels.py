"""Numpy fallback for the compiled interaction kernels (same signatures)."""

import numpy as np


def interact_forward(V0, Vprev, W, U):
    A = np.matmul(W, V0)
    out = Vprev * A + U[None, :, None] * Vprev
    return out, A


def interact_backward(V0, Vprev, A, W, U, G, dV0_acc=None):
    dA = G * Vprev
    dVprev = G * A + U[None, :, None] * G
    dU = dA.sum(axis=(0, 2))
    dW = np.tensordot(dA, V0, axes=([0, 2], [0, 2]))
    dV0 = np.matmul(W.T, dA)
    if dV0_acc is not None:
        if dV0_acc.shape != dV0.shape:
            raise ValueError("dV0_acc must have the shape of V0")
        dV0_acc += dV0
        dV0 = dV0_acc
    return dVprev, dV0, dW, dU


def segment_sum(inverse, values, n_segments):
    out = np.zeros((n_segments, values.shape[1]), dtype=values.dtype)
    np.add.at(out, inverse, values)
    return out
