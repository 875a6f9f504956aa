"""Logistic regression and second-order factorization machine baselines.

Both share the field layout and embedding-table conventions of
:mod:`fint.model`; every active feature (each multivalent member counts
separately) has a weight, and for FM also a factor vector. Numeric fields
contribute ``value * weight`` and ``value * factor``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FieldSchema, MiniBatch
from .model import FieldLayout, TapeMismatch, scatter_rows, sparse_table_grad, xavier_uniform
from .numkernel import get_dtype, sigmoid


@dataclass
class BaselineTape:
    batch: MiniBatch
    logit: np.ndarray
    yhat: np.ndarray
    shapes: dict
    feats: np.ndarray | None = None  # FM: x_i v_i per active slot, (B, S, D)
    total: np.ndarray | None = None  # FM: sum over slots, (B, D)


def _linear_term(layout: FieldLayout, batch: MiniBatch, params: dict) -> np.ndarray:
    w = params["weights"][:, 0]
    out = np.full(len(batch), params["bias"][0], dtype=w.dtype)
    for _, rows, mask in layout.active_rows(batch):
        out += w[rows] if mask is None else w[rows] * mask
    if layout.num_numeric:
        out += batch.num.astype(w.dtype) @ params["numeric_weights"]
    return out


def _linear_grads(layout: FieldLayout, batch: MiniBatch, g: np.ndarray) -> dict:
    B = len(batch)
    per_field = np.broadcast_to(g[:, None, None], (B, layout.num_fields, 1))
    return {
        "weights": sparse_table_grad(layout, batch, np.ascontiguousarray(per_field), layout.total_vocab),
        "numeric_weights": batch.num.astype(g.dtype).T @ g,
        "bias": np.array([g.sum()], dtype=g.dtype),
    }


class _Baseline:
    kind = ""

    def __init__(self, fields: Sequence[FieldSchema]):
        self.layout = FieldLayout.from_fields(fields)
        self.timings = None

    def num_params(self) -> int:
        return int(sum(np.prod(s, dtype=np.int64) for s in self.param_shapes().values()))

    def _grad_logit(self, tape, grad_yhat, grad_logit):
        if grad_logit is None:
            if grad_yhat is None:
                raise ValueError("need grad_yhat or grad_logit")
            grad_logit = np.asarray(grad_yhat) * tape.yhat * (1.0 - tape.yhat)
        return np.asarray(grad_logit, dtype=tape.logit.dtype)

    def _check_tape(self, tape, params):
        if tape.shapes != {k: v.shape for k, v in params.items()}:
            raise TapeMismatch("parameters do not match the tape's forward pass")


class LRModel(_Baseline):
    kind = "lr"

    def param_shapes(self) -> dict[str, tuple]:
        L = self.layout
        return {"weights": (L.total_vocab, 1), "numeric_weights": (L.num_numeric,), "bias": (1,)}

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        return {k: np.zeros(s, dtype=get_dtype()) for k, s in self.param_shapes().items()}

    def forward(self, batch: MiniBatch, params: dict, training: bool = False, rng=None):
        self.layout.check_batch(batch)
        logit = _linear_term(self.layout, batch, params)
        yhat = sigmoid(logit)
        return yhat, BaselineTape(batch, logit, yhat, {k: v.shape for k, v in params.items()})

    def backward(self, tape: BaselineTape, params: dict, grad_yhat=None, grad_logit=None) -> dict:
        self._check_tape(tape, params)
        g = self._grad_logit(tape, grad_yhat, grad_logit)
        return _linear_grads(self.layout, tape.batch, g)


class FMModel(_Baseline):
    kind = "fm"

    def __init__(self, fields: Sequence[FieldSchema], embed_dim: int = 16):
        super().__init__(fields)
        self.embed_dim = embed_dim

    def param_shapes(self) -> dict[str, tuple]:
        L, D = self.layout, self.embed_dim
        return {
            "weights": (L.total_vocab, 1),
            "numeric_weights": (L.num_numeric,),
            "bias": (1,),
            "factors": (L.total_vocab, D),
            "numeric_factors": (L.num_numeric, D),
        }

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        """Zero linear part; Glorot-uniform factors per field block."""
        rng = np.random.default_rng(seed)
        D = self.embed_dim
        params = {k: np.zeros(s) for k, s in self.param_shapes().items()}
        start = 0
        for f in self.layout.fields:
            if f.kind == "numeric":
                continue
            params["factors"][start : start + f.vocab_size] = xavier_uniform(rng, (f.vocab_size, D), f.vocab_size, D)
            start += f.vocab_size
        params["numeric_factors"] = xavier_uniform(rng, (self.layout.num_numeric, D), 1, D)
        return {k: np.ascontiguousarray(v, dtype=get_dtype()) for k, v in params.items()}

    def _slots(self, batch: MiniBatch, params: dict) -> np.ndarray:
        """``x_i v_i`` for every lookup slot and numeric field, (B, S, D); inactive slots are zero."""
        V = params["factors"]
        cols = []
        for _, rows, mask in self.layout.active_rows(batch):
            cols.append(V[rows] if mask is None else V[rows] * mask[:, None])
        if self.layout.num_numeric:
            num = batch.num.astype(V.dtype)
            for k in range(self.layout.num_numeric):
                cols.append(num[:, k, None] * params["numeric_factors"][k][None, :])
        if not cols:
            return np.zeros((len(batch), 0, self.embed_dim), dtype=V.dtype)
        return np.stack(cols, axis=1)

    def forward(self, batch: MiniBatch, params: dict, training: bool = False, rng=None):
        self.layout.check_batch(batch)
        feats = self._slots(batch, params)
        total = feats.sum(axis=1)
        # 0.5 * [(sum x v)^2 - sum (x v)^2], summed over factor channels
        pair = 0.5 * (np.square(total).sum(axis=1) - np.square(feats).sum(axis=(1, 2)))
        logit = _linear_term(self.layout, batch, params) + pair
        yhat = sigmoid(logit)
        return yhat, BaselineTape(batch, logit, yhat, {k: v.shape for k, v in params.items()}, feats, total)

    def backward(self, tape: BaselineTape, params: dict, grad_yhat=None, grad_logit=None) -> dict:
        self._check_tape(tape, params)
        g = self._grad_logit(tape, grad_yhat, grad_logit)
        grads = _linear_grads(self.layout, tape.batch, g)
        # d pair / d(x_i v_i) = total - x_i v_i
        d_slot = g[:, None, None] * (tape.total[:, None, :] - tape.feats)
        L = self.layout
        n_lookup = d_slot.shape[1] - L.num_numeric
        B, D = len(tape.batch), self.embed_dim
        rows, vals = [], []
        for s, (_, r, mask) in enumerate(L.active_rows(tape.batch)):
            if mask is None:
                rows.append(r)
                vals.append(d_slot[:, s])
            else:
                rows.append(r[mask])
                vals.append(d_slot[mask, s])
        grads["factors"] = scatter_rows(rows, vals, L.total_vocab, D, g.dtype)
        if L.num_numeric:
            num = tape.batch.num.astype(g.dtype)
            grads["numeric_factors"] = np.einsum("bk,bkd->kd", num, d_slot[:, n_lookup:])
        else:
            grads["numeric_factors"] = np.zeros((0, D), dtype=g.dtype)
        return grads


def lr_forward(batch, params, fields):
    return LRModel(fields).forward(batch, params)[0]


def fm_forward(batch, params, fields, embed_dim: int | None = None):
    D = params["factors"].shape[1] if embed_dim is None else embed_dim
    return FMModel(fields, D).forward(batch, params)[0]


def fm_pairwise_logit(batch, params, fields) -> np.ndarray:
    """Straightforward O(n^2) FM logit over explicit active-feature pairs."""
    layout = FieldLayout.from_fields(fields)
    V, w = params["factors"], params["weights"][:, 0]
    out = np.empty(len(batch))
    for b in range(len(batch)):
        feats = []  # (x, weight, factor)
        for _, rows, mask in layout.active_rows(batch):
            if mask is None or mask[b]:
                feats.append((1.0, w[rows[b]], V[rows[b]]))
        for k in range(layout.num_numeric):
            x = batch.num[b, k]
            feats.append((x, params["numeric_weights"][k], params["numeric_factors"][k]))
        z = params["bias"][0] + sum(x * wi for x, wi, _ in feats)
        for i in range(len(feats)):
            for j in range(i + 1, len(feats)):
                z += feats[i][0] * feats[j][0] * float(np.dot(feats[i][2], feats[j][2]))
        out[b] = z
    return out
