"""FINT: embedding → K field-aware interaction layers → feed-forward head.

Per example, ``V0`` is the (M, D) matrix of field embeddings. Layer ``l``
computes, for every field ``i``::

    v_i^l = sum_j W^l[i, j] * (v_i^{l-1} * v_j^0) + U^l[i] * v_i^{l-1}

i.e. ``V^l = V^{l-1} ⊙ (W^l V^0) + diag(U^l) V^{l-1}`` with ``W^l`` of shape
(M, M). The final ``V^K`` is flattened row-major and fed to a ReLU MLP with a
scalar sigmoid output. Gradients are derived by hand in :meth:`FintModel.backward`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .data import FieldSchema, MiniBatch
from .numkernel import ShapeError, get_dtype, hadamard, matmul, rowwise_scale, sigmoid
from .optim import SparseRows


class TapeMismatch(ValueError):
    """Backward called with parameters that do not match the forward tape."""


# ---------------------------------------------------------------------------
# field layout


@dataclass(frozen=True)
class FieldLayout:
    """Where each schema field lives: its row in V0 and its slice of the embedding table."""

    fields: tuple[FieldSchema, ...]
    cat_pos: np.ndarray
    num_pos: np.ndarray
    multi_pos: np.ndarray
    cat_offsets: np.ndarray
    multi_offsets: np.ndarray
    cat_sizes: np.ndarray
    multi_sizes: np.ndarray
    total_vocab: int

    @classmethod
    def from_fields(cls, fields: Sequence[FieldSchema]) -> "FieldLayout":
        fields = tuple(fields)
        if not fields:
            raise ValueError("at least one field is required")
        offsets, total = {}, 0
        for i, f in enumerate(fields):
            if f.kind != "numeric":
                if f.vocab_size < 2:
                    raise ValueError(f"field {f.name!r} has vocab_size {f.vocab_size} < 2")
                offsets[i] = total
                total += f.vocab_size

        def pos(kind):
            return np.array([i for i, f in enumerate(fields) if f.kind == kind], dtype=np.int64)

        cat, num, multi = pos("categorical"), pos("numeric"), pos("multivalent")
        return cls(
            fields=fields,
            cat_pos=cat,
            num_pos=num,
            multi_pos=multi,
            cat_offsets=np.array([offsets[i] for i in cat], dtype=np.int64),
            multi_offsets=np.array([offsets[i] for i in multi], dtype=np.int64),
            cat_sizes=np.array([fields[i].vocab_size for i in cat], dtype=np.int64),
            multi_sizes=np.array([fields[i].vocab_size for i in multi], dtype=np.int64),
            total_vocab=total,
        )

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def num_numeric(self) -> int:
        return len(self.num_pos)

    def check_batch(self, batch: MiniBatch) -> None:
        """Out-of-range indices are a hard error, never clamped."""
        if batch.cat.shape[1] != len(self.cat_pos) or batch.num.shape[1] != len(self.num_pos) or len(batch.multi) != len(self.multi_pos):
            raise ShapeError("batch columns do not match the field layout")
        if batch.cat.size:
            bad = (batch.cat < 0) | (batch.cat >= self.cat_sizes[None, :])
            if bad.any():
                b, k = np.argwhere(bad)[0]
                raise IndexError(f"field {self.fields[self.cat_pos[k]].name!r}: index {batch.cat[b, k]} out of range")
        for k, m in enumerate(batch.multi):
            if m.size and (m.min() < -1 or m.max() >= self.multi_sizes[k]):
                raise IndexError(f"field {self.fields[self.multi_pos[k]].name!r}: index out of range")

    def active_rows(self, batch: MiniBatch):
        """Yield ``(field position, global table rows (B,), mask or None)`` for each lookup slot."""
        for k, p in enumerate(self.cat_pos):
            yield p, batch.cat[:, k] + self.cat_offsets[k], None
        for k, p in enumerate(self.multi_pos):
            m = batch.multi[k]
            for c in range(m.shape[1]):
                col = m[:, c]
                mask = col >= 0
                yield p, np.where(mask, col, 0) + self.multi_offsets[k], mask


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# single-example interaction layer (reference forms)


def interact_loop(V0, Vprev, W, U) -> np.ndarray:
    """Interaction layer evaluated field by field with an explicit double loop."""
    V0, Vprev, W, U = (np.asarray(a, dtype=get_dtype()) for a in (V0, Vprev, W, U))
    M, D = V0.shape
    if Vprev.shape != (M, D) or W.shape != (M, M) or U.shape != (M,):
        raise ShapeError(f"interact_loop: V0 {V0.shape}, Vprev {Vprev.shape}, W {W.shape}, U {U.shape}")
    out = np.zeros((M, D), dtype=V0.dtype)
    for i in range(M):
        acc = np.zeros(D, dtype=V0.dtype)
        for j in range(M):
            acc += W[i, j] * (Vprev[i] * V0[j])
        out[i] = acc + U[i] * Vprev[i]
    return out


def interact_matrix(V0, Vprev, W, U) -> np.ndarray:
    """Same layer in matrix form: ``Vprev ⊙ (W V0) + diag(U) Vprev``."""
    V0 = np.asarray(V0, dtype=get_dtype())
    M = V0.shape[0] if V0.ndim == 2 else -1
    if np.shape(W) != (M, M):
        raise ShapeError(f"interact_matrix: W {np.shape(W)} incompatible with V0 {V0.shape}")
    return hadamard(Vprev, matmul(W, V0)) + rowwise_scale(Vprev, U)


# ---------------------------------------------------------------------------
# model


@dataclass
class FintConfig:
    embed_dim: int = 16
    num_layers: int = 3
    hidden: tuple[int, ...] = (300, 300, 300)
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.embed_dim < 1 or self.num_layers < 0 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid FINT config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class ForwardTape:
    batch: MiniBatch
    V: list  # V^0 .. V^K, each (B, M, D)
    A: list  # W^l V^0 for l = 1..K
    acts: list  # inputs to each affine layer, first is flattened V^K
    pre: list  # hidden pre-activations
    masks: list  # dropout masks (None when inactive)
    logit: np.ndarray
    yhat: np.ndarray
    shapes: dict = field(default_factory=dict)


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activation in {where}")


def _ffn_names(n_hidden: int) -> list[tuple[str, str]]:
    return [(f"ffn.{k}.weight", f"ffn.{k}.bias") for k in range(n_hidden)] + [("output.weight", "output.bias")]


def ffn_forward(x, params, n_hidden, dropout=0.0, rng=None):
    acts, pre, masks = [x], [], []
    h = x
    for k, (wn, bn) in enumerate(_ffn_names(n_hidden)):
        z = h @ params[wn] + params[bn]
        _check_finite(z, wn.rsplit(".", 1)[0])
        if k == n_hidden:
            return z[:, 0], acts, pre, masks
        pre.append(z)
        h = np.maximum(z, 0)
        mask = None
        if dropout > 0.0 and rng is not None:
            keep = 1.0 - dropout
            mask = (rng.random(h.shape) < keep).astype(h.dtype) / keep
            h = h * mask
        masks.append(mask)
        acts.append(h)
    raise AssertionError("unreachable")


def ffn_backward(g_logit, params, acts, pre, masks, n_hidden, grads):
    """Accumulate FFN gradients into ``grads``; return the gradient w.r.t. the FFN input."""
    names = _ffn_names(n_hidden)
    g = g_logit[:, None]
    for k in range(n_hidden, -1, -1):
        wn, bn = names[k]
        grads[wn] = acts[k].T @ g
        grads[bn] = g.sum(axis=0)
        g = g @ params[wn].T
        if k > 0:
            if masks[k - 1] is not None:
                g = g * masks[k - 1]
            g = g * (pre[k - 1] > 0)
    return g


def ffn_param_shapes(n_in: int, hidden: Sequence[int]) -> dict[str, tuple]:
    shapes, prev = {}, n_in
    for (wn, bn), width in zip(_ffn_names(len(hidden)), list(hidden) + [1]):
        shapes[wn] = (prev, width)
        shapes[bn] = (width,)
        prev = width
    return shapes


def init_ffn(rng, shapes: dict, params: dict) -> None:
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            params[name] = xavier_uniform(rng, shape, shape[0], shape[1])
        else:
            params[name] = np.zeros(shape)


def scatter_rows(rows: list, vals: list, n_rows: int, width: int, dtype) -> SparseRows:
    """Sum gradient rows that hit the same table row; result rows sorted."""
    if not rows:
        return SparseRows(np.zeros(0, dtype=np.int64), np.zeros((0, width), dtype=dtype), (n_rows, width))
    rows = np.concatenate(rows)
    vals = np.concatenate(vals)
    uniq, inverse = np.unique(rows, return_inverse=True)
    return SparseRows(uniq, kernels.segment_sum(inverse.reshape(-1), vals, len(uniq)), (n_rows, width))


def sparse_table_grad(layout: FieldLayout, batch: MiniBatch, g_fields: np.ndarray, n_rows: int) -> SparseRows:
    """Scatter per-field gradients (B, M, C) back onto the table rows that were looked up."""
    rows, vals = [], []
    for p, r, mask in layout.active_rows(batch):
        if mask is None:
            rows.append(r)
            vals.append(g_fields[:, p])
        else:
            rows.append(r[mask])
            vals.append(g_fields[mask, p])
    return scatter_rows(rows, vals, n_rows, g_fields.shape[2], g_fields.dtype)


def gather_fields(layout: FieldLayout, batch: MiniBatch, table: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-field vectors (B, M, C): table rows for lookups (multivalent summed), value × vector for numerics."""
    B, C = len(batch), table.shape[1]
    out = np.zeros((B, layout.num_fields, C), dtype=table.dtype)
    for p, r, mask in layout.active_rows(batch):
        rows = table[r]
        if mask is None:
            out[:, p] = rows
        else:
            out[:, p] += rows * mask[:, None]
    if len(layout.num_pos):
        out[:, layout.num_pos] = batch.num[:, :, None].astype(table.dtype) * numeric[None, :, :]
    return out


class FintModel:
    kind = "fint"

    def __init__(self, fields: Sequence[FieldSchema], config: FintConfig):
        self.layout = FieldLayout.from_fields(fields)
        self.config = config
        self.timings: dict[str, float] | None = None

    @property
    def M(self) -> int:
        return self.layout.num_fields

    def param_shapes(self) -> dict[str, tuple]:
        D, M, L = self.config.embed_dim, self.M, self.layout
        shapes = {"embedding": (L.total_vocab, D), "numeric": (L.num_numeric, D)}
        for l in range(1, self.config.num_layers + 1):
            shapes[f"interaction.{l}.W"] = (M, M)
            shapes[f"interaction.{l}.U"] = (M,)
        shapes.update(ffn_param_shapes(M * D, self.config.hidden))
        return shapes

    def num_params(self) -> int:
        return int(sum(np.prod(s, dtype=np.int64) for s in self.param_shapes().values()))

    def init_params(self, seed: int | None = None) -> dict[str, np.ndarray]:
        """Glorot-uniform embeddings/weights, zero biases, ``U = 1`` (identity residual)."""
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        D, M = self.config.embed_dim, self.M
        table = np.empty((self.layout.total_vocab, D))
        start = 0
        for f in self.layout.fields:
            if f.kind == "numeric":
                continue
            table[start : start + f.vocab_size] = xavier_uniform(rng, (f.vocab_size, D), f.vocab_size, D)
            start += f.vocab_size
        params = {"embedding": table, "numeric": xavier_uniform(rng, (self.layout.num_numeric, D), 1, D)}
        for l in range(1, self.config.num_layers + 1):
            params[f"interaction.{l}.W"] = xavier_uniform(rng, (M, M), M, M)
            params[f"interaction.{l}.U"] = np.ones(M)
        init_ffn(rng, ffn_param_shapes(M * D, self.config.hidden), params)
        dtype = get_dtype()
        return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}

    def embed(self, batch: MiniBatch, params: dict) -> np.ndarray:
        self.layout.check_batch(batch)
        return gather_fields(self.layout, batch, params["embedding"], params["numeric"])

    def forward(self, batch: MiniBatch, params: dict, training: bool = False, rng=None):
        cfg = self.config
        V0 = self.embed(batch, params)
        _check_finite(V0, "embedding")
        V, A = [V0], []
        t0 = time.perf_counter()
        for l in range(1, cfg.num_layers + 1):
            Vl, Al = kernels.interact_forward(V0, V[-1], params[f"interaction.{l}.W"], params[f"interaction.{l}.U"])
            V.append(Vl)
            A.append(Al)
        self._tick("interaction", t0)
        for l in range(1, cfg.num_layers + 1):
            _check_finite(V[l], f"interaction.{l}")
        x = V[-1].reshape(len(batch), -1)
        logit, acts, pre, masks = ffn_forward(x, params, len(cfg.hidden), cfg.dropout if training else 0.0, rng)
        yhat = sigmoid(logit)
        tape = ForwardTape(batch, V, A, acts, pre, masks, logit, yhat, {k: v.shape for k, v in params.items()})
        return yhat, tape

    def backward(self, tape: ForwardTape, params: dict, grad_yhat=None, grad_logit=None) -> dict:
        """Exact gradients of a scalar loss given its gradient w.r.t. ``yhat`` or the logit."""
        if tape.shapes != {k: v.shape for k, v in params.items()}:
            raise TapeMismatch("parameters do not match the tape's forward pass")
        cfg = self.config
        if grad_logit is None:
            if grad_yhat is None:
                raise ValueError("need grad_yhat or grad_logit")
            grad_logit = np.asarray(grad_yhat) * tape.yhat * (1.0 - tape.yhat)
        g_logit = np.asarray(grad_logit, dtype=tape.logit.dtype)
        grads: dict = {}
        g = ffn_backward(g_logit, params, tape.acts, tape.pre, tape.masks, len(cfg.hidden), grads)
        B = len(tape.batch)
        G = g.reshape(B, self.M, cfg.embed_dim)
        V0 = tape.V[0]
        dV0 = np.zeros_like(V0)
        t0 = time.perf_counter()
        for l in range(cfg.num_layers, 0, -1):
            W, U = params[f"interaction.{l}.W"], params[f"interaction.{l}.U"]
            G, _, dW, dU = kernels.interact_backward(V0, tape.V[l - 1], tape.A[l - 1], W, U, G, dV0)
            grads[f"interaction.{l}.W"] = dW
            grads[f"interaction.{l}.U"] = dU
        self._tick("interaction", t0)
        dV0 += G  # V^0 is also the input of the first layer
        grads["embedding"] = sparse_table_grad(self.layout, tape.batch, dV0, self.layout.total_vocab)
        L = self.layout
        if L.num_numeric:
            vals = tape.batch.num.astype(dV0.dtype)
            grads["numeric"] = np.einsum("bk,bkd->kd", vals, dV0[:, L.num_pos])
        else:
            grads["numeric"] = np.zeros((0, cfg.embed_dim), dtype=dV0.dtype)
        return grads

    def _tick(self, key: str, t0: float) -> None:
        if self.timings is not None:
            self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t0


def closed_form_param_count(vocab_total: int, n_numeric: int, M: int, D: int, K: int, hidden: Sequence[int]) -> int:
    widths = [M * D, *hidden, 1]
    ffn = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return vocab_total * D + n_numeric * D + K * (M * M + M) + ffn


# module-level aliases for the per-operation API


def param_init(fields, config: FintConfig, seed: int | None = None):
    return FintModel(fields, config).init_params(seed)


def embed(batch, params, fields, config: FintConfig):
    return FintModel(fields, config).embed(batch, params)


def forward(batch, params, fields, config: FintConfig):
    return FintModel(fields, config).forward(batch, params)


def backward(tape, params, fields, config: FintConfig, grad_yhat=None, grad_logit=None):
    return FintModel(fields, config).backward(tape, params, grad_yhat=grad_yhat, grad_logit=grad_logit)
