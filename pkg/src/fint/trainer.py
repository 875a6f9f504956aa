"""Training loop, evaluation, prediction and the finite-difference gradient check."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields
from typing import Callable, Iterator, Sequence

import numpy as np

from . import checkpoint, numkernel
from .baselines import FMModel, LRModel
from .data import Dataset, DatasetManifest, FieldSchema, MiniBatch, batches
from .metrics import MetricsReport, UndefinedAUC, evaluate_scores
from .model import FintConfig, FintModel
from .optim import AdamState, adam_step, bce_logit_grad, bce_loss, clip_global_norm, dense

log = logging.getLogger(__name__)

MODEL_KINDS = ("fint", "lr", "fm")


@dataclass
class TrainConfig:
    model: str = "fint"
    embed_dim: int = 16
    num_layers: int = 3
    hidden: tuple[int, ...] = (300, 300, 300)
    dropout: float = 0.0
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    shuffle: bool = True
    deterministic: bool = True
    clip_norm: float | None = None
    precision: str = "float64"
    eval_batch_size: int = 8192
    save_optimizer: bool = False
    train_path: str | None = None
    val_path: str | None = None
    out: str | None = None
    log_path: str | None = None
    resume: str | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.lr <= 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0, patience >= 1 and lr > 0 are required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def model_dict(self) -> dict:
        """Just the fields that define the model and its training dynamics (no paths)."""
        d = self.to_dict()
        for k in ("train_path", "val_path", "out", "log_path", "resume", "eval_batch_size", "save_optimizer"):
            d.pop(k)
        return d

    def fint_config(self) -> FintConfig:
        return FintConfig(self.embed_dim, self.num_layers, self.hidden, self.dropout, self.seed)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val: MetricsReport
    seconds: float
    steps: int
    interaction_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val": self.val.to_dict(),
            "seconds": self.seconds,
            "steps": self.steps,
            "interaction_seconds": self.interaction_seconds,
        }


@dataclass
class TrainResult:
    model: object
    params: dict
    logs: list[EpochLog]
    best_epoch: int | None
    best_auc: float | None
    opt_state: AdamState | None = None
    step_losses: list[float] = field(default_factory=list)


def build_model(kind: str, fields: Sequence[FieldSchema], config: TrainConfig):
    if kind == "fint":
        return FintModel(fields, config.fint_config())
    if kind == "lr":
        return LRModel(fields)
    if kind == "fm":
        return FMModel(fields, config.embed_dim)
    raise ValueError(f"unknown model kind {kind!r}")


def _prefetch(it: Iterator, capacity: int = 4) -> Iterator:
    """Run ``it`` in a producer thread with a bounded queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()

    def produce():
        try:
            for item in it:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


def predict_params(model, params: dict, ds: Dataset, batch_size: int = 8192) -> np.ndarray:
    out = [model.forward(b, params)[0] for b in batches(ds, batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_params(model, params: dict, ds: Dataset, batch_size: int = 8192) -> MetricsReport:
    return evaluate_scores(predict_params(model, params, ds, batch_size), ds.labels)


def _copy(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def _copy_state(s: AdamState) -> AdamState:
    return AdamState(s.lr, s.beta1, s.beta2, s.eps, s.t, _copy(s.m), _copy(s.v))


def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset, manifest: DatasetManifest,
          val_manifest: DatasetManifest | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on mean BCE; keep the epoch with the best validation AUC.

    Exact AUC ties go to the lower validation logloss, then to the earlier epoch.
    """
    if val_manifest is not None and val_manifest.schema_hash != manifest.schema_hash:
        raise ValueError("train and validation datasets come from different manifests")
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    numkernel.set_precision(config.precision)
    model = build_model(config.model, manifest.fields, config)
    params = model.init_params(config.seed)
    state = AdamState(lr=config.lr)
    first_epoch = 1
    if config.resume:
        header, params, state = load_checkpoint_state(config.resume, manifest)
        first_epoch = header.get("epoch", 0) + 1
    if config.max_epochs == 0:
        return TrainResult(model, params, [], None, None, state)
    if len(val_ds) and len(np.unique(val_ds.labels)) < 2:
        raise UndefinedAUC("validation set has a single class; AUC-based model selection is undefined")

    dropout_rng = np.random.default_rng(config.seed + 7919)
    logs: list[EpochLog] = []
    best = (None, -np.inf, None, None)  # epoch, auc, params, state
    best_key = (-np.inf, -np.inf)
    bad_epochs = 0
    step_losses: list[float] = []
    log_file = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    try:
        for epoch in range(first_epoch, first_epoch + config.max_epochs):
            model.timings = {}
            t0 = time.perf_counter()
            seed = config.seed + epoch if config.shuffle else None
            it = batches(train_ds, config.batch_size, seed)
            if not config.deterministic:
                it = _prefetch(it)
            loss_sum, steps = 0.0, 0
            for batch in it:
                yhat, tape = model.forward(batch, params, training=True, rng=dropout_rng)
                loss, _ = bce_loss(yhat, batch.labels)
                grads = model.backward(tape, params, grad_logit=bce_logit_grad(yhat, batch.labels))
                if config.clip_norm:
                    grads = clip_global_norm(grads, config.clip_norm)
                adam_step(params, grads, state)
                loss_sum += loss * len(batch)
                steps += 1
                step_losses.append(loss)
                if on_step is not None:
                    on_step(state.t, loss)
            seconds = time.perf_counter() - t0
            val = evaluate_params(model, params, val_ds, config.eval_batch_size)
            entry = EpochLog(epoch, loss_sum / len(train_ds), val, seconds, steps, model.timings.get("interaction", 0.0))
            logs.append(entry)
            log.info("epoch %d loss %.5f val auc %.5f logloss %.5f (%.2fs)", epoch, entry.train_loss, val.auc, val.logloss, seconds)
            if log_file:
                log_file.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
                log_file.flush()
            # equal AUC (e.g. saturated at 1.0) falls back to lower logloss, then the earlier epoch
            key = (val.auc, -val.logloss)
            if key > best_key:
                best_key = key
                best = (epoch, val.auc, _copy(params), _copy_state(state))
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
    finally:
        model.timings = None
        if log_file:
            log_file.close()
    return TrainResult(model, best[2], logs, best[0], best[1], best[3], step_losses)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, result: TrainResult, config: TrainConfig, manifest: DatasetManifest) -> None:
    header = {
        "model": config.model,
        "config": config.model_dict(),
        "schema_hash": manifest.schema_hash,
        "fields": [f.to_dict() for f in manifest.fields],
        "epoch": result.best_epoch or 0,
        "best_val_auc": result.best_auc,
        "precision": config.precision,
    }
    tensors = {f"param.{k}": v for k, v in result.params.items()}
    if config.save_optimizer and result.opt_state is not None:
        s = result.opt_state
        header["adam"] = {"t": s.t, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
        tensors.update({f"adam.m.{k}": v for k, v in s.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in s.v.items()})
    checkpoint.save(path, header, tensors)


def _split_tensors(tensors: dict, dtype) -> tuple[dict, dict, dict]:
    parts = {"param": {}, "adam.m": {}, "adam.v": {}}
    for name, arr in tensors.items():
        for prefix in ("adam.m", "adam.v", "param"):
            if name.startswith(prefix + "."):
                parts[prefix][name[len(prefix) + 1 :]] = np.ascontiguousarray(arr, dtype=dtype)
                break
    return parts["param"], parts["adam.m"], parts["adam.v"]


def load_checkpoint(path, manifest: DatasetManifest):
    """Return ``(model, params, header)``; refuses a checkpoint built for another schema."""
    header, tensors = checkpoint.load(path, manifest.schema_hash)
    config = TrainConfig.from_dict(header["config"])
    numkernel.set_precision(header.get("precision", "float64"))
    model = build_model(header["model"], manifest.fields, config)
    params, _, _ = _split_tensors(tensors, numkernel.get_dtype())
    expected = model.param_shapes()
    got = {k: v.shape for k, v in params.items()}
    if got != {k: tuple(s) for k, s in expected.items()}:
        raise checkpoint.CheckpointError("checkpoint tensors do not match the model's parameter shapes")
    return model, params, header


def load_checkpoint_state(path, manifest: DatasetManifest):
    header, tensors = checkpoint.load(path, manifest.schema_hash)
    params, m, v = _split_tensors(tensors, numkernel.get_dtype())
    state = AdamState(lr=header["config"]["lr"])
    if "adam" in header:
        a = header["adam"]
        state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"], m, v)
    return header, params, state


def evaluate(path, ds: Dataset, manifest: DatasetManifest, batch_size: int = 8192) -> MetricsReport:
    model, params, _ = load_checkpoint(path, manifest)
    return evaluate_params(model, params, ds, batch_size)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    model: str
    max_rel_error: float
    per_tensor: dict[str, float]
    worst: tuple[str, tuple]
    tolerance: float
    failed_tensors: list[str]

    @property
    def passed(self) -> bool:
        return not self.failed_tensors

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "max_rel_error": self.max_rel_error,
            "per_tensor": self.per_tensor,
            "worst": {"tensor": self.worst[0], "index": list(self.worst[1])},
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failed_tensors": self.failed_tensors,
        }


GRADCHECK_STEP = 1e-5
GRADCHECK_TOL = 1e-6
# |analytic - numeric| / max(|analytic|, |numeric|, floor). Central differences at
# step 1e-5 carry ~eps*|loss|/step ~ 1e-11 of rounding noise, so gradients below
# the floor are held to an absolute 1e-10 instead of a relative bound they cannot meet.
GRADCHECK_FLOOR = 1e-4


def micro_problem(seed: int = 0, rows: int = 6):
    """A 4-field schema (2 categorical, 1 numeric, 1 multivalent) and a random batch."""
    fields = [
        FieldSchema("c0", "categorical", 5),
        FieldSchema("n0", "numeric"),
        FieldSchema("m0", "multivalent", 5, max_values=3),
        FieldSchema("c1", "categorical", 4),
    ]
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, rows).astype(np.uint8)
    labels[:2] = (0, 1)
    cat = np.stack([rng.integers(0, 5, rows), rng.integers(0, 4, rows)], axis=1)
    num = 1.0 + np.log1p(rng.exponential(2.0, size=(rows, 1)))
    multi = np.full((rows, 3), -1, dtype=np.int64)
    for r in range(rows):
        k = int(rng.integers(0, 4))
        multi[r, :k] = rng.integers(0, 5, k)
    return fields, MiniBatch(labels, cat.astype(np.int64), num, [multi])


def gradcheck(kind: str = "fint", seed: int = 0, step: float = GRADCHECK_STEP, tol: float = GRADCHECK_TOL,
              backward_hook: Callable[[dict], dict] | None = None) -> GradcheckReport:
    """Compare every analytic gradient of mean BCE with central finite differences (float64)."""
    previous = numkernel.precision_name()
    numkernel.set_precision("float64")
    try:
        fields, batch = micro_problem(seed)
        config = TrainConfig(model=kind, embed_dim=3, num_layers=2, hidden=(5,), seed=seed)
        model = build_model(kind, fields, config)
        rng = np.random.default_rng(seed + 1)
        params = model.init_params(seed)
        for k in params:
            # move off the structured init (zero linear weights, U = 1) so every term is exercised
            params[k] = params[k] + rng.normal(0.0, 0.1, params[k].shape)

        y = batch.labels.astype(np.float64)

        def loss_at(p):
            # mean BCE in logit space: softplus(z) - y z, free of the cancellation in log(1 - yhat)
            z = model.forward(batch, p)[1].logit
            return float(np.mean(np.logaddexp(0.0, z) - y * z))

        yhat, tape = model.forward(batch, params)
        grads = model.backward(tape, params, grad_logit=bce_logit_grad(yhat, batch.labels))
        if backward_hook is not None:
            grads = backward_hook(grads)
        per_tensor, worst, failed = {}, (0.0, ("", ())), []
        for name in sorted(params):
            analytic = dense(grads[name])
            bad = np.argwhere(~np.isfinite(analytic))
            if len(bad):
                raise FloatingPointError(f"non-finite gradient in {name} at index {tuple(bad[0])}")
            p = params[name]
            err_max = 0.0
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + step
                lp = loss_at(params)
                p[idx] = old - step
                lm = loss_at(params)
                p[idx] = old
                numeric = (lp - lm) / (2.0 * step)
                a = analytic[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), GRADCHECK_FLOOR)
                if err > err_max:
                    err_max = err
                if err > worst[0]:
                    worst = (err, (name, idx))
            per_tensor[name] = err_max
            if err_max > tol:
                failed.append(name)
        return GradcheckReport(kind, worst[0], per_tensor, (worst[1][0], tuple(int(i) for i in worst[1][1])), tol, failed)
    finally:
        numkernel.set_precision(previous)
