"""Per-epoch timing grid and scaling-exponent fits for the interaction stage.

Each grid cell trains FINT on random categorical data for a few epochs and
records the mean wall-clock per epoch (epochs of different cells are
interleaved), both for the whole step
(forward + backward + Adam) and for the interaction layers alone. Exponents
are least-squares slopes of log(time) against log(M), log(K) and log(D)
along the one-parameter sweeps of the grid.

Timing runs in 32-bit by default: half the memory traffic per multiply-add,
so the measured curve reaches the M^2 D regime at smaller M.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels, numkernel
from .data import FieldSchema, MiniBatch, batches
from .model import FintConfig, FintModel
from .optim import AdamState, adam_step, bce_logit_grad


@dataclass(frozen=True)
class Cell:
    M: int
    D: int
    K: int
    hidden: tuple[int, ...] = (64,)


@dataclass
class CellResult:
    M: int
    D: int
    K: int
    hidden: str
    rows: int
    epochs: int
    backend: str
    precision: str
    epoch_seconds: float
    epoch_seconds_min: float
    interaction_seconds: float
    interaction_seconds_min: float


BASE = Cell(M=64, D=16, K=2)


def default_grid(base: Cell = BASE) -> dict[str, list[Cell]]:
    """One-parameter sweeps around ``base``: M in {32,64,128}, K in {1,2,4}, D in {8,16,32}."""
    return {
        "M": [Cell(m, base.D, base.K, base.hidden) for m in (32, 64, 128)],
        "K": [Cell(base.M, base.D, k, base.hidden) for k in (1, 2, 4)],
        "D": [Cell(base.M, d, base.K, base.hidden) for d in (8, 16, 32)],
    }


def quick_grid() -> dict[str, list[Cell]]:
    g = default_grid(Cell(M=16, D=8, K=1, hidden=(16,)))
    g["M"] = [Cell(m, 8, 1, (16,)) for m in (8, 16, 32)]
    return g


def random_batch(M: int, rows: int, cardinality: int, seed: int) -> tuple[list[FieldSchema], MiniBatch]:
    rng = np.random.default_rng(seed)
    fields = [FieldSchema(f"f{j}", "categorical", cardinality + 2) for j in range(M)]
    cat = rng.integers(0, cardinality + 2, size=(rows, M))
    labels = rng.integers(0, 2, rows).astype(np.uint8)
    return fields, MiniBatch(labels, cat, np.zeros((rows, 0)), [])


class _CellRunner:
    """Model, data and optimizer state for one grid cell, trained one epoch at a time."""

    def __init__(self, cell: Cell, rows: int, batch_size: int, cardinality: int, seed: int):
        fields, self.ds = random_batch(cell.M, rows, cardinality, seed)
        self.cell, self.batch_size, self.seed = cell, batch_size, seed
        self.model = FintModel(fields, FintConfig(cell.D, cell.K, cell.hidden, seed=seed))
        self.params = self.model.init_params()
        self.state = AdamState()
        self.totals: list[float] = []
        self.inter: list[float] = []

    def epoch(self, index: int, record: bool = True) -> None:
        model, params = self.model, self.params
        model.timings = {}
        t0 = time.perf_counter()
        for batch in batches(self.ds, self.batch_size, self.seed + index + 1):
            yhat, tape = model.forward(batch, params, training=True)
            grads = model.backward(tape, params, grad_logit=bce_logit_grad(yhat, batch.labels))
            adam_step(params, grads, self.state)
        if record:
            self.totals.append(time.perf_counter() - t0)
            self.inter.append(model.timings.get("interaction", 0.0))
        model.timings = None

    def result(self) -> CellResult:
        c = self.cell
        return CellResult(
            c.M, c.D, c.K, "x".join(map(str, c.hidden)), len(self.ds), len(self.totals), kernels.BACKEND,
            numkernel.precision_name(),
            float(np.mean(self.totals)), float(np.min(self.totals)),
            float(np.mean(self.inter)), float(np.min(self.inter)),
        )


def time_cell(cell: Cell, rows: int = 32768, epochs: int = 5, batch_size: int = 256,
              cardinality: int = 16, seed: int = 0) -> CellResult:
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    runner = _CellRunner(cell, rows, batch_size, cardinality, seed)
    for epoch in range(epochs):
        runner.epoch(epoch)
    return runner.result()


def fit_exponent(xs, ts) -> float:
    """Slope of the least-squares line through ``(log x, log t)``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ts, float)), 1)[0])


def doubling_ratios(xs, ts) -> list[float]:
    return [ts[i + 1] / ts[i] for i in range(len(xs) - 1) if xs[i + 1] == 2 * xs[i]]


def run_bench(grid: dict[str, list[Cell]] | None = None, rows: int = 32768, epochs: int = 5,
              batch_size: int = 256, seed: int = 0, precision: str = "float32",
              progress=None) -> tuple[list[CellResult], dict]:
    if epochs < 5:
        raise ValueError("epochs must be >= 5")
    previous = numkernel.precision_name()
    numkernel.set_precision(precision)
    try:
        return _run(default_grid() if grid is None else grid, rows, epochs, batch_size, seed, progress)
    finally:
        numkernel.set_precision(previous)


def _run(grid, rows, epochs, batch_size, seed, progress):
    summary: dict = {"backend": kernels.BACKEND, "precision": numkernel.precision_name(), "rows": rows, "epochs": epochs, "batch_size": batch_size,
                     "seed": seed, "exponents": {}, "doubling_ratios": {}}
    cells = list(dict.fromkeys(c for cs in grid.values() for c in cs))
    runners = [_CellRunner(c, rows, batch_size, 16, seed) for c in cells]
    # one untimed epoch per cell absorbs first-touch allocation; then epochs are interleaved
    # across cells so a slow stretch of the machine lands on every cell alike
    for r in runners:
        r.epoch(-1, record=False)
    for epoch in range(epochs):
        for r in runners:
            r.epoch(epoch)
    by_cell = {r.cell: r.result() for r in runners}
    results = [by_cell[c] for c in cells]
    if progress:
        for res in results:
            progress(res)
    for axis, series_cells in grid.items():
        series = [by_cell[c] for c in series_cells]
        xs = [getattr(r, axis) for r in series]
        ts = [r.interaction_seconds for r in series]
        summary["exponents"][axis] = fit_exponent(xs, ts)
        summary["doubling_ratios"][axis] = doubling_ratios(xs, ts)
    return results, summary


def to_csv(results: list[CellResult], summary: dict | None = None) -> str:
    buf = io.StringIO()
    cols = list(asdict(results[0]).keys()) if results else [f for f in CellResult.__dataclass_fields__]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(asdict(r))
    if summary is not None:
        buf.write("# " + json.dumps(summary, sort_keys=True) + "\n")
    return buf.getvalue()


def compare_backends(cells: list[Cell] | None = None, batch: int = 512, repeats: int = 5, seed: int = 0) -> list[dict]:
    """Time one interaction-layer forward + backward per backend on identical inputs."""
    cells = cells or [Cell(16, 16, 1), Cell(32, 16, 1), Cell(64, 16, 1)]
    rng = np.random.default_rng(seed)
    rows = []
    active = kernels.BACKEND
    try:
        for cell in cells:
            dt = numkernel.get_dtype()
            V0 = rng.normal(size=(batch, cell.M, cell.D)).astype(dt)
            W = (rng.normal(size=(cell.M, cell.M)) / cell.M).astype(dt)
            U = np.ones(cell.M, dtype=dt)
            G = rng.normal(size=V0.shape).astype(dt)
            row = {"M": cell.M, "D": cell.D, "batch": batch, "precision": numkernel.precision_name()}
            outputs = {}
            for name in kernels.available_backends():
                kernels.use_backend(name)
                best = np.inf
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    out, A = kernels.interact_forward(V0, V0, W, U)
                    grads = kernels.interact_backward(V0, V0, A, W, U, G)
                    best = min(best, time.perf_counter() - t0)
                row[f"{name}_seconds"] = best
                outputs[name] = (out, *grads)
            if len(outputs) == 2:
                a, b = outputs.values()
                row["max_abs_diff"] = float(max(np.max(np.abs(x - y)) for x, y in zip(a, b)))
                row["speedup"] = row["python_seconds"] / row["compiled_seconds"]
            rows.append(row)
    finally:
        kernels.use_backend(active)
    return rows
