"""Compiled vs numpy interaction kernels.

Two measurements per backend:
  * one interaction-layer forward + backward on a fixed batch (best of N);
  * the interaction share of a full FINT training epoch (mean of 5 epochs).

    python3 benchmarks/bench_backends.py [--batch 512] [--repeats 7] [--precision float64]
"""

import argparse
import json
import sys

from fint import bench, kernels, numkernel


def epoch_rows(cells, rows, precision):
    out = []
    active = kernels.BACKEND
    numkernel.set_precision(precision)
    try:
        for cell in cells:
            row = {"M": cell.M, "D": cell.D, "K": cell.K}
            for name in kernels.available_backends():
                kernels.use_backend(name)
                r = bench.time_cell(cell, rows=rows, epochs=5)
                row[f"{name}_interaction_s"] = round(r.interaction_seconds, 5)
                row[f"{name}_epoch_s"] = round(r.epoch_seconds, 5)
            if "compiled_interaction_s" in row and "python_interaction_s" in row:
                row["speedup"] = round(row["python_interaction_s"] / row["compiled_interaction_s"], 3)
            out.append(row)
    finally:
        kernels.use_backend(active)
        numkernel.set_precision("float64")
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--rows", type=int, default=4096, help="rows per training epoch")
    ap.add_argument("--precision", choices=("float64", "float32"), default="float64")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    print(f"backends available: {backends} (import-time default: {kernels.BACKEND})", file=sys.stderr)
    cells = [bench.Cell(m, 16, 2) for m in (16, 32, 64, 128)]
    numkernel.set_precision(args.precision)
    layer = bench.compare_backends(cells, batch=args.batch, repeats=args.repeats)
    numkernel.set_precision("float64")
    print(f"{'M':>4} {'D':>3} " + " ".join(f"{b + ' ms':>14}" for b in backends) + f" {'speedup':>8} {'max|diff|':>10}")
    for r in layer:
        times = " ".join(f"{r[f'{b}_seconds'] * 1e3:14.3f}" for b in backends)
        print(f"{r['M']:>4} {r['D']:>3} {times} {r.get('speedup', float('nan')):8.2f} {r.get('max_abs_diff', 0.0):10.2e}")
    epochs = epoch_rows(cells, args.rows, args.precision)
    print(json.dumps({"layer": layer, "epoch": epochs, "precision": args.precision}, indent=1))


if __name__ == "__main__":
    main()
