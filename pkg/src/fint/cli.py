"""``fint`` command line: prepare, synth, train, evaluate, predict, gradcheck, bench.

Machine-readable output goes to stdout (JSON; CSV for ``bench``, one float per
line for ``predict``). Diagnostics go to stderr. Exit status is 0 on success,
1 on data or validation errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, checkpoint, kernels, numkernel
from .data import (
    DataError,
    DatasetManifest,
    encode_rows,
    format_row,
    load_split,
    prepare_files,
    read_raw,
    schema_to_json,
    synth_parity,
)
from .trainer import (
    MODEL_KINDS,
    TrainConfig,
    evaluate,
    gradcheck,
    load_checkpoint,
    predict_params,
    save_checkpoint,
    train,
)

log = logging.getLogger("fint")
DEFAULTS = TrainConfig()


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if any(h < 1 for h in sizes):
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return sizes


def _require_file(parser: argparse.ArgumentParser, path: str | None, flag: str) -> None:
    if path is None:
        parser.error(f"{flag} is required")
    if not Path(path).is_file():
        parser.error(f"{flag}: no such file: {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args, parser) -> int:
    _require_file(parser, args.input, "--input")
    _require_file(parser, args.schema, "--schema")
    if args.min_count < 1:
        parser.error("--min-count must be >= 1")
    summary = prepare_files(args.input, args.schema, args.out, args.min_count, args.seed)
    summary["out"] = str(args.out)
    _emit(summary)
    return 0


def cmd_synth(args, parser) -> int:
    synth = synth_parity(args.rows, args.fields, args.cardinality, args.order, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.tsv", "w", encoding="utf-8", newline="\n") as f:
        for row in synth.rows:
            f.write(format_row(row, synth.schema) + "\n")
    (out / "schema.json").write_text(schema_to_json(synth.schema), encoding="utf-8")
    (out / "planted.json").write_text(json.dumps(synth.planted, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit({
        "data": str(out / "data.tsv"),
        "schema": str(out / "schema.json"),
        "planted": synth.planted,
        "positives": int(sum(r.label for r in synth.rows)),
        "seed": args.seed,
    })
    return 0


_OVERRIDES = {
    "model": "model",
    "embed_dim": "embed_dim",
    "num_layers": "num_layers",
    "hidden": "hidden",
    "dropout": "dropout",
    "lr": "lr",
    "batch_size": "batch_size",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "seed": "seed",
    "clip_norm": "clip_norm",
    "precision": "precision",
    "train": "train_path",
    "val": "val_path",
    "out": "out",
    "log": "log_path",
    "resume": "resume",
}


def build_config(args) -> TrainConfig:
    """Defaults, then the --config file, then any flag given on the command line."""
    values = DEFAULTS.to_dict()
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values.update(json.load(f))
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.no_shuffle:
        values["shuffle"] = False
    if args.prefetch:
        values["deterministic"] = False
    if args.save_optimizer:
        values["save_optimizer"] = True
    return TrainConfig.from_dict(values)


def cmd_train(args, parser) -> int:
    if args.config is not None:
        _require_file(parser, args.config, "--config")
    try:
        config = build_config(args)
    except (TypeError, ValueError) as e:
        parser.error(str(e))
    for flag, path in (("--train", config.train_path), ("--val", config.val_path)):
        _require_file(parser, path, flag)
    if not config.out:
        parser.error("--out is required")
    train_ds, manifest = load_split(config.train_path)
    val_ds, val_manifest = load_split(config.val_path)
    result = train(config, train_ds, val_ds, manifest, val_manifest)
    save_checkpoint(config.out, result, config, manifest)
    last = result.logs[-1] if result.logs else None
    _emit({
        "checkpoint": str(config.out),
        "model": config.model,
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_auc,
        "epochs_run": len(result.logs),
        "steps": sum(e.steps for e in result.logs),
        "final_train_loss": last.train_loss if last else None,
        "seed": config.seed,
        "schema_hash": manifest.schema_hash,
    })
    return 0


def cmd_evaluate(args, parser) -> int:
    _require_file(parser, args.checkpoint, "--checkpoint")
    _require_file(parser, args.data, "--data")
    ds, manifest = load_split(args.data)
    _emit(evaluate(args.checkpoint, ds, manifest, args.batch_size).cli_dict())
    return 0


def cmd_predict(args, parser) -> int:
    _require_file(parser, args.checkpoint, "--checkpoint")
    if (args.data is None) == (args.raw is None):
        parser.error("give exactly one of --data (encoded) or --raw (TSV)")
    if args.data is not None:
        _require_file(parser, args.data, "--data")
        ds, manifest = load_split(args.data)
    else:
        _require_file(parser, args.raw, "--raw")
        _require_file(parser, args.manifest, "--manifest")
        manifest = DatasetManifest.load(args.manifest)
        with open(args.raw, encoding="utf-8") as f:
            rows, errors = read_raw(f, manifest.fields)
        if errors:
            for e in errors[:20]:
                log.error("%s", e)
            raise DataError(f"{len(errors)} malformed rows; predict needs one output per input row")
        ds = encode_rows(rows, manifest)
    model, params, _ = load_checkpoint(args.checkpoint, manifest)
    yhat = predict_params(model, params, ds, args.batch_size)
    text = "".join(f"{p:.9g}\n" for p in yhat)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args, parser) -> int:
    kinds = MODEL_KINDS if args.model == "all" else (args.model,)
    reports = {k: gradcheck(k, args.seed, tol=args.tol) for k in kinds}
    worst = max(r.max_rel_error for r in reports.values())
    passed = all(r.passed for r in reports.values())
    _emit({
        "max_rel_error": worst,
        "tolerance": args.tol,
        "passed": passed,
        "seed": args.seed,
        "models": {k: r.to_dict() for k, r in reports.items()},
    })
    if not passed:
        failed = {k: r.failed_tensors for k, r in reports.items() if not r.passed}
        log.error("gradient check failed: %s", failed)
        return 1
    return 0


def cmd_bench(args, parser) -> int:
    if args.backend:
        if args.backend not in kernels.available_backends():
            parser.error(f"--backend {args.backend}: not available (have {kernels.available_backends()})")
        kernels.use_backend(args.backend)
    if args.compare_backends:
        _emit({"backends": kernels.available_backends(), "rows": bench.compare_backends(repeats=args.epochs)})
        return 0
    if args.epochs < 5:
        parser.error("--epochs must be >= 5 (the reported time is a mean over at least five epochs)")
    grid = bench.quick_grid() if args.quick else bench.default_grid()
    progress = (lambda r: log.info("M=%d D=%d K=%d: %.4fs interaction/epoch", r.M, r.D, r.K, r.interaction_seconds))
    results, summary = bench.run_bench(grid, args.rows, args.epochs, args.batch_size, args.seed,
                                       args.precision, progress)
    text = bench.to_csv(results, summary)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="fint", description="FINT click-through-rate engine.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("prepare", help="encode a raw TSV file into train/val/test splits", formatter_class=fmt)
    s.add_argument("--input", help="raw TSV: label, then one column per schema field")
    s.add_argument("--schema", help="schema JSON: list of {name, kind, max_values?}")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--min-count", type=int, default=10, help="values seen fewer times fold to unknown")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.set_defaults(func=cmd_prepare, subparser=s)

    s = sub.add_parser("synth", help="write a planted-parity dataset as raw TSV + schema", formatter_class=fmt)
    s.add_argument("--rows", type=int, default=50_000)
    s.add_argument("--fields", type=int, default=6, help="number of categorical fields M")
    s.add_argument("--cardinality", type=int, default=10, help="values per field C")
    s.add_argument("--order", type=int, default=3, help="interaction order r of the planted parity")
    s.add_argument("--noise", type=float, default=0.05, help="label flip probability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth, subparser=s)

    s = sub.add_parser("train", help="train a model and write its best checkpoint")
    s.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    s.add_argument("--train", help="encoded training split (.bin)")
    s.add_argument("--val", help="encoded validation split (.bin)")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--log", help="JSON-lines epoch log path")
    s.add_argument("--model", choices=MODEL_KINDS, help=f"model kind (default: {DEFAULTS.model})")
    s.add_argument("--embed-dim", type=int, help=f"embedding size D (default: {DEFAULTS.embed_dim})")
    s.add_argument("--num-layers", type=int, help=f"interaction layers K (default: {DEFAULTS.num_layers})")
    s.add_argument("--hidden", type=_hidden,
                   help=f"comma-separated hidden sizes (default: {','.join(map(str, DEFAULTS.hidden))})")
    s.add_argument("--dropout", type=float, help=f"hidden-layer dropout (default: {DEFAULTS.dropout})")
    s.add_argument("--lr", type=float, help=f"Adam learning rate (default: {DEFAULTS.lr:g})")
    s.add_argument("--batch-size", type=int, help=f"mini-batch size (default: {DEFAULTS.batch_size})")
    s.add_argument("--max-epochs", type=int, help=f"epoch limit (default: {DEFAULTS.max_epochs})")
    s.add_argument("--patience", type=int, help=f"early-stop patience in epochs (default: {DEFAULTS.patience})")
    s.add_argument("--seed", type=int, help=f"init and shuffle seed (default: {DEFAULTS.seed})")
    s.add_argument("--clip-norm", type=float, help="global gradient-norm clip (default: off)")
    s.add_argument("--precision", choices=("float64", "float32"), help=f"(default: {DEFAULTS.precision})")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--save-optimizer", action="store_true", help="store Adam moments in the checkpoint")
    s.add_argument("--no-shuffle", action="store_true", help="keep file order every epoch")
    s.add_argument("--prefetch", action="store_true",
                   help="read batches ahead on a thread (drops the deterministic guarantee)")
    s.set_defaults(func=cmd_train, subparser=s)

    s = sub.add_parser("evaluate", help="AUC and logloss of a checkpoint on an encoded split", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="encoded split (.bin)")
    s.add_argument("--batch-size", type=int, default=8192)
    s.set_defaults(func=cmd_evaluate, subparser=s)

    s = sub.add_parser("predict", help="one predicted probability per row", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="encoded split (.bin)")
    s.add_argument("--raw", help="raw TSV in the prepare format (label column present, ignored)")
    s.add_argument("--manifest", help="manifest.json for --raw input")
    s.add_argument("--output", help="write here instead of stdout")
    s.add_argument("--batch-size", type=int, default=8192)
    s.set_defaults(func=cmd_predict, subparser=s)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient", formatter_class=fmt)
    s.add_argument("--model", choices=MODEL_KINDS + ("all",), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-6, help="max relative error")
    s.set_defaults(func=cmd_gradcheck, subparser=s)

    s = sub.add_parser("bench", help="per-epoch timing grid and scaling exponents (CSV)", formatter_class=fmt)
    s.add_argument("--rows", type=int, default=32768, help="rows per epoch")
    s.add_argument("--epochs", type=int, default=5, help="epochs per grid cell (mean reported)")
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=("float32", "float64"), default="float32")
    s.add_argument("--quick", action="store_true", help="small grid for smoke tests")
    s.add_argument("--backend", choices=("compiled", "python"), help="kernel backend (default: selected at import)")
    s.add_argument("--compare-backends", action="store_true",
                   help="time one interaction forward+backward per backend instead (JSON)")
    s.add_argument("--output", help="also write the CSV here")
    s.set_defaults(func=cmd_bench, subparser=s)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = numkernel.precision_name()
    try:
        return args.func(args, args.subparser)
    except (DataError, checkpoint.CheckpointError, ValueError, OSError, FloatingPointError) as e:
        sys.stderr.write(f"fint {args.command}: error: {e}\n")
        return 1
    finally:
        numkernel.set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
