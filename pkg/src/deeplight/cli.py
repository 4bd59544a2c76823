"""``deeplight`` command line: ingest, synth, train, eval, predict, plot.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from .exceptions import DeepLightError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("deeplight")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _claim_output(path: str | Path, force: bool) -> Path:
    """Refuse to reuse an existing non-empty output unless forced."""
    path = Path(path)
    if path.exists() and (path.is_file() or any(path.iterdir())):
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .grid import GridSpec
    from .synthetic import StormParams, generate_dataset

    out = _claim_output(args.out, args.force)
    params = StormParams(seed=args.seed, n_storms=args.n_storms)
    m = generate_dataset(out, GridSpec.square(args.grid), args.hours, params)
    print(f"wrote {len(m.hours)} hours on a {args.grid}x{args.grid} grid to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .grid import GridSpec
    from .ingestion import ProductFetcher, ingest

    out = _claim_output(args.out, args.force)
    sources = ("goes", "nexrad") if args.source == "all" else (args.source,)
    fetcher = ProductFetcher(args.cache)
    m = ingest(args.start, args.end, out, GridSpec.dallas(), sources, args.station, fetcher)
    n_gaps = {f: len(g) for f, g in m.gaps.items()}
    print(f"wrote {len(m.hours)} hours to {out}; gap hours per feature: {json.dumps(n_gaps)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, ablate, train

    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in {
        "data": args.data, "out": args.out, "epochs": args.epochs, "learning_rate": args.lr,
        "batch_size": args.batch_size, "seed": args.seed, "stride": args.stride,
    }.items() if v is not None}
    config = dataclasses.replace(config, **overrides)
    model_over = {k: v for k, v in {"s": args.s, "h": args.h, "hidden_channels": args.hidden,
                                    "branch_channels": args.branch, "stem_channels": args.stem}.items()
                  if v is not None}
    if model_over:
        config = dataclasses.replace(config, model=dataclasses.replace(config.model, **model_over))
    if not config.data:
        raise UsageError("train needs --data (or a config file naming it)")
    variant = "no_hazy" if args.no_hazy else args.variant
    if variant:
        config = ablate(config, variant)
    _claim_output(config.out, args.force)
    best = train(config, force=True)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate, report_to_tsv

    if args.baseline is None and args.ckpt is None:
        raise UsageError("eval needs --ckpt or --baseline persistence")
    out = None
    if args.out:
        out = Path(args.out)
        for p in (out.with_suffix(".json"), out.with_suffix(".tsv")):
            _claim_output(p, args.force)
    report = evaluate(args.ckpt, args.data, args.split, args.threshold or [0.5], baseline=args.baseline,
                      s=args.s, h=args.h, pooling=args.pooling)
    tsv = report_to_tsv(report)
    sys.stdout.write(tsv)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        out.with_suffix(".tsv").write_text(tsv, encoding="utf-8")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .predict import forecast_at, write_prediction
    from .grid import format_hour

    out = _claim_output(args.out, args.force)
    proba, hours, manifest = forecast_at(args.ckpt, args.data, args.anchor)
    write_prediction(out, manifest.grid, hours, proba,
                     {"checkpoint": str(args.ckpt), "dataset": str(args.data), "anchor": format_hour(hours[0])})
    print(f"wrote {len(hours)} probability frames to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .predict import plot_forecast, read_prediction, truth_for

    out = _claim_output(args.out, args.force)
    proba, hours, _ = read_prediction(args.pred)
    truth = truth_for(args.truth, hours) if args.truth else None
    plot_forecast(proba, truth, hours, out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deeplight", description="Lightning occurrence nowcasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic storm dataset")
    s.add_argument("--grid", type=int, default=32, help="grid side length in cells (default 32)")
    s.add_argument("--hours", type=int, default=400, help="number of hourly frames (default 400)")
    s.add_argument("--seed", type=int, default=7, help="generator seed (default 7)")
    s.add_argument("--n-storms", type=int, default=2, help="concurrent storms (default 2)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--force", action="store_true", help="overwrite an existing output")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="download and grid GOES / NEXRAD products")
    s.add_argument("--source", choices=("goes", "nexrad", "all"), default="all")
    s.add_argument("--start", required=True, help="first UTC hour, e.g. 2023-06-01T00Z")
    s.add_argument("--end", required=True, help="end UTC hour (exclusive)")
    s.add_argument("--station", default="TDAL", help="radar station (default TDAL)")
    s.add_argument("--cache", default=None, help="raw download cache (default $DEEPLIGHT_CACHE)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON training config; flags below override it")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", help="run directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--stride", type=int, help="anchor stride for training windows")
    s.add_argument("--s", type=int, help="input hours")
    s.add_argument("--h", type=int, help="forecast hours")
    s.add_argument("--hidden", type=int, help="ConvLSTM hidden channels")
    s.add_argument("--branch", type=int, help="channels per convolution branch")
    s.add_argument("--stem", type=int, help="CStem output channels")
    s.add_argument("--variant", choices=("full", "no_hazy", "no_multibranch", "inception_block",
                                         "minus_D", "minus_R", "minus_L"))
    s.add_argument("--no-hazy", action="store_true", help="train with weighted BCE only")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint or the persistence baseline")
    s.add_argument("--ckpt", help="checkpoint (.json sidecar or .bin)")
    s.add_argument("--baseline", choices=("persistence",))
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--threshold", type=float, action="append", help="probability threshold (repeatable)")
    s.add_argument("--pooling", choices=("counts", "max"), default="counts")
    s.add_argument("--s", type=int, default=6, help="input hours for the baseline")
    s.add_argument("--h", type=int, default=6, help="forecast hours for the baseline")
    s.add_argument("--out", help="write OUT.json and OUT.tsv")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="forecast from one anchor hour")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--anchor", required=True, help="first forecast hour (UTC)")
    s.add_argument("--out", required=True, help="output prediction directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("plot", help="render truth vs probability panels")
    s.add_argument("--pred", required=True, help="prediction directory")
    s.add_argument("--truth", help="dataset directory holding the observed occurrence")
    s.add_argument("--out", required=True, help="output image (PNG)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_plot)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DeepLightError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
