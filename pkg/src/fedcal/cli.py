"""Command line entry point: ``fedcal {partition,run,sweep,ablate,verify}``.

Exit codes: 0 success, 1 runtime failure (or a failed verify check),
2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .errors import FormatError, UsageError
from .harness import ConfigError, load_config, percent

log = logging.getLogger("fedcal")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (partition, data and federation)")
    p.add_argument("--beta", type=float, help="Dirichlet concentration")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--idx-images", help="IDX image file (switches to IDX data)")
    p.add_argument("--idx-labels", help="IDX label file")
    p.add_argument("--bins", type=int, help="ECE bin count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("partition", help="print per-client shard statistics"))
    _common(sub.add_parser("run", help="single experiment"))

    p = sub.add_parser("sweep", help="beta x seed grid with mean +- std summary")
    _common(p)
    p.add_argument("--betas", type=_floats, default=[1.0, 0.5, 0.3, 0.1])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])

    p = sub.add_parser("ablate", help="weight matching, scaler width or lambda sweeps")
    _common(p)
    p.add_argument("mode", choices=["wm", "width", "lambda"])
    p.add_argument("--widths", type=_ints, default=[8, 16, 32, 64])
    p.add_argument("--lambdas", type=_floats, default=None)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--only", help="comma-separated subset of checks")
    return parser


def _config(args) -> harness.ExperimentConfig:
    overrides = {
        "seed": args.seed, "beta": args.beta, "methods": args.methods, "out_dir": args.out,
        "idx_images": args.idx_images, "idx_labels": args.idx_labels, "bins": args.bins,
    }
    return load_config(args.config, overrides)


def _print_final(rows):
    print(f"{'method':<14}{'round':>6}{'global ECE %':>14}{'mean local %':>14}{'max local %':>13}{'top1 %':>9}")
    for method, r in harness.final_rows(rows).items():
        print(f"{method:<14}{r['round']:>6}{percent(r['global_ece']):>14}{percent(r['mean_local_ece']):>14}"
              f"{percent(r['max_local_ece']):>13}{100 * r['top1']:>9.2f}")


def cmd_partition(args) -> int:
    cfg = _config(args)
    rows = harness.partition_stats(cfg)
    print("client,train,validation,max_class_share,histogram")
    for r in rows:
        print(f"{r['client']},{r['train']},{r['validation']},{r['max_class_share']:.3f},{r['histogram']}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    manifest = harness.run_experiment(cfg)
    _print_final(harness.read_metrics(manifest.metrics_path))
    print(f"wrote {Path(cfg.out_dir).resolve()} in {manifest.duration_s:.1f}s")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    table, _ = harness.sweep(cfg, args.betas, args.seeds)
    print(harness.format_table(table))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    if args.mode == "wm":
        cfg = replace(cfg, methods=("fedcal", "fedcal_no_wm"), out_dir=str(out / "ablate_wm"))
        harness.run_experiment(cfg)
        _print_final(harness.read_metrics(Path(cfg.out_dir) / "metrics.csv"))
    elif args.mode == "width":
        rows = harness.ablate_widths(cfg, args.widths)
        harness.write_rows(out / "ablate_width.csv", rows)
        for r in rows:
            print(f"width {r['width']:>4}: global ECE {percent(r['global_ece'])}%, mean local {percent(r['mean_local_ece'])}%")
    else:
        rows = harness.lambda_sweep(cfg, args.lambdas)
        harness.write_rows(out / "ablate_lambda.csv", rows)
        for r in rows:
            print(f"{r['variant']:<10} lambda {r['lambda']:.2f}: global {percent(r['global_ece'])}%, "
                  f"client0 {percent(r['local_ece_0'])}%, client1 {percent(r['local_ece_1'])}%")
    return 0


def cmd_verify(args) -> int:
    from .verify import CHECKS, run_all

    names = None
    if args.only:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    results = run_all(names)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "partition": cmd_partition,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        # usage errors raised while running (e.g. a degenerate partition) are still bad input
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
