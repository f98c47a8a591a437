"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 transport failure,
4 numerical divergence (non-finite state or a failed equivalence check).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import (BadImageFormat, ConfigError, DimensionMismatch, EmptyBuffer,
                     InvalidOwnerMap, NonFiniteState, ProtocolViolation, TileTooSmall,
                     TransportFailure)

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("hypergibbs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypergibbs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("gen-data", "generate blurred Poisson observations"),
                       ("run", "sample the posterior and write estimates"),
                       ("oracle-check", "compare distributed and serial chains bit for bit"),
                       ("bench", "time iterations for several worker grids")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="INI experiment configuration")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        if name == "run":
            p.add_argument("--rank", type=int, help="rank to run with the tcp transport")
        if name == "oracle-check":
            p.add_argument("--perturb-aggregation", action="store_true",
                           help=argparse.SUPPRESS)
        if name == "bench":
            p.add_argument("--csv", help="CSV path (default <out>/bench.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    from . import experiment
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.output.dir = args.out
        if args.command == "gen-data":
            experiment.gen_data(cfg)
            print(f"wrote observations to {cfg.out_dir}")
        elif args.command == "run":
            res = experiment.run_experiment(cfg, rank=args.rank)
            if res is not None:
                m = res.metrics
                print(f"snr_mmse={m['snr_mmse']:.2f} dB snr_map={m['snr_map']:.2f} dB "
                      f"ssim_mmse={m['ssim_mmse']:.3f} ssim_map={m['ssim_map']:.3f} "
                      f"runtime={m['runtime_s']:.1f}s")
        elif args.command == "oracle-check":
            reports = experiment.oracle_check(
                cfg, aggregation="interleaved" if args.perturb_aggregation else "fused")
            for r in reports:
                print(r.line())
            if not all(r.passed for r in reports):
                return EXIT_DIVERGENCE
        elif args.command == "bench":
            for row in experiment.bench(cfg, args.csv):
                print(",".join(f"{k}={v}" for k, v in row.items()))
    except (ConfigError, EmptyBuffer, FileNotFoundError, BadImageFormat, TileTooSmall,
            InvalidOwnerMap, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportFailure, ProtocolViolation) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except NonFiniteState as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
