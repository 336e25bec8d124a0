"""Command-line entry point: ``flagcns <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import run as R
from .cipher import CipherError
from .graph import BundleError, edge_cut, induce_shards, load_bundle, write_shards
from .tensor import NumericError
from .wire import ProtocolError, TransportError

logger = logging.getLogger("flagcns")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    d = R.RunConfig()
    p.add_argument("--dataset", default="", help="bundle dir, dir of client_<i> shards, or synthetic:<name>[:seed]")
    p.add_argument("--clients", type=int, default=d.clients)
    p.add_argument("--partition", choices=sorted(R.PARTITIONERS), default=d.partition)
    p.add_argument("--population", type=int, default=d.population)
    p.add_argument("--layers", type=int, default=d.layers)
    p.add_argument("--layer-types", default=",".join(d.layer_types), help="comma-separated layer registry subset")
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--generations", type=int, default=d.generations)
    p.add_argument("--weight-steps", type=int, default=d.weight_steps)
    p.add_argument("--gamma0", type=float, default=d.gamma0)
    p.add_argument("--gamma-decay", type=float, default=d.gamma_decay)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--retrain-epochs", type=int, default=d.retrain_epochs)
    p.add_argument("--retrain-lr", type=float, default=d.retrain_lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--random-epochs", type=int, default=d.random_epochs)
    p.add_argument("--cipher", choices=("plain", "mask"), default=d.cipher)
    p.add_argument("--scale-bits", type=int, default=d.scale_bits)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--transport", choices=R.TRANSPORTS, default=None,
                   help="default: $FLAGCNS_TRANSPORT or inproc")
    p.add_argument("--out", default=None, help="output directory for run.json and logs")
    p.add_argument("--csv", action="store_true", help="also export per-generation metrics as CSV")
    p.add_argument("--no-timing", action="store_true", help="skip the inference-time measurement")
    p.add_argument("--controller-only", action="store_true", help="force every client quota to zero")
    p.add_argument("--client-only", action="store_true", help="force the controller quota to zero")


def config_from_args(args) -> R.RunConfig:
    from .wire import transport_from_env

    if args.controller_only and args.client_only:
        raise R.ConfigError("--controller-only and --client-only are mutually exclusive")
    mode = "controller-only" if args.controller_only else "client-only" if args.client_only else "full"
    return R.RunConfig(
        dataset=args.dataset,
        clients=args.clients,
        partition=args.partition,
        population=args.population,
        layers=args.layers,
        layer_types=tuple(t.strip() for t in args.layer_types.split(",") if t.strip()),
        hidden=args.hidden,
        generations=args.generations,
        weight_steps=args.weight_steps,
        gamma0=args.gamma0,
        gamma_decay=args.gamma_decay,
        lr=args.lr,
        cipher=args.cipher,
        seed=args.seed,
        transport=args.transport or transport_from_env(),
        out=args.out,
        quota_mode=mode,
        retrain_epochs=args.retrain_epochs,
        retrain_lr=args.retrain_lr,
        weight_decay=args.weight_decay,
        random_epochs=args.random_epochs,
        scale_bits=args.scale_bits,
        timing=not args.no_timing,
        csv=args.csv,
    ).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flagcns", description="Federated GCN architecture search")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split a bundle into per-client shard directories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--partition", choices=sorted(R.PARTITIONERS), default="edgecut")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="run the federated architecture search")
    _common(p)

    p = sub.add_parser("train", help="federated training of one architecture from scratch")
    _common(p)
    p.add_argument("--code", required=True, help=f"named baseline ({', '.join(R.BASELINES)}) or an architecture code")
    p.add_argument("--epochs", type=int, default=None, help="default: --retrain-epochs")

    p = sub.add_parser("flacc", help="test-size-weighted accuracy from per-client numbers")
    p.add_argument("--acc", type=float, nargs="+", required=True)
    p.add_argument("--sizes", type=int, nargs="+", required=True)

    p = sub.add_parser("baseline", help="FL-Random baseline")
    _common(p)
    p.add_argument("--budget", type=int, default=60, help="number of sampled candidates")

    p = sub.add_parser("ablation", help="search with one ablation applied")
    _common(p)
    p.add_argument("variant", choices=R.ABLATIONS)
    return parser


def _print_report(rep: R.RunReport) -> None:
    summary = {k: getattr(rep, k) for k in ("kind", "best_code_text", "final_fll", "flacc", "client_accuracies",
                                            "param_count", "inference_seconds", "messages", "bytes")}
    print(json.dumps(summary, indent=2))


def _dispatch(args) -> int:
    if args.command == "partition":
        g = load_bundle(args.dataset)
        if args.partition not in R.PARTITIONERS:
            raise R.ConfigError(f"unknown partitioner {args.partition!r}")
        part = R.PARTITIONERS[args.partition](g, args.clients, seed=args.seed)
        shards = induce_shards(g, part)
        write_shards(shards, args.out)
        info = {"clients": args.clients, "sizes": part.sizes().tolist(), "edge_cut": edge_cut(g, part)}
        Path(args.out, "partition.json").write_text(json.dumps(info) + "\n")
        print(json.dumps(info))
        return EXIT_OK
    if args.command == "flacc":
        print(R.cmd_flacc(args.acc, args.sizes))
        return EXIT_OK
    cfg = config_from_args(args)
    if args.command == "search":
        rep = R.cmd_search(cfg)
    elif args.command == "train":
        rep = R.cmd_train_arch(args.code, cfg, args.epochs)
    elif args.command == "baseline":
        rep = R.cmd_baseline_random(cfg, args.budget)
    else:
        rep = R.cmd_ablation(cfg, args.variant)
    _print_report(rep)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (TransportError, ProtocolError, ConnectionError) as exc:
        logger.error("transport error: %s", exc)
        return EXIT_TRANSPORT
    except (NumericError, CipherError, FloatingPointError, OverflowError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (R.ConfigError, BundleError, ValueError, FileNotFoundError, KeyError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
