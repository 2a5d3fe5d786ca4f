"""``rexnet`` command line: run experiments, generate topologies, summarize metrics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .errors import ConfigError, RexError
from .harness.config import ExperimentConfig, load_config
from .harness.experiment import ExperimentFailed, run_experiment
from .harness.metrics import read_csv, summarize
from .topology import gen_erdos_renyi, gen_small_world

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    p = _ArgParser(prog="rexnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgParser)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--override", action="append", type=_key_value, default=[], metavar="KEY=VALUE")
    flags = run.add_argument_group("config keys (each overrides the file)")
    for f in fields(ExperimentConfig):
        flags.add_argument(f"--{f.name.replace('_', '-')}", dest=f"key_{f.name}", metavar="VALUE")

    gen = sub.add_parser("gen-topology", help="write an 'i j' edge list")
    gen.add_argument("--kind", choices=("sw", "er"), required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--close-k", type=int, default=6)
    gen.add_argument("--p-far", type=float, default=0.03)
    gen.add_argument("--p", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    summ = sub.add_parser("summarize", help="aggregate a metrics CSV")
    summ.add_argument("metrics")
    return p


def _cmd_run(args) -> int:
    overrides = dict(args.override)
    for f in fields(ExperimentConfig):
        value = getattr(args, f"key_{f.name}")
        if value is not None:
            overrides[f.name] = value
    cfg = load_config(args.config, overrides)
    try:
        result = run_experiment(cfg)
    except ExperimentFailed as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    s = result.summary
    print(f"final mean RMSE {s['final_mean_rmse']:.4f} over {s['nodes']} nodes, "
          f"{s['total_bytes_sent']} bytes sent, {s['wall_time_s']:.1f}s wall")
    return EXIT_OK


def _cmd_gen(args) -> int:
    try:
        if args.kind == "sw":
            topo = gen_small_world(args.n, args.close_k, args.p_far, args.seed)
        else:
            topo = gen_erdos_renyi(args.n, args.p, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    topo.dump(args.out)
    print(f"{topo.n} nodes, {topo.n_edges} edges -> {args.out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    try:
        records = read_csv(args.metrics)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read {args.metrics}: {exc}") from None
    json.dump(summarize(records), sys.stdout, indent=2)
    print()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "gen-topology": _cmd_gen, "summarize": _cmd_summarize}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
