"""Command line entry point: run one configured experiment."""

from __future__ import annotations

import argparse
from dataclasses import replace

from .experiments import load_config, run_experiment


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="secureftl",
        description="Run a federated transfer learning experiment from a "
                    "key=value config file and write CSV results.")
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--transport", choices=("loopback", "tcp"),
                        help="override the channel between the two parties")
    parser.add_argument("--port", type=int, help="tcp port (0 picks a free one)")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--out", help="override the output directory")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    overrides = {}
    if args.transport is not None:
        overrides["transport"] = args.transport
    if args.port is not None:
        overrides["port"] = args.port
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = replace(cfg, **overrides)

    result = run_experiment(cfg)
    print(f"experiment {cfg.kind} -> {cfg.out_dir}")
    for name in sorted(result.metrics):
        print(f"  {name} = {result.metrics[name]:.6f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
