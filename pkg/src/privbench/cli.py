"""Command-line entry point.

Subcommands mirror the pipeline stages. Every registry key is also a flag
(``--train.epochs 50``); ``--set model.tiny.embedding_dim=64`` covers model
presets. Exit codes identify the failing stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from privbench.config import KEYS, describe_keys, load_config
from privbench.errors import ConfigError, DataError, IntegrityError, MetricError, StageError

EXIT_CODES = {"config": 2, "data": 3, "train": 4, "train_canary": 4, "utility": 4, "dea": 5, "mia": 6, "eia": 7,
              "metrics": 8, "report": 9}
EXIT_UNEXPECTED = 1


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="root seed (experiment.seed)")
    common.add_argument("--out", help="output directory (experiment.out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any key, including model.<preset>.<key>")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("configuration keys")
    for k in KEYS:
        if k.dotted not in ("experiment.seed", "experiment.out"):
            keys.add_argument(f"--{k.dotted}", dest=f"key:{k.dotted}", metavar="V", help=k.help or None)

    p = argparse.ArgumentParser(prog="privbench", description="Privacy evaluation of tiny language models.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="prepare data and train the victims")
    attack = sub.add_parser("attack", parents=[common], help="run one attack on trained victims")
    attack.add_argument("attack", choices=("dea", "mia", "eia"))
    sub.add_parser("metrics", parents=[common], help="recompute metrics.csv from dumps")
    sub.add_parser("report", parents=[common], help="render every report table from dumps")
    sub.add_parser("run", parents=[common], help="full pipeline")
    sub.add_parser("keys", help="list configuration keys with desk and full-scale values")
    return p


def _overrides(args) -> dict:
    out = {name[4:]: v for name, v in vars(args).items() if name.startswith("key:") and v is not None}
    if args.seed is not None:
        out["experiment.seed"] = args.seed
    if args.out is not None:
        out["experiment.out"] = args.out
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _dispatch(args) -> int:
    from privbench import pipeline
    from privbench.report import report_render

    config = load_config(args.config, _overrides(args))
    out = Path(config.get("experiment", "out"))
    timings: dict = {}

    def data():
        try:
            d = pipeline.prepare_data(config)
            pipeline.check_lengths(config, d)
            return d
        except (ConfigError, DataError) as exc:
            raise StageError("data", exc) from exc

    def render(tables=("summary", "metrics", "json")):
        try:
            return report_render(out, config, tables)
        except (IntegrityError, MetricError, OSError, ValueError) as exc:
            raise StageError("metrics" if tables == ("metrics",) else "report", exc) from exc

    if args.command == "run":
        report = pipeline.run_experiment(config, out)
        return _failure_code(report.failures)
    if args.command == "train":
        d = data()
        pipeline.persist_data(d, out)
        pipeline.write_config(config, out)
        pipeline.stage_train(config, d, out, timings)
        pipeline.write_timings(out, timings)
    elif args.command == "attack":
        failures = pipeline.stage_attacks(config, data(), out, timings, only=(args.attack,))
        pipeline.write_timings(out, timings)
        return _failure_code(failures)
    elif args.command == "metrics":
        render(("metrics",))
    elif args.command == "report":
        render()
    return 0


def _failure_code(failures: dict) -> int:
    for key in sorted(failures):
        logging.getLogger("privbench").error("%s: %s", key, failures[key])
    if not failures:
        return 0
    return EXIT_CODES.get(sorted(failures)[0].rsplit("/", 1)[-1], EXIT_UNEXPECTED)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "keys":
        print("\n".join(describe_keys()))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, EXIT_UNEXPECTED)


if __name__ == "__main__":
    sys.exit(main())
