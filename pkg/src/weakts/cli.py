"""Command-line entry point: ``weakts run`` and ``weakts synth``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, ParseError
from .experiment import ExperimentConfig, ExperimentError, env_seed, run_experiment
from .synth import SynthConfig, generate, write_corpus

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("weakts")


def build_parser():
    parser = argparse.ArgumentParser(prog="weakts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a JSON config")
    run.add_argument("--config", required=True, help="experiment JSON document")
    run.add_argument("--out", help="output directory (overrides the config's 'out')")
    run.add_argument("--jobs", type=int, default=1, help="parallel (model, replicate) runs")
    run.add_argument("--seed-override", type=int, help="global seed; wins over WEAKTS_SEED")

    synth = sub.add_parser("synth", help="write a synthetic corpus as per-participant CSVs")
    synth.add_argument("--config", required=True, help="synthetic-generator JSON document")
    synth.add_argument("--out", required=True, help="output directory")
    return parser


def _load_synth(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config: expected a JSON object")
    participants = doc.pop("participants", 18)
    if not isinstance(participants, int) or participants < 1:
        raise ConfigurationError("participants: expected a positive integer")
    try:
        cfg = SynthConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigurationError(f"synth: {exc}") from exc
    return cfg, participants


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    seed = args.seed_override if args.seed_override is not None else env_seed()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if args.jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    result = run_experiment(cfg, args.out, jobs=args.jobs)
    sys.stdout.write(result["table"])
    return EXIT_OK


def cmd_synth(args):
    cfg, participants = _load_synth(args.config)
    seed = env_seed()
    if seed is not None:
        cfg.seed = seed
    out = write_corpus(generate(cfg, participants), cfg, args.out)
    print(f"wrote {participants} series to {out}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args) if args.command == "run" else cmd_synth(args)
    except (ConfigurationError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"runtime error in model {exc.model}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
