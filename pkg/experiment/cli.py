"""
Command line entry point.

    python -m experiment.cli run --config configs/case_study.ini --policy coride+ --out runs/cs
    python -m experiment.cli build-world --config configs/case_study.ini
    python -m experiment.cli trace --config configs/case_study.ini --policy rev --grid 12 --horizon 10
    python -m experiment.cli export-attention --config configs/case_study.ini --checkpoint runs/cs/seed_0/checkpoints/checkpoint_0020.npz
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ride_core.constants import *
from experiment.config import POLICIES, ExperimentConfig, describe_defaults, load_config, with_overrides
from experiment.runner import build_environment, export_attention, run, trace, write_table
from experiment.world_spec import format_world_spec

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s[%(levelname)s][%(name)s]||%(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coride", description="Hex-grid ride-hailing experiments.",
                                     epilog=describe_defaults(), formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config; defaults are used for anything it leaves out")
    common.add_argument("--seed", type=int, help="run a single seed instead of [experiment] seeds")
    common.add_argument("--policy", choices=POLICIES, help="override [experiment] policy")
    common.add_argument("--episodes", type=int, help="override [training] episodes")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--debug", action="store_true", help="log every simulator step")

    verbs = parser.add_subparsers(dest="verb", required=True)
    verbs.add_parser("run", parents=[common], help="train and evaluate every seed, write result tables")
    verbs.add_parser("build-world", parents=[common], help="print the configured world as a cell-list spec")
    trace_parser = verbs.add_parser("trace", parents=[common], help="trace one vehicle through an evaluation episode")
    trace_parser.add_argument("--grid", type=int, required=True, help="grid the traced vehicle starts in")
    trace_parser.add_argument("--horizon", type=int, default=10)
    trace_parser.add_argument("--checkpoint", help="trained parameters for learned policies")
    attention_parser = verbs.add_parser("export-attention", parents=[common],
                                        help="write the attention weights of one evaluation episode")
    attention_parser.add_argument("--checkpoint", help="trained parameters")
    return parser


def configure_logging(debug: bool):
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if debug else logging.INFO)


def config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(config,
                          experiment={k: v for k, v in (("policy", args.policy),
                                                        ("seeds", (args.seed,) if args.seed is not None else None))
                                      if v is not None},
                          training={"episodes": args.episodes} if args.episodes is not None else {})


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.debug)
    try:
        config = config_from_args(args)
        seed = config.experiment.seeds[0]
        match args.verb:
            case "run":
                run(config, args.out)
            case "build-world":
                world, _ = build_environment(config)
                text = format_world_spec(world)
                if args.out:
                    Path(args.out).write_text(text)
                else:
                    print(world.describe())
                    print(text, end="")
            case "trace":
                tokens = trace(config, seed, args.grid, args.horizon, args.checkpoint)
                print(" ".join(tokens))
            case "export-attention":
                frame = export_attention(config, seed, args.checkpoint)
                if args.out:
                    write_table(frame, Path(args.out))
                else:
                    frame.to_csv(sys.stdout, index=False)
    except (ConfigError, WorldSpecError, UnknownGridError, OrderFormatError, ShapeError, DecisionError, ValueError,
            OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        if e.__cause__ is not None:
            logger.error(f"caused by {type(e.__cause__).__name__}: {e.__cause__}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
