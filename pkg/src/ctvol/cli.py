"""``ctvol`` command-line entry point.

Exit codes: 0 success, 1 validation/config error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .augment import AugmentError
from .config import ConfigError, load_config
from .metrics import MetricsError
from .segnet import NonFiniteLoss, SegNetError
from .volume_io import VolumeIOError
from .volumetry import VolumetryError

COMMANDS = {
    "convert": pipeline.cmd_convert,
    "generate-phantoms": pipeline.cmd_generate_phantoms,
    "split": pipeline.cmd_split,
    "augment": pipeline.cmd_augment,
    "train": pipeline.cmd_train,
    "eval": pipeline.cmd_eval,
    "infer": pipeline.cmd_infer,
    "report": pipeline.cmd_report,
}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctvol", description="CT lung segmentation and infection volumetry")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.steps=100 (repeatable)")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("ctvol")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        COMMANDS[args.command](cfg)
    except NonFiniteLoss as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, AugmentError, json.JSONDecodeError, KeyError, TypeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (VolumeIOError, VolumetryError, MetricsError, SegNetError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
