#!/usr/bin/env python3
"""
SpecRef: reference-conditioned image editing on a deterministic toy backend
"""

import sys
import logging
import argparse
from typing import List, Optional

import torch

from commands import edit, extract_ref, invert, selftest
from errors import SpecRefError

SUBCOMMANDS = (invert, extract_ref, edit, selftest)


def setup_logging(log_file: Optional[str] = None, verbose: bool = False):
    # stdout carries command results only
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specref", description=__doc__.strip())
    parser.add_argument("--log-file", default=None, help="also write the log to this file")
    parser.add_argument("--verbose", action="store_true", help="log per-step details")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in SUBCOMMANDS:
        module.add_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.verbose)

    # results must not depend on the thread count
    torch.set_num_threads(1)

    try:
        return args.handler(args)
    except SpecRefError as e:
        logging.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception:
        logging.exception("Unexpected failure in %s", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
