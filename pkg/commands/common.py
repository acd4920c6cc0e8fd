# common.py
from typing import Tuple

from backend import ToyBackend
from config import RunConfig, load_config
from scheduler import NoiseSchedule


def add_config_argument(parser):
    parser.add_argument("--config", default=None,
                        help="run configuration (key = value); defaults to data/default.cfg")


def load_pipeline(args) -> Tuple[RunConfig, ToyBackend, NoiseSchedule]:
    config = load_config(args.config)
    return config, ToyBackend(config.backend_config()), config.schedule()


def report(label: str, value: str):
    """Command results go to stdout; everything else is logged to stderr."""
    print(f"{label}: {value}", flush=True)
