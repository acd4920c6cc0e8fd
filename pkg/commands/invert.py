# invert.py
import logging

from commands.common import add_config_argument, load_pipeline, report
from editor import invert_source
from storage import read_ppm, write_cross_attn, write_trajectory
from utils.checksum import format_checksum, tensor_digest


def add_parser(subparsers):
    parser = subparsers.add_parser("invert", help="DDIM-invert the source image, recording its cross-attention maps")
    parser.add_argument("--image", required=True, help="source image (binary PPM)")
    parser.add_argument("--prompt", required=True, help="source prompt")
    add_config_argument(parser)
    parser.add_argument("--out-traj", required=True, help="output latent trajectory file")
    parser.add_argument("--out-maps", required=True, help="output cross-attention maps file")
    parser.set_defaults(handler=run)
    return parser


def run(args) -> int:
    config, backend, schedule = load_pipeline(args)
    latent = backend.encode_image(read_ppm(args.image))
    trajectory, record = invert_source(latent, backend.embed_text(args.prompt), schedule, backend)

    write_trajectory(args.out_traj, trajectory)
    write_cross_attn(args.out_maps, record)
    logging.info("Inversion of %s done (T=%d)", args.image, trajectory.final_step)

    report("final latent sha256", format_checksum(tensor_digest(trajectory.latent(trajectory.final_step).data)))
    return 0
