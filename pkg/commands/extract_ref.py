# extract_ref.py
from commands.common import add_config_argument, load_pipeline, report
from editor import extract_reference
from storage import read_ppm, write_kv_cache
from utils.checksum import file_digest, format_checksum


def add_parser(subparsers):
    parser = subparsers.add_parser("extract-ref", help="record the reference image's self-attention K/V at every step")
    parser.add_argument("--image", required=True, help="reference image (binary PPM)")
    parser.add_argument("--prompt", default="", help="reference prompt (empty by default)")
    add_config_argument(parser)
    parser.add_argument("--out-kv", required=True, help="output reference cache file")
    parser.set_defaults(handler=run)
    return parser


def run(args) -> int:
    config, backend, schedule = load_pipeline(args)
    latent = backend.encode_image(read_ppm(args.image))
    cache = extract_reference(latent, backend.embed_text(args.prompt), schedule, backend)
    write_kv_cache(args.out_kv, cache)
    report("reference cache sha256", format_checksum(file_digest(args.out_kv)))
    return 0
