# edit.py
import logging

from commands.common import add_config_argument, load_pipeline, report
from editor import EditRequest, SpecRefEditor
from errors import ConsistencyError
from masks import load_source_mask
from storage import read_cross_attn, read_kv_cache, read_pgm, read_trajectory, write_ppm
from utils.checksum import format_checksum, image_digest
from utils.diagnostics import write_dump


def add_parser(subparsers):
    parser = subparsers.add_parser("edit", help="run the reference-conditioned editing stage")
    parser.add_argument("--src-traj", required=True, help="source trajectory from `invert`")
    parser.add_argument("--src-maps", required=True, help="source cross-attention maps from `invert`")
    parser.add_argument("--ref-kv", required=True, help="reference cache from `extract-ref`")
    parser.add_argument("--source-prompt", required=True)
    parser.add_argument("--target-prompt", required=True)
    parser.add_argument("--edit-token", type=int, required=True, help="word index of the edited object in the target prompt")
    parser.add_argument("--source-token", type=int, required=True, help="word index of the replaced object in the source prompt")
    parser.add_argument("--mask", required=True, help="reference object mask (binary PGM)")
    add_config_argument(parser)
    parser.add_argument("--out", required=True, help="edited image (binary PPM)")
    parser.set_defaults(handler=run)
    return parser


def run(args) -> int:
    config, backend, schedule = load_pipeline(args)

    trajectory = read_trajectory(args.src_traj)
    record = read_cross_attn(args.src_maps)
    cache = read_kv_cache(args.ref_kv, backend.sites)
    if trajectory.final_step != schedule.sample_steps:
        raise ConsistencyError(
            f"{args.src_traj} has T={trajectory.final_step}, config has T={schedule.sample_steps}"
        )
    if cache.steps() != list(range(1, trajectory.final_step + 1)):
        raise ConsistencyError(f"{args.ref_kv} does not cover the trajectory's {trajectory.final_step} steps")

    source_mask = load_source_mask(read_pgm(args.mask), backend.config.latent_size, backend.sites)
    request = EditRequest(
        source_image=None,
        reference_image=None,
        source_prompt=args.source_prompt,
        target_prompt=args.target_prompt,
        edit_token=args.edit_token,
        source_token=args.source_token,
        source_mask=source_mask,
        gating=config.gating(),
        options=config.edit_options(),
    )

    editor = SpecRefEditor(backend, schedule)
    result = editor.edit(request, reference_cache=cache, source_trajectory=trajectory, source_record=record)
    write_ppm(args.out, result.image)

    if config.dump_dir:
        write_dump(config.dump_dir, result.diagnostics, config)
    logging.info("Edited image written to %s", args.out)

    report("edited image sha256", format_checksum(image_digest(result.image)))
    return 0
