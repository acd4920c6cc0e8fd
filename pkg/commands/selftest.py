# selftest.py
"""
Property suite run by `main.py selftest`: step algebra, masked attention,
SR-attn mixing, reference extraction, exact reconstruction, blend locality
and the miniature end-to-end loop oracle.
"""

import argparse
import logging
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import pandas as pd
import torch

from attention import (
    NEG_INF_SENTINEL, AttentionTensors, attention_weights, mask_attn, merge_heads,
    self_attention, split_heads, sr_attn,
)
from backend import BackendConfig, ToyBackend
from commands.common import add_config_argument, load_pipeline
from config import RunConfig
from editor import EditOptions, EditRequest, GatingPolicy, SpecRefEditor, blend
from errors import EmptySourceMask, SelftestFailed, SpecRefError
from masks import SourceMask
from scalar_reference import ScalarToyModel, loop_blend, loop_mask_attention, loop_pipeline, to_lists
from scheduler import LatentState, build_schedule, invert_step, prev_step
from storage import read_kv_cache, write_kv_cache

PropertyResult = Tuple[bool, str]

_PROPERTIES: List[Tuple[str, Callable[["SelftestContext"], PropertyResult]]] = []


def _property(name: str):
    def register(fn):
        _PROPERTIES.append((name, fn))
        return fn
    return register


class SelftestContext:
    def __init__(self, config: RunConfig, backend: ToyBackend, schedule, sentinel: float):
        self.config = config
        self.backend = backend
        self.schedule = schedule
        self.sentinel = sentinel

    def generator(self, salt: int) -> torch.Generator:
        return torch.Generator().manual_seed(self.config.seed * 7919 + salt)

    def random_image(self, salt: int) -> np.ndarray:
        h, w = self.backend.config.image_size
        pixels = torch.randint(0, 256, (h, w, 3), generator=self.generator(salt), dtype=torch.int64)
        return pixels.numpy().astype(np.uint8)

    def centre_source_mask(self) -> SourceMask:
        h, w = self.backend.config.latent_size
        grid = torch.zeros(h, w)
        grid[h // 4: h - h // 4, w // 4: w - w // 4] = 1.0
        return SourceMask.from_grid(grid, self.backend.sites)


def _random_mask(n: int, gen: torch.Generator) -> torch.Tensor:
    mask = (torch.rand(n, generator=gen) > 0.5).float()
    if not bool(mask.any()):
        mask[int(torch.randint(0, n, (1,), generator=gen))] = 1.0
    return mask


# -------------------------
# properties
# -------------------------
@_property("ddim_round_trip")
def ddim_round_trip(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(1)
    T = ctx.schedule.sample_steps
    worst = 0.0
    for _ in range(1000):
        t = int(torch.randint(1, T + 1, (1,), generator=gen))
        z = torch.randn(4, generator=gen)
        eps = torch.randn(4, generator=gen)
        forward = invert_step(LatentState(z, t - 1), eps, ctx.schedule, t)
        back = prev_step(forward, eps, ctx.schedule, t).data
        worst = max(worst, float((back - z).abs().max() / z.abs().max().clamp(min=1.0)))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


@_property("mask_attention_oracle")
def mask_attention_oracle(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(2)
    worst = 0.0
    for _ in range(200):
        nq, nkv, d = (int(torch.randint(1, hi + 1, (1,), generator=gen)) for hi in (4, 4, 3))
        q = torch.randn(nq, d, generator=gen, dtype=torch.float64)
        k = torch.randn(nkv, d, generator=gen, dtype=torch.float64)
        mask = _random_mask(nkv, gen)
        weights = mask_attn(q, k, mask, ctx.sentinel)
        oracle = torch.tensor(loop_mask_attention(to_lists(q), to_lists(k), mask.tolist(), ctx.sentinel),
                              dtype=torch.float64)
        worst = max(worst, float((weights - oracle).abs().max()))
        worst = max(worst, float((weights.sum(dim=-1) - 1.0).abs().max()))
    return worst <= 1e-6, f"max deviation {worst:.2e}"


@_property("masked_key_nullity")
def masked_key_nullity(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(3)
    leaked = 0.0
    for _ in range(200):
        q = torch.randn(4, 3, generator=gen)
        k = torch.randn(4, 3, generator=gen)
        mask = _random_mask(4, gen)
        weights = mask_attn(q, k, mask, ctx.sentinel)
        leaked = max(leaked, float(weights[:, mask == 0].abs().max()) if bool((mask == 0).any()) else 0.0)
    return leaked == 0.0, f"largest masked-key weight {leaked:.3e}"


@_property("all_ones_mask_is_standard_attention")
def all_ones_mask(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(4)
    worst = 0.0
    for _ in range(50):
        q = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        k = torch.randn(3, 3, generator=gen, dtype=torch.float64)
        diff = mask_attn(q, k, torch.ones(3), ctx.sentinel) - attention_weights(q, k)
        worst = max(worst, float(diff.abs().max()))
    return worst <= 1e-6, f"max deviation {worst:.2e}"


@_property("empty_source_mask_rejected")
def empty_source_mask(ctx: SelftestContext) -> PropertyResult:
    try:
        mask_attn(torch.randn(2, 3), torch.randn(3, 3), torch.zeros(3), ctx.sentinel)
    except EmptySourceMask:
        return True, "EmptySourceMask raised"
    return False, "all-zero source mask was accepted"


@_property("sr_attn_mixing")
def sr_attn_mixing(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(5)
    heads, n, n_ref, d_total = 2, 6, 5, 8
    Q, K, V = (torch.randn(n, d_total, generator=gen) for _ in range(3))
    K_ref, V_ref = (torch.randn(n_ref, d_total, generator=gen) for _ in range(2))
    edit = AttentionTensors(Q, K, V)
    plain = self_attention(Q, K, V, heads)
    ones_ref = torch.ones(n_ref)
    reference = merge_heads(attention_weights(split_heads(Q, heads), split_heads(K_ref, heads))
                            @ split_heads(V_ref, heads))

    zero_out = sr_attn(edit, K_ref, V_ref, _random_mask(n_ref, gen), torch.zeros(n), heads, ctx.sentinel)
    one_out = sr_attn(edit, K_ref, V_ref, ones_ref, torch.ones(n), heads, ctx.sentinel)
    half_out = sr_attn(edit, K_ref, V_ref, ones_ref, torch.full((n,), 0.5), heads, ctx.sentinel)

    checks = {
        "M_t=0 bitwise plain": torch.equal(zero_out, plain),
        "M_t=1 reference": bool((one_out - reference).abs().max() <= 1e-6),
        "M_t=0.5 mean": bool((half_out - 0.5 * (plain + reference)).abs().max() <= 1e-6),
    }
    failed = [name for name, ok in checks.items() if not ok]
    return not failed, "ok" if not failed else "failed: " + ", ".join(failed)


@_property("reference_extraction")
def reference_extraction(ctx: SelftestContext) -> PropertyResult:
    image = ctx.random_image(6)
    first = SpecRefEditor(ToyBackend(ctx.backend.config), ctx.schedule).extract_reference(image)
    second = SpecRefEditor(ToyBackend(ctx.backend.config), ctx.schedule).extract_reference(image)
    expected = ctx.schedule.sample_steps * len(ctx.backend.sites)
    if len(first) != expected:
        return False, f"{len(first)} entries, expected {expected}"
    for key in first.keys():
        if not all(torch.equal(a, b) for a, b in zip(first.lookup_kv(*key), second.lookup_kv(*key))):
            return False, f"rerun differs at {key}"
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ref.sprk"
        write_kv_cache(path, first)
        loaded = read_kv_cache(path, ctx.backend.sites)
    if loaded.keys() != first.keys():
        return False, "round trip changed the entry set"
    for key in first.keys():
        if not all(torch.equal(a, b) for a, b in zip(first.lookup_kv(*key), loaded.lookup_kv(*key))):
            return False, f"round trip differs at {key}"
    return True, f"{expected} entries, deterministic, round trip bit-exact"


def _request(ctx: SelftestContext, options: EditOptions, prompt: str = "a photo of a cat") -> EditRequest:
    return EditRequest(
        source_image=ctx.random_image(7),
        reference_image=ctx.random_image(8),
        source_prompt=prompt,
        target_prompt=prompt,
        edit_token=len(prompt.split()) - 1,
        source_token=len(prompt.split()) - 1,
        source_mask=ctx.centre_source_mask(),
        gating=ctx.config.gating(),
        options=options,
    )


@_property("exact_reconstruction")
def exact_reconstruction(ctx: SelftestContext) -> PropertyResult:
    editor = SpecRefEditor(ctx.backend, ctx.schedule, ctx.sentinel)
    request = _request(ctx, EditOptions(blend_mode="empty", ablation="no_reference"))
    trajectory, record = editor.invert_source(request.source_image, request.source_prompt)
    result = editor.edit(request, source_trajectory=trajectory, source_record=record)
    z0 = trajectory.latent(0).data
    err = float((result.trajectory.latent(0).data - z0).abs().max())
    same_image = np.array_equal(result.image, ctx.backend.decode_latent(trajectory.latent(0)))
    return err <= 1e-5 and same_image, f"latent error {err:.2e}, image identical: {same_image}"


@_property("blend_locality")
def blend_locality(ctx: SelftestContext) -> PropertyResult:
    editor = SpecRefEditor(ctx.backend, ctx.schedule, ctx.sentinel)
    request = _request(ctx, ctx.config.edit_options())
    request = replace(request, target_prompt="a photo of a dog")
    trajectory, record = editor.invert_source(request.source_image, request.source_prompt)
    result = editor.edit(request, source_trajectory=trajectory, source_record=record)
    for step in result.diagnostics.steps:
        outside = ~step.blend_mask
        if not torch.equal(step.latent[:, outside], trajectory.latent(step.step - 1).data[:, outside]):
            return False, f"step {step.step} changed latents outside the blend mask"
    budget = (result.diagnostics.edit_evaluations, result.diagnostics.recon_evaluations)
    expected = ctx.schedule.sample_steps
    if ctx.config.guidance_scale == 1.0 and budget != (expected, expected):
        return False, f"evaluations {budget}, expected {expected} per path"
    return True, f"{len(result.diagnostics.steps)} steps checked"


@_property("blend_oracle")
def blend_oracle(ctx: SelftestContext) -> PropertyResult:
    gen = ctx.generator(9)
    z_edit, z_recon = (torch.randn(3, 4, 5, generator=gen) for _ in range(2))
    checker = (torch.arange(4)[:, None] + torch.arange(5)[None, :]) % 2 == 0
    expected = torch.tensor(loop_blend(to_lists(z_edit), to_lists(z_recon), checker.tolist()), dtype=torch.float32)
    return torch.equal(blend(z_edit, z_recon, checker), expected), "checkerboard"


def miniature_case(seed: int, sentinel: float = NEG_INF_SENTINEL):
    """T=2, L=2, 2x2 latent run with one-hot masks: (editor result, source trajectory, loop oracle)."""
    backend = ToyBackend(BackendConfig(
        seed=seed, channels=3, latent_size=(2, 2), patch_size=1,
        block_resolutions=((2, 2), (2, 2)), heads=1, head_dim=2, text_dim=4, seq_len=3,
    ))
    schedule = build_schedule(10, 2, (0.1, 0.2))
    gen = torch.Generator().manual_seed(seed + 17)
    source_image = torch.randint(0, 256, (2, 2, 3), generator=gen).numpy().astype(np.uint8)
    reference_image = torch.randint(0, 256, (2, 2, 3), generator=gen).numpy().astype(np.uint8)
    source_grid = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    target_grid = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    blend_grid = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    gating = GatingPolicy((2, 1), (1, 2))

    editor = SpecRefEditor(backend, schedule, sentinel)
    request = EditRequest(
        source_image=source_image, reference_image=reference_image,
        source_prompt="a cat", target_prompt="a dog", edit_token=1, source_token=1,
        source_mask=SourceMask.from_grid(source_grid, backend.sites), gating=gating,
    )
    trajectory, record = editor.invert_source(source_image, request.source_prompt)
    result = editor.edit(request, source_trajectory=trajectory, source_record=record,
                         fixed_target_mask=target_grid, fixed_blend_mask=blend_grid.bool())

    model = ScalarToyModel.from_backend(backend)
    oracle_source, oracle_edit = loop_pipeline(
        model, schedule.alpha_bars,
        to_lists(backend.encode_image(source_image).data),
        to_lists(backend.encode_image(reference_image).data),
        to_lists(backend.embed_text("a cat").vectors),
        to_lists(backend.embed_text("").vectors),
        to_lists(backend.embed_text("a dog").vectors),
        gating.step_range, gating.layer_range,
        source_grid.tolist(), target_grid.tolist(), blend_grid.tolist(),
    )
    return result, trajectory, oracle_source, oracle_edit


@_property("miniature_loop_oracle")
def miniature_loop_oracle(ctx: SelftestContext) -> PropertyResult:
    result, trajectory, oracle_source, oracle_edit = miniature_case(ctx.config.seed, ctx.sentinel)
    worst = 0.0
    for t in range(trajectory.final_step + 1):
        for got, want in ((trajectory.latent(t).data, oracle_source[t]),
                          (result.trajectory.latent(t).data, oracle_edit[t])):
            worst = max(worst, float((got.double() - torch.tensor(want, dtype=torch.float64)).abs().max()))
    return worst <= 1e-5, f"max latent deviation {worst:.2e}"


# -------------------------
# command
# -------------------------
def run_properties(ctx: SelftestContext) -> pd.DataFrame:
    rows = []
    for name, check in _PROPERTIES:
        try:
            passed, detail = check(ctx)
        except SpecRefError as exc:
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        logging.info("property %s: %s", name, "pass" if passed else "FAIL")
        rows.append({"property": name, "status": "pass" if passed else "FAIL", "detail": detail})
    return pd.DataFrame(rows, columns=["property", "status", "detail"])


def add_parser(subparsers):
    parser = subparsers.add_parser("selftest", help="run the invariant property suite")
    add_config_argument(parser)
    # fault injection for the nullity property
    parser.add_argument("--sentinel", type=float, default=NEG_INF_SENTINEL, help=argparse.SUPPRESS)
    parser.set_defaults(handler=run)
    return parser


def run(args) -> int:
    config, backend, schedule = load_pipeline(args)
    report = run_properties(SelftestContext(config, backend, schedule, args.sentinel))
    print(report.to_string(index=False), flush=True)

    failed = report.loc[report["status"] != "pass", "property"].tolist()
    if failed:
        raise SelftestFailed(f"{len(failed)} properties failed: {', '.join(failed)}")
    return 0
