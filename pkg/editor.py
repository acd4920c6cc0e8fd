# editor.py
"""
Reference-conditioned editing: inversion of the source and reference images,
then the two-path denoising loop (editing path with specific reference
attention, reconstruction path replayed from the cached source trajectory)
with local blending after every step.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from attention import (
    NEG_INF_SENTINEL, AttentionControl, AttentionRecorder, AttentionSite,
    AttentionTensors, ReferenceFeatureCache, sr_attn,
)
from backend import NoisePredictor, TextEmbedding, ToyBackend
from errors import ConsistencyError, InvalidScheduleConfig, MissingRecords, NonBinaryMask, ShapeMismatch
from masks import (
    DEFAULT_MT_THRESHOLD, CrossAttnRecord, SourceMask, TargetMask,
    compute_blend_mask, update_target_mask,
)
from scheduler import (
    LatentState, LatentTrajectory, NoiseSchedule, guided_noise,
    invert_trajectory, prev_step,
)

BLEND_MODES = ("union", "empty", "none")
ABLATIONS = ("full", "source_mask_only", "target_mask_only", "no_masks", "no_reference")


# -------------------------
# Gating
# -------------------------
@dataclass(frozen=True)
class GatingPolicy:
    """Inclusive (t_start, t_end) sampling steps and (l_start, l_end) layers where SR-attn runs."""

    step_range: Tuple[int, int]
    layer_range: Tuple[int, int]

    def validate(self, sample_steps: int, layer_count: int):
        t_start, t_end = self.step_range
        l_start, l_end = self.layer_range
        if not 1 <= t_end <= t_start <= sample_steps:
            raise InvalidScheduleConfig(
                f"gating steps ({t_start}, {t_end}) need 1 <= t_end <= t_start <= {sample_steps}"
            )
        if not 1 <= l_start <= l_end <= layer_count:
            raise InvalidScheduleConfig(
                f"gating layers ({l_start}, {l_end}) need 1 <= l_start <= l_end <= {layer_count}"
            )

    @classmethod
    def default(cls, sample_steps: int, layer_count: int) -> "GatingPolicy":
        # later 80% of sampling steps, deeper half of the layers
        t_end = max(1, math.ceil(0.2 * sample_steps))
        return cls((sample_steps, t_end), (layer_count // 2 + 1, layer_count))


def gate_active(policy: Optional[GatingPolicy], t: int, layer: int) -> bool:
    if policy is None:
        return False
    t_start, t_end = policy.step_range
    l_start, l_end = policy.layer_range
    return t_end <= t <= t_start and l_start <= layer <= l_end


# -------------------------
# Requests & results
# -------------------------
@dataclass(frozen=True)
class EditOptions:
    mt_threshold: float = DEFAULT_MT_THRESHOLD
    blend_threshold: float = DEFAULT_MT_THRESHOLD
    mt_soft: bool = False
    p2p_inject: bool = False
    blend_mode: str = "union"
    ablation: str = "full"
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.blend_mode not in BLEND_MODES:
            raise InvalidScheduleConfig(f"blend_mode must be one of {', '.join(BLEND_MODES)}")
        if self.ablation not in ABLATIONS:
            raise InvalidScheduleConfig(f"ablation must be one of {', '.join(ABLATIONS)}")
        for name in ("mt_threshold", "blend_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise InvalidScheduleConfig(f"{name}={value} outside [0, 1)")


@dataclass(frozen=True)
class EditRequest:
    """
    One edit. Images may be omitted when the caller supplies the source
    trajectory/record or the reference cache directly to SpecRefEditor.edit.
    """

    source_image: Optional[np.ndarray]
    reference_image: Optional[np.ndarray]
    source_prompt: str
    target_prompt: str
    edit_token: int
    source_token: int
    source_mask: SourceMask
    gating: Optional[GatingPolicy]
    reference_prompt: str = ""
    options: EditOptions = field(default_factory=EditOptions)


@dataclass(frozen=True)
class StepRecord:
    step: int
    target_mask: torch.Tensor
    blend_mask: torch.Tensor
    latent: torch.Tensor

    @property
    def target_coverage(self) -> float:
        return float(self.target_mask.float().mean())

    @property
    def blend_coverage(self) -> float:
        return float(self.blend_mask.float().mean())


@dataclass
class EditDiagnostics:
    edit_evaluations: int = 0
    recon_evaluations: int = 0
    steps: List[StepRecord] = field(default_factory=list)


@dataclass(frozen=True)
class EditResult:
    image: np.ndarray
    trajectory: LatentTrajectory
    diagnostics: EditDiagnostics


# -------------------------
# Editing-path attention controller
# -------------------------
class ReferenceAttentionControl(AttentionControl):
    """
    SR-attn inside the gating window, plain self-attention elsewhere.

    Cross-attention probabilities of the editing path are recorded (they seed
    the next step's target mask) and, with injection enabled, replaced by
    the reconstruction path's probabilities at the same step and layer.
    """

    def __init__(self, cache: Optional[ReferenceFeatureCache], source_mask: SourceMask,
                 target_mask: TargetMask, gating: Optional[GatingPolicy],
                 cross_record: Optional[CrossAttnRecord] = None,
                 injected: Optional[CrossAttnRecord] = None,
                 sentinel: float = NEG_INF_SENTINEL):
        super().__init__()
        self.cache = cache
        self.source_mask = source_mask
        self.target_mask = target_mask
        self.gating = gating
        self.cross_record = cross_record
        self.injected = injected
        self.sentinel = sentinel

    def self_attention(self, site: AttentionSite, q, k, v):
        if not gate_active(self.gating, self.cur_step, site.layer_index):
            return super().self_attention(site, q, k, v)
        if self.cache is None:
            raise ConsistencyError("SR-attn is gated on but no reference cache was supplied")
        K_ref, V_ref = self.cache.lookup_kv(self.cur_step, site.layer_index)
        return sr_attn(
            AttentionTensors(q, k, v), K_ref, V_ref,
            self.source_mask.for_site(site), self.target_mask.for_site(site),
            heads=site.head_count, sentinel=self.sentinel,
        )

    def cross_attention(self, site: AttentionSite, probs):
        if self.cross_record is not None:
            self.cross_record.add(self.cur_step, site, probs)
        if self.injected is not None:
            return self.injected.probs(self.cur_step, site.layer_index)
        return probs


class _CountingPredictor:
    """Wraps a predictor and counts evaluations, for the per-path step budget."""

    def __init__(self, predictor: NoisePredictor):
        self.predictor = predictor
        self.sites = predictor.sites
        self.calls = 0

    def __call__(self, latent, embedding, timestep, control=None):
        self.calls += 1
        return self.predictor(latent, embedding, timestep, control)


# -------------------------
# Stage 1: inversion
# -------------------------
def extract_reference(reference_latent: LatentState, reference_embedding: TextEmbedding,
                      schedule: NoiseSchedule, predictor: NoisePredictor) -> ReferenceFeatureCache:
    """Invert the reference latent with a K/V recorder attached; the trajectory is discarded."""
    cache = ReferenceFeatureCache(predictor.sites)
    invert_trajectory(reference_latent, predictor, reference_embedding, schedule,
                      AttentionRecorder(kv_cache=cache))
    cache.validate()
    logging.info("Reference features extracted: %d entries over %d steps", len(cache), schedule.sample_steps)
    return cache


def invert_source(source_latent: LatentState, source_embedding: TextEmbedding, schedule: NoiseSchedule,
                  predictor: NoisePredictor) -> Tuple[LatentTrajectory, CrossAttnRecord]:
    record = CrossAttnRecord()
    trajectory = invert_trajectory(source_latent, predictor, source_embedding, schedule,
                                   AttentionRecorder(cross_record=record))
    logging.info("Source inverted: T=%d, %d cross-attention maps", trajectory.final_step, record.map_count())
    return trajectory, record


# -------------------------
# Stage 2 building blocks
# -------------------------
def reconstruction_step(trajectory: LatentTrajectory, t: int, predictor: NoisePredictor,
                        source_embedding: TextEmbedding) -> Tuple[LatentState, CrossAttnRecord]:
    """
    Reconstruction path at step t: z_{1,t-1} comes straight from the cached
    trajectory; the predictor runs at (z_{1,t}, t) only for its maps.
    """
    z_t = trajectory.latent(t)
    z_prev = trajectory.latent(t - 1)
    record = CrossAttnRecord()
    recorder = AttentionRecorder(cross_record=record)
    recorder.begin_step(t)
    predictor(z_t.data, source_embedding, t, recorder)
    return z_prev, record


def blend(z_edit: torch.Tensor, z_recon: torch.Tensor, blend_mask: torch.Tensor) -> torch.Tensor:
    """Editing latent inside the mask, reconstruction latent outside; mask is [H, W]."""
    if z_edit.shape != z_recon.shape:
        raise ShapeMismatch(f"edit latent {tuple(z_edit.shape)} vs reconstruction {tuple(z_recon.shape)}")
    blend_mask = torch.as_tensor(blend_mask)
    if tuple(blend_mask.shape) != tuple(z_edit.shape[-2:]):
        raise ShapeMismatch(f"blend mask {tuple(blend_mask.shape)} vs latent grid {tuple(z_edit.shape[-2:])}")
    if blend_mask.dtype != torch.bool:
        if not torch.all((blend_mask == 0) | (blend_mask == 1)):
            raise NonBinaryMask("blend mask entries must be 0 or 1")
        blend_mask = blend_mask.bool()
    return torch.where(blend_mask, z_edit, z_recon)


def check_inputs(trajectory: LatentTrajectory, record: CrossAttnRecord,
                 cache: Optional[ReferenceFeatureCache], schedule: NoiseSchedule,
                 sites: List[AttentionSite], latent_shape: Tuple[int, ...]):
    """Raise ConsistencyError when trajectory, maps and cache disagree on T, L or shapes."""
    T = schedule.sample_steps
    layers = sorted(s.layer_index for s in sites)
    if trajectory.final_step != T:
        raise ConsistencyError(f"trajectory has T={trajectory.final_step}, configuration has T={T}")
    if tuple(trajectory.latent(0).shape) != tuple(latent_shape):
        raise ConsistencyError(
            f"trajectory latents are {tuple(trajectory.latent(0).shape)}, backend expects {tuple(latent_shape)}"
        )
    if record.steps() != list(range(1, T + 1)):
        raise ConsistencyError(f"source maps cover steps {record.steps()[:1]}..{record.steps()[-1:]}, expected 1..{T}")
    if any(record.layers_at(t) != layers for t in record.steps()):
        raise ConsistencyError(f"source maps do not cover layers {layers} at every step")
    for site in sites:
        if record.resolution(site.layer_index) != tuple(site.resolution):
            raise ConsistencyError(
                f"source maps of layer {site.layer_index} are {record.resolution(site.layer_index)}, "
                f"backend uses {tuple(site.resolution)}"
            )
    if cache is not None:
        if cache.steps() != list(range(1, T + 1)):
            raise ConsistencyError(f"reference cache has {len(cache.steps())} steps, expected T={T}")
        if sorted({layer for _, layer in cache.keys()}) != layers:
            raise ConsistencyError(f"reference cache layers differ from the backend's {layers}")
        cache.validate()
        sites_by_layer = {s.layer_index: s for s in sites}
        for (t, layer) in cache.keys():
            K, _ = cache.lookup_kv(t, layer)
            site = sites_by_layer[layer]
            if tuple(K.shape) != (site.tokens, site.d_total):
                raise ConsistencyError(
                    f"reference K at ({t}, {layer}) is {tuple(K.shape)}, site expects {(site.tokens, site.d_total)}"
                )


# -------------------------
# Editor
# -------------------------
class SpecRefEditor:
    def __init__(self, backend: ToyBackend, schedule: NoiseSchedule, sentinel: float = NEG_INF_SENTINEL):
        self.backend = backend
        self.schedule = schedule
        self.sentinel = sentinel

    @property
    def sites(self) -> List[AttentionSite]:
        return self.backend.sites

    def extract_reference(self, image: np.ndarray, prompt: str = "") -> ReferenceFeatureCache:
        latent = self.backend.encode_image(image)
        return extract_reference(latent, self.backend.embed_text(prompt), self.schedule, self.backend)

    def invert_source(self, image: np.ndarray, prompt: str) -> Tuple[LatentTrajectory, CrossAttnRecord]:
        latent = self.backend.encode_image(image)
        return invert_source(latent, self.backend.embed_text(prompt), self.schedule, self.backend)

    def reconstruction_step(self, trajectory: LatentTrajectory, t: int,
                            source_embedding: TextEmbedding) -> Tuple[LatentState, CrossAttnRecord]:
        return reconstruction_step(trajectory, t, self.backend, source_embedding)

    # -------------------------
    # masks per step
    # -------------------------
    def _target_mask(self, request: EditRequest, t: int, source_record: CrossAttnRecord,
                     edit_record: CrossAttnRecord, fixed: Optional[torch.Tensor]) -> TargetMask:
        options = request.options
        if fixed is not None:
            return TargetMask.from_grid(fixed, self.sites, t)
        if options.ablation in ("source_mask_only", "no_masks"):
            return TargetMask.all_active(self.sites, t)
        T = self.schedule.sample_steps
        # the first editing step has no editing-path maps yet; seed from the source inversion
        if t == T:
            return update_target_mask(source_record, request.source_token, t, options.mt_threshold,
                                      self.sites, final_step=T, soft=options.mt_soft)
        return update_target_mask(edit_record, request.edit_token, t, options.mt_threshold,
                                  self.sites, final_step=T, soft=options.mt_soft)

    def _blend_mask(self, request: EditRequest, t: int, edit_record: CrossAttnRecord,
                    recon_record: CrossAttnRecord, fixed: Optional[torch.Tensor]) -> torch.Tensor:
        latent_resolution = tuple(self.backend.config.latent_size)
        if fixed is not None:
            return torch.as_tensor(fixed).bool()
        mode = request.options.blend_mode
        if mode == "empty":
            return torch.zeros(latent_resolution, dtype=torch.bool)
        if mode == "none":
            return torch.ones(latent_resolution, dtype=torch.bool)
        threshold = request.options.blend_threshold
        edit_side = compute_blend_mask(edit_record, [request.edit_token], t, threshold, latent_resolution)
        recon_side = compute_blend_mask(recon_record, [request.source_token], t, threshold, latent_resolution)
        return edit_side | recon_side

    def _source_mask(self, request: EditRequest) -> SourceMask:
        if request.options.ablation in ("target_mask_only", "no_masks"):
            return SourceMask.all_active(tuple(self.backend.config.latent_size), self.sites)
        return request.source_mask

    @staticmethod
    def _check_token(embedding: TextEmbedding, index: int, which: str):
        if not 0 <= index < len(embedding.words):
            raise MissingRecords(
                f"{which}={index} is not a word of the {len(embedding.words)}-word prompt"
            )

    # -------------------------
    # main loop
    # -------------------------
    def edit(self, request: EditRequest, *, reference_cache: Optional[ReferenceFeatureCache] = None,
             source_trajectory: Optional[LatentTrajectory] = None,
             source_record: Optional[CrossAttnRecord] = None,
             fixed_target_mask: Optional[torch.Tensor] = None,
             fixed_blend_mask: Optional[torch.Tensor] = None) -> EditResult:
        """
        Run the editing stage for t = T..1 and decode the final latent.

        Missing inversion artifacts are computed from the request's images.
        fixed_target_mask ([h, w] grid) and fixed_blend_mask ([H, W] latent
        grid) replace the map-derived masks at every step.
        """
        options = request.options
        T = self.schedule.sample_steps
        backend = self.backend

        gating = None if options.ablation == "no_reference" else request.gating
        if gating is not None:
            gating.validate(T, len(self.sites))

        source_embedding = backend.embed_text(request.source_prompt)
        target_embedding = backend.embed_text(request.target_prompt)
        uncond_embedding = backend.embed_text("") if options.guidance_scale != 1.0 else None
        self._check_token(source_embedding, request.source_token, "source_token")
        self._check_token(target_embedding, request.edit_token, "edit_token")

        if source_trajectory is None or source_record is None:
            if request.source_image is None:
                raise ConsistencyError("edit needs a source image or a cached source trajectory and maps")
            source_trajectory, source_record = self.invert_source(request.source_image, request.source_prompt)
        if reference_cache is None and gating is not None:
            if request.reference_image is None:
                raise ConsistencyError("edit needs a reference image or a cached reference cache")
            reference_cache = self.extract_reference(request.reference_image, request.reference_prompt)
        check_inputs(source_trajectory, source_record, reference_cache, self.schedule,
                     self.sites, backend.config.latent_shape)

        source_mask = self._source_mask(request)
        edit_path = _CountingPredictor(backend)
        recon_path = _CountingPredictor(backend)
        diagnostics = EditDiagnostics()
        edit_record = CrossAttnRecord()

        z_edit = LatentState(source_trajectory.latent(T).data.clone(), T)
        states = [z_edit]
        for t in range(T, 0, -1):
            target_mask = self._target_mask(request, t, source_record, edit_record, fixed_target_mask)

            # reconstruction first: its maps may be injected into the editing path
            z_recon, recon_record = reconstruction_step(source_trajectory, t, recon_path, source_embedding)

            control = ReferenceAttentionControl(
                reference_cache, source_mask, target_mask, gating,
                cross_record=edit_record,
                injected=recon_record if options.p2p_inject else None,
                sentinel=self.sentinel,
            )
            control.begin_step(t)
            eps = guided_noise(edit_path, z_edit.data, target_embedding, t, control,
                               options.guidance_scale, uncond_embedding)
            z_next = prev_step(z_edit, eps, self.schedule, t)

            blend_mask = self._blend_mask(request, t, edit_record, recon_record, fixed_blend_mask)
            z_edit = LatentState(blend(z_next.data, z_recon.data, blend_mask), t - 1)
            states.append(z_edit)

            diagnostics.steps.append(StepRecord(t, target_mask.grid, blend_mask, z_edit.data))
            logging.debug(
                "step %d: target mask %.3f, blend mask %.3f",
                t, target_mask.coverage(), float(blend_mask.float().mean()),
            )

        diagnostics.edit_evaluations = edit_path.calls
        diagnostics.recon_evaluations = recon_path.calls
        trajectory = LatentTrajectory(tuple(reversed(states)))
        image = backend.decode_latent(trajectory.latent(0))
        logging.info(
            "Edit finished: T=%d, %d editing and %d reconstruction evaluations",
            T, diagnostics.edit_evaluations, diagnostics.recon_evaluations,
        )
        return EditResult(image, trajectory, diagnostics)
