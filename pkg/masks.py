# masks.py
"""
Source mask M_s, per-step target mask M_t, the cross-attention record both
paths write into, and the local-blend mask.

Grids are [h, w] tensors; per-site vectors are the row-major flattening of
the grid at that site's resolution.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from attention import AttentionSite
from errors import DimensionMismatch, DuplicateEntry, EmptyMask, MissingRecords, ShapeMismatch

Resolution = Tuple[int, int]

MASK_PIXEL_THRESHOLD = 127
DEFAULT_MT_THRESHOLD = 0.3


# -------------------------
# Grid helpers
# -------------------------
def _resample_axis(grid: torch.Tensor, size: int, dim: int) -> torch.Tensor:
    n = grid.shape[dim]
    if size == n:
        return grid
    if size > n:
        return grid.index_select(dim, torch.arange(size) * n // size)
    # every fine cell belongs to exactly one coarse cell
    cell = torch.arange(n) * size // n
    cell = cell.view(-1, 1) if dim == 0 else cell.view(1, -1)
    shape = list(grid.shape)
    shape[dim] = size
    return grid.new_zeros(shape).scatter_reduce(dim, cell.expand_as(grid).contiguous(), grid, reduce="amax")


def resample_grid(grid: torch.Tensor, size: Resolution) -> torch.Tensor:
    """Per axis: any-coverage when shrinking, nearest-neighbour when growing."""
    grid = grid.float()
    if tuple(grid.shape) == tuple(size):
        return grid.clone()
    return _resample_axis(_resample_axis(grid, size[0], 0), size[1], 1)


def any_coverage_pool(grid: torch.Tensor, size: Resolution) -> torch.Tensor:
    """Downsample a nonnegative grid; a coarse cell takes the max of the fine cells under it."""
    h, w = grid.shape
    if size[0] > h or size[1] > w:
        raise DimensionMismatch(f"cannot pool a {h}x{w} grid up to {size[0]}x{size[1]}")
    return resample_grid(grid, size)


def canonical_resolution(resolutions: Iterable[Resolution]) -> Resolution:
    """The coarsest attention resolution; cross-attention maps are aggregated there."""
    resolutions = list(resolutions)
    if not resolutions:
        raise MissingRecords("no attention resolutions available")
    return min(resolutions, key=lambda r: r[0] * r[1])


def normalize_map(values: torch.Tensor) -> torch.Tensor:
    """Min-max to [0, 1]; a flat map (max == min) counts as fully active."""
    lo, hi = values.min(), values.max()
    if not bool(hi > lo):
        return torch.ones_like(values)
    return (values - lo) / (hi - lo)


def binarize(values: torch.Tensor, threshold: float) -> torch.Tensor:
    return (values > threshold).float()


# -------------------------
# Cross-attention record
# -------------------------
class CrossAttnRecord:
    """
    Cross-attention probabilities keyed by (step, layer).

    Each entry is [heads, N_q, seq_len]; the word map of a token is the head
    mean of its column.
    """

    def __init__(self):
        self._probs: Dict[Tuple[int, int], torch.Tensor] = {}
        self._resolutions: Dict[int, Resolution] = {}

    def __len__(self) -> int:
        return len(self._probs)

    def __contains__(self, key) -> bool:
        return key in self._probs

    def add(self, step: int, site: AttentionSite, probs: torch.Tensor):
        self.add_probs(step, site.layer_index, site.resolution, probs)

    def add_probs(self, step: int, layer: int, resolution: Resolution, probs: torch.Tensor):
        key = (step, layer)
        if key in self._probs:
            raise DuplicateEntry(f"cross-attention already recorded for step {step}, layer {layer}")
        if probs.dim() != 3 or probs.shape[1] != resolution[0] * resolution[1]:
            raise ShapeMismatch(
                f"cross-attention probs {tuple(probs.shape)} do not match resolution {resolution}"
            )
        if bool((probs < 0).any()):
            raise ShapeMismatch(f"negative cross-attention probability at step {step}, layer {layer}")
        self._probs[key] = probs.detach().clone()
        self._resolutions[layer] = tuple(resolution)

    def entries(self) -> List[Tuple[int, int, Resolution, torch.Tensor]]:
        return [(s, l, self._resolutions[l], self._probs[(s, l)]) for s, l in sorted(self._probs)]

    def steps(self) -> List[int]:
        return sorted({s for s, _ in self._probs})

    def layers_at(self, step: int) -> List[int]:
        return sorted(l for s, l in self._probs if s == step)

    def resolution(self, layer: int) -> Resolution:
        return self._resolutions[layer]

    def probs(self, step: int, layer: int) -> torch.Tensor:
        try:
            return self._probs[(step, layer)]
        except KeyError:
            raise MissingRecords(f"no cross-attention recorded for step {step}, layer {layer}") from None

    def map(self, step: int, layer: int, token: int) -> torch.Tensor:
        probs = self.probs(step, layer)
        if not 0 <= token < probs.shape[-1]:
            raise MissingRecords(f"token {token} outside the {probs.shape[-1]}-token prompt")
        return probs.mean(dim=0)[:, token]

    def map_count(self) -> int:
        """Number of word maps held: entries x tokens."""
        return sum(p.shape[-1] for p in self._probs.values())

    def token_map(self, step: int, token: int, resolution: Optional[Resolution] = None) -> torch.Tensor:
        """Mean word map of `token` over all layers at `resolution` (default: coarsest)."""
        layers = self.layers_at(step)
        if not layers:
            raise MissingRecords(f"no cross-attention recorded for step {step}")
        if resolution is None:
            resolution = canonical_resolution(self._resolutions[l] for l in layers)
        chosen = [l for l in layers if self._resolutions[l] == tuple(resolution)]
        if not chosen:
            raise MissingRecords(f"no cross-attention at resolution {resolution} for step {step}")
        return torch.stack([self.map(step, l, token) for l in chosen]).mean(dim=0)


# -------------------------
# Source mask
# -------------------------
@dataclass(frozen=True)
class SourceMask:
    full_res: torch.Tensor
    per_site: Dict[Resolution, torch.Tensor] = field(default_factory=dict)

    def for_site(self, site: AttentionSite) -> torch.Tensor:
        try:
            return self.per_site[tuple(site.resolution)]
        except KeyError:
            raise DimensionMismatch(f"source mask has no entry for resolution {site.resolution}") from None

    @classmethod
    def from_grid(cls, grid: torch.Tensor, sites: Iterable[AttentionSite]) -> "SourceMask":
        grid = (grid > 0).float()
        if not bool(grid.any()):
            raise EmptyMask("source mask has no active cell")
        full = tuple(grid.shape)
        pooled = {full: grid}
        resolutions = {tuple(site.resolution) for site in sites}
        for resolution in sorted(resolutions, key=lambda r: (-r[0] * r[1], r)):
            if resolution in pooled:
                continue
            if resolution[0] > full[0] or resolution[1] > full[1]:
                pooled[resolution] = resample_grid(grid, resolution)
                continue
            # coarser sites pool from the nearest finer site
            covering = [r for r in pooled if r[0] >= resolution[0] and r[1] >= resolution[1]
                        and r[0] <= full[0] and r[1] <= full[1]]
            parent = min(covering, key=lambda r: (r[0] * r[1], r))
            pooled[resolution] = any_coverage_pool(pooled[parent], resolution)
        per_site = {resolution: pooled[resolution].flatten() for resolution in resolutions}
        return cls(grid, per_site)

    @classmethod
    def all_active(cls, latent_resolution: Resolution, sites: Iterable[AttentionSite]) -> "SourceMask":
        return cls.from_grid(torch.ones(latent_resolution), sites)


def load_source_mask(mask_image, latent_resolution: Resolution, sites: Sequence[AttentionSite],
                     threshold: int = MASK_PIXEL_THRESHOLD) -> SourceMask:
    """Binarize a grayscale mask (pixel > threshold) and pool it to latent and site resolutions."""
    pixels = np.asarray(mask_image)
    if pixels.ndim != 2:
        raise DimensionMismatch(f"mask image must be single-channel, got shape {pixels.shape}")
    height, width = pixels.shape
    h, w = latent_resolution
    if height < h or width < w or height * w != width * h:
        raise DimensionMismatch(
            f"mask of {width}x{height} does not match the {w}x{h} latent aspect"
        )

    active = torch.from_numpy(pixels.astype(np.int64) > threshold)
    if not bool(active.any()):
        raise EmptyMask("no pixel above threshold in source mask")

    full = any_coverage_pool(active, latent_resolution)
    mask = SourceMask.from_grid(full, sites)
    logging.info("Source mask loaded: %d/%d latent cells active", int(full.sum()), h * w)
    return mask


# -------------------------
# Target mask
# -------------------------
@dataclass(frozen=True)
class TargetMask:
    per_site: Dict[Resolution, torch.Tensor]
    timestep: int
    grid: torch.Tensor

    def for_site(self, site: AttentionSite) -> torch.Tensor:
        try:
            return self.per_site[tuple(site.resolution)]
        except KeyError:
            raise DimensionMismatch(f"target mask has no entry for resolution {site.resolution}") from None

    def coverage(self) -> float:
        return float(self.grid.mean())

    @classmethod
    def from_grid(cls, grid: torch.Tensor, sites: Iterable[AttentionSite], timestep: int) -> "TargetMask":
        grid = grid.float().clamp(0.0, 1.0)
        per_site = {tuple(s.resolution): resample_grid(grid, s.resolution).flatten() for s in sites}
        return cls(per_site, timestep, grid)

    @classmethod
    def all_active(cls, sites: Sequence[AttentionSite], timestep: int) -> "TargetMask":
        canonical = canonical_resolution(s.resolution for s in sites)
        return cls.from_grid(torch.ones(canonical), sites, timestep)


def update_target_mask(records: CrossAttnRecord, edit_token: int, t: int, threshold: float,
                       sites: Sequence[AttentionSite], *, final_step: int,
                       soft: bool = False) -> TargetMask:
    """
    M_t for editing step t.

    Reads maps of the previous denoising step (t + 1); at t == final_step the
    caller passes the source-inversion record, whose last step seeds the mask.
    """
    read_step = t + 1 if t < final_step else final_step
    canonical = canonical_resolution(s.resolution for s in sites)
    values = normalize_map(records.token_map(read_step, edit_token, canonical))
    if not soft:
        values = binarize(values, threshold)
    return TargetMask.from_grid(values.reshape(canonical), sites, t)


# -------------------------
# Blend mask
# -------------------------
def compute_blend_mask(records: CrossAttnRecord, tokens: Iterable[int], t: int, threshold: float,
                       latent_resolution: Resolution) -> torch.Tensor:
    """Union of per-token normalized word maps at step t, binarized, upsampled to the latent grid."""
    tokens = list(tokens)
    if not tokens:
        raise MissingRecords("blend mask needs at least one token")
    layers = records.layers_at(t)
    if not layers:
        raise MissingRecords(f"no cross-attention recorded for step {t}")
    canonical = canonical_resolution(records.resolution(l) for l in layers)

    union = torch.stack([normalize_map(records.token_map(t, tok, canonical)) for tok in tokens]).amax(dim=0)
    grid = binarize(union, threshold).reshape(canonical)
    return resample_grid(grid, latent_resolution) > 0
