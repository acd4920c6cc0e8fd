# attention.py
"""
Attention kernels, the reference Key/Value cache and the attention
controllers the noise predictor calls at every attention site.

Tensors are laid out token-major: features [N, D] with D = heads * head_dim.
Masked attention and softmax work on head-split tensors [..., N, d], and the
1/sqrt(d) scale always uses the per-head dimension d.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Tuple

import torch
from einops import rearrange

from errors import (
    DuplicateEntry, EmptySourceMask, IncompleteCache, MissingEntry,
    NonBinaryMask, NonFiniteInput, ShapeMismatch,
)

if TYPE_CHECKING:
    from masks import CrossAttnRecord


# exp(NEG_INF_SENTINEL - rowmax) underflows to exactly 0.0 in float32, and the
# value stays finite so masked rows never produce inf - inf.
NEG_INF_SENTINEL = -1.0e30


# -------------------------
# Domain types
# -------------------------
@dataclass(frozen=True)
class AttentionSite:
    layer_index: int
    resolution: Tuple[int, int]
    head_count: int
    head_dim: int

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_count <= 0:
            raise ShapeMismatch(f"site {self.layer_index}: heads and head_dim must be positive")

    @property
    def tokens(self) -> int:
        return self.resolution[0] * self.resolution[1]

    @property
    def d_total(self) -> int:
        return self.head_count * self.head_dim


@dataclass(frozen=True)
class AttentionTensors:
    Q: torch.Tensor
    K: torch.Tensor
    V: torch.Tensor

    def __post_init__(self):
        if self.K.shape != self.V.shape:
            raise ShapeMismatch(f"K {tuple(self.K.shape)} vs V {tuple(self.V.shape)}")
        if self.Q.shape[-1] != self.K.shape[-1]:
            raise ShapeMismatch(f"Q width {self.Q.shape[-1]} vs K width {self.K.shape[-1]}")
        for name, tensor in (("Q", self.Q), ("K", self.K), ("V", self.V)):
            if not torch.isfinite(tensor).all():
                raise NonFiniteInput(f"{name} has non-finite entries")


class ReferenceFeatureCache:
    """
    Ref: self-attention K/V of the reference image, keyed by (step, layer).

    Written once during inversion, read-only afterwards.
    """

    def __init__(self, layer_sites: Iterable[AttentionSite]):
        self.layer_sites: List[AttentionSite] = sorted(layer_sites, key=lambda s: s.layer_index)
        self._sites_by_layer = {s.layer_index: s for s in self.layer_sites}
        self._entries: Dict[Tuple[int, int], Tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def keys(self) -> List[Tuple[int, int]]:
        return sorted(self._entries)

    def steps(self) -> List[int]:
        return sorted({t for t, _ in self._entries})

    def record_kv(self, t: int, site: AttentionSite, K: torch.Tensor, V: torch.Tensor) -> "ReferenceFeatureCache":
        key = (t, site.layer_index)
        if key in self._entries:
            raise DuplicateEntry(f"reference features already recorded for step {t}, layer {site.layer_index}")
        if K.shape[0] != V.shape[0]:
            raise ShapeMismatch(f"K has {K.shape[0]} rows, V has {V.shape[0]}")
        if site.layer_index not in self._sites_by_layer:
            self._sites_by_layer[site.layer_index] = site
            self.layer_sites = sorted(self._sites_by_layer.values(), key=lambda s: s.layer_index)
        self._entries[key] = (K.detach().clone(), V.detach().clone())
        return self

    def lookup_kv(self, t: int, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
        try:
            return self._entries[(t, layer)]
        except KeyError:
            raise MissingEntry(f"no reference features for step {t}, layer {layer}") from None

    def validate(self):
        """Every stored step must hold every self-attention layer."""
        if not self._entries:
            raise IncompleteCache("reference cache is empty")
        layers = {s.layer_index for s in self.layer_sites}
        for t in self.steps():
            present = {layer for step, layer in self._entries if step == t}
            if present != layers:
                missing = sorted(layers - present)
                raise IncompleteCache(f"step {t} is missing layers {missing}")


def record_kv(cache: ReferenceFeatureCache, t: int, site: AttentionSite,
              K: torch.Tensor, V: torch.Tensor) -> ReferenceFeatureCache:
    return cache.record_kv(t, site, K, V)


def lookup_kv(cache: ReferenceFeatureCache, t: int, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
    return cache.lookup_kv(t, layer)


# -------------------------
# Kernels
# -------------------------
def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return rearrange(x, "n (h d) -> h n d", h=heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "h n d -> n (h d)")


def to_neg_inf_mask(mask: torch.Tensor, sentinel: float = NEG_INF_SENTINEL) -> torch.Tensor:
    """Binary key mask -> additive logits: 1 -> 0.0, 0 -> sentinel."""
    mask = torch.as_tensor(mask)
    if not torch.all((mask == 0) | (mask == 1)):
        raise NonBinaryMask("source mask entries must be 0 or 1")
    zeros = torch.zeros(mask.shape, dtype=torch.float32)
    return torch.where(mask.bool(), zeros, torch.full_like(zeros, sentinel))


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over [..., Nq, d] x [..., Nkv, d]."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query dim {q.shape[-1]} vs key dim {k.shape[-1]}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return logits.softmax(dim=-1)


def mask_attn(q: torch.Tensor, k_ref: torch.Tensor, source_mask: torch.Tensor,
              sentinel: float = NEG_INF_SENTINEL) -> torch.Tensor:
    """softmax(q k_ref^T / sqrt(d) + M_s^inf); masked keys get weight 0."""
    source_mask = torch.as_tensor(source_mask)
    if q.shape[-1] != k_ref.shape[-1]:
        raise ShapeMismatch(f"query dim {q.shape[-1]} vs key dim {k_ref.shape[-1]}")
    if source_mask.dim() != 1 or source_mask.shape[0] != k_ref.shape[-2]:
        raise ShapeMismatch(
            f"source mask of shape {tuple(source_mask.shape)} does not cover {k_ref.shape[-2]} keys"
        )
    additive = to_neg_inf_mask(source_mask, sentinel)
    if not bool(source_mask.bool().any()):
        raise EmptySourceMask("source mask has no active key position")
    logits = q @ k_ref.transpose(-1, -2) / math.sqrt(q.shape[-1]) + additive.to(q.dtype)
    return logits.softmax(dim=-1)


def self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Plain multi-head attention; inputs and output are [N, D]."""
    qh, kh, vh = (split_heads(x, heads) for x in (q, k, v))
    return merge_heads(attention_weights(qh, kh) @ vh)


def sr_attn(edit: AttentionTensors, K_ref: torch.Tensor, V_ref: torch.Tensor,
            source_mask: torch.Tensor, target_mask: torch.Tensor, heads: int = 1,
            sentinel: float = NEG_INF_SENTINEL) -> torch.Tensor:
    """
    Specific reference attention:

        M_t * (mask_attn(Q~, K_ref, M_s) V_ref) + (1 - M_t) * (softmax(Q~ K~^T / sqrt(d)) V~)

    M_t is one scalar per query position, broadcast over channels.
    """
    target_mask = torch.as_tensor(target_mask, dtype=edit.Q.dtype)
    if target_mask.dim() != 1 or target_mask.shape[0] != edit.Q.shape[0]:
        raise ShapeMismatch(
            f"target mask of shape {tuple(target_mask.shape)} does not cover {edit.Q.shape[0]} queries"
        )
    if K_ref.shape != V_ref.shape or K_ref.shape[-1] != edit.Q.shape[-1]:
        raise ShapeMismatch(
            f"reference K {tuple(K_ref.shape)} / V {tuple(V_ref.shape)} vs query width {edit.Q.shape[-1]}"
        )

    qh = split_heads(edit.Q, heads)
    reference = merge_heads(mask_attn(qh, split_heads(K_ref, heads), source_mask, sentinel)
                            @ split_heads(V_ref, heads))
    plain = self_attention(edit.Q, edit.K, edit.V, heads)

    m = target_mask.unsqueeze(-1)
    return m * reference + (1.0 - m) * plain


# -------------------------
# Controllers (hooks called by the noise predictor)
# -------------------------
class AttentionControl:
    """
    Default controller: plain self-attention, cross-attention untouched.

    The caller sets the step key with begin_step(); the predictor then calls
    self_attention() and cross_attention() once per site in block order.
    """

    def __init__(self):
        self.cur_step: Optional[int] = None

    def begin_step(self, step: int):
        self.cur_step = step

    def self_attention(self, site: AttentionSite, q: torch.Tensor, k: torch.Tensor,
                       v: torch.Tensor) -> torch.Tensor:
        return self_attention(q, k, v, site.head_count)

    def cross_attention(self, site: AttentionSite, probs: torch.Tensor) -> torch.Tensor:
        return probs


class AttentionRecorder(AttentionControl):
    """Records self-attention K/V into a cache and/or cross-attention maps into a record."""

    def __init__(self, kv_cache: Optional[ReferenceFeatureCache] = None,
                 cross_record: Optional["CrossAttnRecord"] = None):
        super().__init__()
        self.kv_cache = kv_cache
        self.cross_record = cross_record

    def self_attention(self, site, q, k, v):
        if self.kv_cache is not None:
            self.kv_cache.record_kv(self.cur_step, site, k, v)
        return super().self_attention(site, q, k, v)

    def cross_attention(self, site, probs):
        if self.cross_record is not None:
            self.cross_record.add(self.cur_step, site, probs)
        return probs
