# backend.py
"""
Deterministic desk-scale stand-in for a latent-diffusion noise predictor,
its text encoder and its image codec.

Every weight is drawn from a torch.Generator seeded by BackendConfig.seed,
so two backends built from the same config are bit-identical.

Block order inside every transformer block:
    self-attention (delegated to the attention controller)
    -> cross-attention onto the prompt (probabilities shown to the controller)
    -> pointwise feedforward
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from attention import AttentionControl, AttentionSite, merge_heads, split_heads
from errors import DimensionMismatch, ShapeMismatch
from scheduler import LatentState

PAD_TOKEN = 0


# -------------------------
# Configuration & shared types
# -------------------------
@dataclass(frozen=True)
class BackendConfig:
    seed: int
    channels: int = 4
    latent_size: Tuple[int, int] = (16, 16)
    patch_size: int = 4
    block_resolutions: Tuple[Tuple[int, int], ...] = ((16, 16), (8, 8), (8, 8), (16, 16))
    heads: int = 2
    head_dim: int = 8
    text_dim: int = 32
    seq_len: int = 8
    output_gain: float = 1.0

    def __post_init__(self):
        if self.channels < 3:
            raise ShapeMismatch("the RGB codec needs at least 3 latent channels")
        if self.heads * self.head_dim % 2:
            raise ShapeMismatch("heads * head_dim must be even for the timestep embedding")
        if not self.block_resolutions:
            raise ShapeMismatch("backend needs at least one block")

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return (self.channels, *self.latent_size)

    @property
    def image_size(self) -> Tuple[int, int]:
        return (self.latent_size[0] * self.patch_size, self.latent_size[1] * self.patch_size)

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def layer_count(self) -> int:
        return len(self.block_resolutions)


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tuple[int, ...]
    vectors: torch.Tensor
    words: Tuple[str, ...] = field(default=())

    @property
    def seq_len(self) -> int:
        return len(self.tokens)


class NoisePredictor(Protocol):
    """
    Contract every noise predictor satisfies, including adapters for real
    pretrained latent-diffusion models.

    sites lists the self-attention sites in the order the predictor visits
    them; calling the predictor with a controller must route every
    self-attention through control.self_attention and every cross-attention
    probability tensor through control.cross_attention.
    """

    sites: List[AttentionSite]

    def __call__(self, latent: torch.Tensor, embedding: TextEmbedding, timestep: int,
                 control: Optional[AttentionControl] = None) -> torch.Tensor: ...


def token_id(word: str) -> int:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    # 0 is reserved for padding
    return int.from_bytes(digest[:4], "little") % (2 ** 31 - 1) + 1


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


def resample_features(h: torch.Tensor, src: Tuple[int, int], dst: Tuple[int, int]) -> torch.Tensor:
    """[N, D] features on grid src -> grid dst (mean pooling down, nearest up)."""
    if tuple(src) == tuple(dst):
        return h
    grid = h.T.reshape(1, h.shape[1], *src)
    if dst[0] * dst[1] < src[0] * src[1]:
        grid = F.adaptive_avg_pool2d(grid, dst)
    else:
        grid = F.interpolate(grid, size=tuple(dst), mode="nearest")
    return grid.reshape(h.shape[1], -1).T


# -------------------------
# Backend
# -------------------------
@dataclass
class _Block:
    site: AttentionSite
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    w_qc: torch.Tensor
    w_kc: torch.Tensor
    w_vc: torch.Tensor
    w_oc: torch.Tensor
    w_ff1: torch.Tensor
    w_ff2: torch.Tensor


class ToyBackend:
    def __init__(self, config: BackendConfig):
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        D = config.model_dim

        def weight(fan_in: int, fan_out: int) -> torch.Tensor:
            return torch.randn(fan_in, fan_out, generator=gen, dtype=torch.float32) / math.sqrt(fan_in)

        # encoder: orthonormal 3 -> C channel mixing
        mixing = torch.randn(config.channels, 3, generator=gen, dtype=torch.float64)
        self.mixing = torch.linalg.qr(mixing).Q.to(torch.float32)

        self.w_in = weight(config.channels, D)
        self.w_time = weight(D, D)
        self.blocks: List[_Block] = []
        for index, resolution in enumerate(config.block_resolutions, start=1):
            site = AttentionSite(index, tuple(resolution), config.heads, config.head_dim)
            self.blocks.append(_Block(
                site=site,
                w_q=weight(D, D), w_k=weight(D, D), w_v=weight(D, D), w_o=weight(D, D),
                w_qc=weight(D, D), w_kc=weight(config.text_dim, D),
                w_vc=weight(config.text_dim, D), w_oc=weight(D, D),
                w_ff1=weight(D, 2 * D), w_ff2=weight(2 * D, D),
            ))
        self.w_out = weight(D, config.channels) * config.output_gain

        logging.info(
            "Toy backend ready: seed=%d, %d blocks, heads=%d, head_dim=%d",
            config.seed, len(self.blocks), config.heads, config.head_dim,
        )

    @property
    def sites(self) -> List[AttentionSite]:
        return [b.site for b in self.blocks]

    # -------------------------
    # text
    # -------------------------
    def embed_text(self, prompt: str) -> TextEmbedding:
        words = tuple(prompt.split())[: self.config.seq_len]
        tokens = [token_id(w) for w in words]
        tokens += [PAD_TOKEN] * (self.config.seq_len - len(tokens))
        rows = []
        for tok in tokens:
            gen = torch.Generator().manual_seed((self.config.seed * 1_000_003 + tok) % (2 ** 63))
            rows.append(torch.randn(self.config.text_dim, generator=gen, dtype=torch.float32))
        return TextEmbedding(tuple(tokens), torch.stack(rows), words)

    # -------------------------
    # image codec
    # -------------------------
    def encode_image(self, image) -> LatentState:
        pixels = np.asarray(image)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DimensionMismatch(f"expected an RGB image [H, W, 3], got {pixels.shape}")
        if tuple(pixels.shape[:2]) != self.config.image_size:
            raise DimensionMismatch(
                f"image is {pixels.shape[1]}x{pixels.shape[0]}, backend expects "
                f"{self.config.image_size[1]}x{self.config.image_size[0]}"
            )
        rgb = torch.from_numpy(pixels.astype(np.float32)).permute(2, 0, 1) / 127.5 - 1.0
        pooled = F.avg_pool2d(rgb[None], self.config.patch_size)[0]
        latent = torch.einsum("ck,khw->chw", self.mixing, pooled)
        return LatentState(latent.contiguous(), 0)

    def decode_latent(self, latent: LatentState) -> np.ndarray:
        rgb = torch.einsum("ck,chw->khw", self.mixing, latent.data)
        rgb = rgb.repeat_interleave(self.config.patch_size, dim=1)
        rgb = rgb.repeat_interleave(self.config.patch_size, dim=2)
        pixels = torch.round((rgb + 1.0) * 127.5).clamp(0, 255)
        return pixels.permute(1, 2, 0).to(torch.uint8).numpy()

    # -------------------------
    # noise prediction
    # -------------------------
    def predict_noise(self, latent: torch.Tensor, embedding: TextEmbedding, timestep: int,
                      control: Optional[AttentionControl] = None) -> torch.Tensor:
        if tuple(latent.shape) != self.config.latent_shape:
            raise ShapeMismatch(f"latent {tuple(latent.shape)} vs backend {self.config.latent_shape}")
        if control is None:
            control = AttentionControl()

        heads = self.config.heads
        C, H, W = latent.shape
        h = latent.reshape(C, H * W).T @ self.w_in + timestep_embedding(timestep, self.config.model_dim) @ self.w_time
        grid = (H, W)

        for block in self.blocks:
            h = resample_features(h, grid, block.site.resolution)
            grid = block.site.resolution

            q, k, v = h @ block.w_q, h @ block.w_k, h @ block.w_v
            h = h + control.self_attention(block.site, q, k, v) @ block.w_o

            qc = split_heads(h @ block.w_qc, heads)
            kc = split_heads(embedding.vectors @ block.w_kc, heads)
            vc = split_heads(embedding.vectors @ block.w_vc, heads)
            probs = (qc @ kc.transpose(-1, -2) / math.sqrt(self.config.head_dim)).softmax(dim=-1)
            probs = control.cross_attention(block.site, probs)
            h = h + merge_heads(probs @ vc) @ block.w_oc

            h = h + torch.tanh(h @ block.w_ff1) @ block.w_ff2

        h = resample_features(h, grid, (H, W))
        return (h @ self.w_out).T.reshape(C, H, W).contiguous()

    __call__ = predict_noise
