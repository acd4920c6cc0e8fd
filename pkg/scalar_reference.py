# scalar_reference.py
"""
Plain-Python loop implementations used as oracles by the selftest and the
test suite. Nothing here shares code with the vectorized pipeline except
the backend's weight tensors, which are read once and turned into lists.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import torch

from attention import NEG_INF_SENTINEL

Matrix = List[List[float]]


# -------------------------
# small list helpers
# -------------------------
def to_lists(tensor: torch.Tensor):
    return tensor.detach().double().tolist()


def matmul(a: Matrix, b: Matrix) -> Matrix:
    inner = len(b)
    cols = len(b[0])
    return [[sum(row[k] * b[k][j] for k in range(inner)) for j in range(cols)] for row in a]


def add(a: Matrix, b: Matrix) -> Matrix:
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def softmax(row: Sequence[float]) -> List[float]:
    top = max(row)
    exps = [math.exp(x - top) for x in row]
    total = sum(exps)
    return [e / total for e in exps]


# -------------------------
# schedule & DDIM
# -------------------------
def loop_schedule(train_steps: int, sample_steps: int, beta_min: float, beta_max: float) -> List[float]:
    if train_steps == 1:
        betas = [beta_min]
    else:
        betas = [beta_min + (beta_max - beta_min) * i / (train_steps - 1) for i in range(train_steps)]
    cumulative, running = [], 1.0
    for beta in betas:
        running *= 1.0 - beta
        cumulative.append(running)
    return [1.0] + [cumulative[(t * train_steps) // sample_steps - 1] for t in range(1, sample_steps + 1)]


def loop_ddim(z, eps, a_from: float, a_to: float):
    """Textbook DDIM move from alpha_bar a_from to a_to via the predicted clean latent."""
    if isinstance(z, list):
        return [loop_ddim(zi, ei, a_from, a_to) for zi, ei in zip(z, eps)]
    x0 = (z - math.sqrt(1.0 - a_from) * eps) / math.sqrt(a_from)
    return math.sqrt(a_to) * x0 + math.sqrt(1.0 - a_to) * eps


# -------------------------
# attention
# -------------------------
def loop_mask_attention(q: Matrix, k: Matrix, mask: Sequence[float],
                        sentinel: float = NEG_INF_SENTINEL) -> Matrix:
    """Weights [Nq][Nkv] of softmax(q k^T / sqrt(d) + additive mask), one element at a time."""
    d = len(q[0])
    weights = []
    for qi in q:
        logits = []
        for j, kj in enumerate(k):
            dot = 0.0
            for c in range(d):
                dot += qi[c] * kj[c]
            logits.append(dot / math.sqrt(d) + (0.0 if mask[j] else sentinel))
        weights.append(softmax(logits))
    return weights


def loop_blend(z_edit, z_recon, mask: Sequence[Sequence[float]]):
    """[C][H][W] nested lists; mask [H][W]."""
    return [
        [[z_edit[c][i][j] if mask[i][j] else z_recon[c][i][j] for j in range(len(mask[0]))]
         for i in range(len(mask))]
        for c in range(len(z_edit))
    ]


def loop_timestep_embedding(t: int, dim: int) -> List[float]:
    half = dim // 2
    freqs = [math.exp(-math.log(10000.0) * i / half) for i in range(half)]
    return [math.sin(t * f) for f in freqs] + [math.cos(t * f) for f in freqs]


# -------------------------
# toy forward pass
# -------------------------
@dataclass
class ScalarSR:
    """SR-attn inputs for one step: reference K/V and flattened masks per layer."""

    kv: Dict[int, Tuple[Matrix, Matrix]]
    gated_layers: Set[int]
    source_mask: Dict[int, List[float]]
    target_mask: Dict[int, List[float]]
    sentinel: float = NEG_INF_SENTINEL


@dataclass
class ScalarToyModel:
    """The toy backend's forward pass, evaluated with Python floats."""

    heads: int
    head_dim: int
    resolutions: List[Tuple[int, int]]
    weights: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_backend(cls, backend) -> "ScalarToyModel":
        blocks = []
        for block in backend.blocks:
            blocks.append({name: to_lists(getattr(block, name)) for name in (
                "w_q", "w_k", "w_v", "w_o", "w_qc", "w_kc", "w_vc", "w_oc", "w_ff1", "w_ff2")})
        weights = {
            "w_in": to_lists(backend.w_in),
            "w_time": to_lists(backend.w_time),
            "w_out": to_lists(backend.w_out),
            "blocks": blocks,
        }
        resolutions = [tuple(s.resolution) for s in backend.sites]
        return cls(backend.config.heads, backend.config.head_dim, resolutions, weights)

    def _heads_slice(self, row: List[float], head: int) -> List[float]:
        return row[head * self.head_dim:(head + 1) * self.head_dim]

    def _self_attention(self, q: Matrix, k: Matrix, v: Matrix, layer: int, sr: Optional[ScalarSR]) -> Matrix:
        n = len(q)
        out = [[0.0] * (self.heads * self.head_dim) for _ in range(n)]
        gated = sr is not None and layer in sr.gated_layers
        for head in range(self.heads):
            qh = [self._heads_slice(r, head) for r in q]
            kh = [self._heads_slice(r, head) for r in k]
            vh = [self._heads_slice(r, head) for r in v]
            plain = loop_mask_attention(qh, kh, [1.0] * len(kh))
            if gated:
                K_ref, V_ref = sr.kv[layer]
                kr = [self._heads_slice(r, head) for r in K_ref]
                vr = [self._heads_slice(r, head) for r in V_ref]
                ref_w = loop_mask_attention(qh, kr, sr.source_mask[layer], sr.sentinel)
            for i in range(n):
                for e in range(self.head_dim):
                    value = sum(plain[i][j] * vh[j][e] for j in range(len(vh)))
                    if gated:
                        m = sr.target_mask[layer][i]
                        ref_value = sum(ref_w[i][j] * vr[j][e] for j in range(len(vr)))
                        value = m * ref_value + (1.0 - m) * value
                    out[i][head * self.head_dim + e] = value
        return out

    def forward(self, latent, vectors: Matrix, t: int, *, record_kv: Optional[dict] = None,
                sr: Optional[ScalarSR] = None, cross_probs: Optional[dict] = None):
        """latent is [C][H][W]; returns the noise estimate in the same layout."""
        C, H, W = len(latent), len(latent[0]), len(latent[0][0])
        N = H * W
        w = self.weights
        x = [[latent[c][n // W][n % W] for c in range(C)] for n in range(N)]
        tproj = matmul([loop_timestep_embedding(t, self.heads * self.head_dim)], w["w_time"])[0]
        h = [[v + tproj[j] for j, v in enumerate(row)] for row in matmul(x, w["w_in"])]

        for layer, (block, resolution) in enumerate(zip(w["blocks"], self.resolutions), start=1):
            if tuple(resolution) != (H, W):
                raise ValueError("scalar model only covers blocks at the latent resolution")
            q, k, v = matmul(h, block["w_q"]), matmul(h, block["w_k"]), matmul(h, block["w_v"])
            if record_kv is not None:
                record_kv[layer] = (k, v)
            h = add(h, matmul(self._self_attention(q, k, v, layer, sr), block["w_o"]))

            qc = matmul(h, block["w_qc"])
            kc = matmul(vectors, block["w_kc"])
            vc = matmul(vectors, block["w_vc"])
            probs = []
            merged = [[0.0] * (self.heads * self.head_dim) for _ in range(N)]
            for head in range(self.heads):
                ph = loop_mask_attention([self._heads_slice(r, head) for r in qc],
                                         [self._heads_slice(r, head) for r in kc],
                                         [1.0] * len(kc))
                probs.append(ph)
                for i in range(N):
                    for e in range(self.head_dim):
                        merged[i][head * self.head_dim + e] = sum(
                            ph[i][s] * vc[s][head * self.head_dim + e] for s in range(len(vc)))
            if cross_probs is not None:
                cross_probs[layer] = probs
            h = add(h, matmul(merged, block["w_oc"]))

            ff = [[math.tanh(value) for value in row] for row in matmul(h, block["w_ff1"])]
            h = add(h, matmul(ff, block["w_ff2"]))

        out = matmul(h, w["w_out"])
        return [[[out[i * W + j][c] for j in range(W)] for i in range(H)] for c in range(C)]


# -------------------------
# whole pipeline
# -------------------------
def _flatten(grid: Sequence[Sequence[float]]) -> List[float]:
    return [float(v) for row in grid for v in row]


def loop_pipeline(model: ScalarToyModel, alphas: Sequence[float], source_latent, reference_latent,
                  source_vectors: Matrix, reference_vectors: Matrix, target_vectors: Matrix,
                  step_range: Tuple[int, int], layer_range: Tuple[int, int],
                  source_grid, target_grid, blend_grid) -> Tuple[Dict[int, list], Dict[int, list]]:
    """
    Source inversion, reference K/V extraction and the editing loop with
    fixed masks. Returns (source latents by t, edited latents by t).
    """
    T = len(alphas) - 1
    layers = list(range(1, len(model.resolutions) + 1))

    source = {0: source_latent}
    for t in range(1, T + 1):
        eps = model.forward(source[t - 1], source_vectors, t - 1)
        source[t] = loop_ddim(source[t - 1], eps, alphas[t - 1], alphas[t])

    reference_kv = {}
    z = reference_latent
    for t in range(1, T + 1):
        recorded = {}
        eps = model.forward(z, reference_vectors, t - 1, record_kv=recorded)
        reference_kv[t] = recorded
        z = loop_ddim(z, eps, alphas[t - 1], alphas[t])

    source_flat = _flatten(source_grid)
    target_flat = _flatten(target_grid)
    edited = {T: source[T]}
    z = source[T]
    for t in range(T, 0, -1):
        gated = {l for l in layers
                 if step_range[1] <= t <= step_range[0] and layer_range[0] <= l <= layer_range[1]}
        sr = ScalarSR(reference_kv[t], gated,
                      {l: source_flat for l in layers}, {l: target_flat for l in layers})
        eps = model.forward(z, target_vectors, t, sr=sr)
        z = loop_blend(loop_ddim(z, eps, alphas[t], alphas[t - 1]), source[t - 1], blend_grid)
        edited[t - 1] = z
    return source, edited
