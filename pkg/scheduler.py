# scheduler.py
"""
Noise schedule and the deterministic DDIM inversion / sampling steps.

Both steps are written as an affine combination of the latent and the noise
estimate, with scalar coefficients evaluated in double precision:

    invert_step:  z_t     = r * z_{t-1} + (sqrt(1 - a_t)     - r * sqrt(1 - a_{t-1})) * eps,   r = sqrt(a_t / a_{t-1})
    prev_step:    z_{t-1} = r * z_t     + (sqrt(1 - a_{t-1}) - r * sqrt(1 - a_t))     * eps,   r = sqrt(a_{t-1} / a_t)

which is algebraically the textbook form and makes the equal-coefficient and
zero-noise cases exact in floating point.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch

from errors import (
    InvalidScheduleConfig, InvalidTimestep, MissingTrajectoryEntry,
    NonFiniteInput, ShapeMismatch,
)


# -------------------------
# Domain types
# -------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bars: Tuple[float, ...]
    train_steps: int
    beta_range: Tuple[float, float]

    def __post_init__(self):
        if len(self.alpha_bars) < 2:
            raise InvalidScheduleConfig("a schedule needs at least one sampling step")
        if self.alpha_bars[0] != 1.0:
            raise InvalidScheduleConfig("alpha_bar at t=0 must be exactly 1.0")
        for a in self.alpha_bars:
            if not (0.0 < a <= 1.0):
                raise InvalidScheduleConfig(f"alpha_bar {a} outside (0, 1]")
        for prev, cur in zip(self.alpha_bars, self.alpha_bars[1:]):
            if not cur < prev:
                raise InvalidScheduleConfig("alpha_bars must be strictly decreasing")

    @property
    def sample_steps(self) -> int:
        return len(self.alpha_bars) - 1

    def alpha(self, t: int) -> float:
        return self.alpha_bars[t]


@dataclass(frozen=True)
class LatentState:
    data: torch.Tensor
    timestep: int

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class LatentTrajectory:
    states: Tuple[LatentState, ...]

    def __post_init__(self):
        for expected, state in enumerate(self.states):
            if state.timestep != expected:
                raise ShapeMismatch(
                    f"trajectory timesteps must be 0..T without gaps; "
                    f"position {expected} holds t={state.timestep}"
                )
        shapes = {tuple(s.shape) for s in self.states}
        if len(shapes) > 1:
            raise ShapeMismatch(f"latent shape changes within trajectory: {sorted(shapes)}")

    @property
    def final_step(self) -> int:
        return len(self.states) - 1

    def latent(self, t: int) -> LatentState:
        if not 0 <= t < len(self.states):
            raise MissingTrajectoryEntry(f"trajectory has no latent for t={t} (T={self.final_step})")
        return self.states[t]

    def stack(self) -> torch.Tensor:
        """All latents as one [T+1, C, H, W] tensor."""
        return torch.stack([s.data for s in self.states])

    @classmethod
    def from_stack(cls, stacked: torch.Tensor) -> "LatentTrajectory":
        if stacked.dim() != 4 or stacked.shape[0] < 2:
            raise ShapeMismatch(f"expected [T+1, C, H, W] with T >= 1, got {tuple(stacked.shape)}")
        return cls(tuple(LatentState(stacked[t].clone(), t) for t in range(stacked.shape[0])))


# -------------------------
# Schedule construction
# -------------------------
def train_index(t: int, train_steps: int, sample_steps: int) -> int:
    """Training-schedule index sampled for step t (t >= 1)."""
    return (t * train_steps) // sample_steps - 1


def build_schedule(train_steps: int, sample_steps: int,
                   beta_range: Tuple[float, float]) -> NoiseSchedule:
    """Linear beta ramp over train_steps, cumulative product, uniform subsampling."""
    beta_min, beta_max = beta_range
    if not (isinstance(train_steps, int) and isinstance(sample_steps, int)):
        raise InvalidScheduleConfig("train_steps and sample_steps must be integers")
    if not train_steps >= sample_steps >= 1:
        raise InvalidScheduleConfig(
            f"need train_steps >= sample_steps >= 1, got {train_steps}, {sample_steps}"
        )
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidScheduleConfig(f"need 0 < beta_min <= beta_max < 1, got {beta_range}")

    betas = torch.linspace(beta_min, beta_max, train_steps, dtype=torch.float64)
    cumulative = torch.cumprod(1.0 - betas, dim=0).tolist()

    alpha_bars = [1.0]
    for t in range(1, sample_steps + 1):
        alpha_bars.append(cumulative[train_index(t, train_steps, sample_steps)])
    if alpha_bars[-1] <= 0.0:
        raise InvalidScheduleConfig(
            f"beta range {beta_range} drives alpha_bar to zero within {train_steps} training steps"
        )
    if any(not cur < prev for prev, cur in zip(alpha_bars, alpha_bars[1:])):
        raise InvalidScheduleConfig(
            f"beta range {beta_range} is too small to change alpha_bar at float64 precision"
        )

    schedule = NoiseSchedule(tuple(alpha_bars), train_steps, (float(beta_min), float(beta_max)))
    logging.debug("Schedule built: T=%d alpha_T=%.6g", sample_steps, schedule.alpha_bars[-1])
    return schedule


# -------------------------
# Steps
# -------------------------
def _check_step_inputs(z: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.sample_steps:
        raise InvalidTimestep(f"t={t} outside 1..{schedule.sample_steps}")
    if z.shape != eps.shape:
        raise ShapeMismatch(f"latent {tuple(z.shape)} vs noise {tuple(eps.shape)}")
    if not (torch.isfinite(z).all() and torch.isfinite(eps).all()):
        raise NonFiniteInput(f"non-finite latent or noise at t={t}")


def _affine_step(z: torch.Tensor, eps: torch.Tensor, a_from: float, a_to: float) -> torch.Tensor:
    ratio = math.sqrt(a_to / a_from)
    noise_coef = math.sqrt(1.0 - a_to) - ratio * math.sqrt(1.0 - a_from)
    return ratio * z + noise_coef * eps


def invert_step(z_prev: LatentState, eps: torch.Tensor, schedule: NoiseSchedule, t: int) -> LatentState:
    """z_{t-1} -> z_t using the noise estimated at (z_{t-1}, t-1)."""
    _check_step_inputs(z_prev.data, eps, schedule, t)
    data = _affine_step(z_prev.data, eps, schedule.alpha(t - 1), schedule.alpha(t))
    return LatentState(data, t)


def prev_step(z_t: LatentState, eps: torch.Tensor, schedule: NoiseSchedule, t: int) -> LatentState:
    """z_t -> z_{t-1}, the deterministic (eta = 0) DDIM update."""
    _check_step_inputs(z_t.data, eps, schedule, t)
    data = _affine_step(z_t.data, eps, schedule.alpha(t), schedule.alpha(t - 1))
    return LatentState(data, t - 1)


# -------------------------
# Trajectory
# -------------------------
NoiseFn = Callable[..., torch.Tensor]


def invert_trajectory(z0: LatentState, predictor: NoiseFn, embedding, schedule: NoiseSchedule,
                      recorder=None) -> LatentTrajectory:
    """
    DDIM inversion of z0 through t = 1..T.

    The predictor is called as predictor(latent, embedding, timestep, control).
    When a recorder (attention controller) is attached it is told the step key
    t before each evaluation, so whatever it records lands under key t.
    """
    if z0.timestep != 0:
        raise InvalidTimestep(f"inversion starts from t=0, got t={z0.timestep}")

    states: List[LatentState] = [z0]
    for t in range(1, schedule.sample_steps + 1):
        current = states[-1]
        if recorder is not None:
            recorder.begin_step(t)
        eps = predictor(current.data, embedding, t - 1, recorder)
        states.append(invert_step(current, eps, schedule, t))

    logging.debug("Inverted latent over %d steps", schedule.sample_steps)
    return LatentTrajectory(tuple(states))


def guided_noise(predictor: NoiseFn, latent: torch.Tensor, embedding, timestep: int, control,
                 guidance_scale: float = 1.0, uncond_embedding=None) -> torch.Tensor:
    """
    Conditional noise estimate, optionally with classifier-free guidance.

    guidance_scale == 1 is a single conditional evaluation. Otherwise the
    unconditional pass runs with plain attention (control=None).
    """
    eps = predictor(latent, embedding, timestep, control)
    if guidance_scale == 1.0:
        return eps
    if uncond_embedding is None:
        raise ValueError("guidance needs an unconditional embedding")
    eps_uncond = predictor(latent, uncond_embedding, timestep, None)
    return eps_uncond + guidance_scale * (eps - eps_uncond)
