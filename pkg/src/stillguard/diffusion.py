"""Noise schedules, forward noising, and deterministic DDIM sampling/inversion.

All operations are pure functions of their inputs; every downstream
attack and purifier shares this module's timestep conventions:

- ``alpha_bar`` is indexed 0..T with ``alpha_bar[0] == 1`` exactly, so
  t=0 is the identity (no noise) and t=T is (nearly) pure noise.
- DDIM is the deterministic eta=0 variant. The same closed-form
  transport serves sampling (t decreasing) and inversion (t increasing).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch

from .config import ParameterError


class ShapeError(ValueError):
    """Raised when tensor geometry does not match the declared contract."""


class InversionError(RuntimeError):
    """DDIM inversion produced a non-finite latent."""


@dataclass(frozen=True)
class Conditioning:
    """Inputs steering the denoiser: reference-portrait latent + audio amplitude.

    ``ref_latent`` is (C, h, w) or batched (B, C, h, w); ``audio`` is a
    scalar amplitude in [0, 1] or a (B,) tensor matching the batch.
    """

    ref_latent: torch.Tensor
    audio: torch.Tensor | float


class DenoiserModel(Protocol):
    """Noise-prediction interface every attack/purifier calls.

    Implementations must be deterministic given identical inputs and
    return a tensor with the same shape as ``z``.
    """

    def predict_eps(
        self, z: torch.Tensor, t: torch.Tensor | int, cond: Conditioning
    ) -> torch.Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM table: beta[t] for t=1..T, alpha_bar[t] for t=0..T."""

    T: int
    beta: torch.Tensor  # (T,) float64
    alpha_bar: torch.Tensor  # (T+1,) float64, alpha_bar[0] == 1

    def __post_init__(self) -> None:
        if self.beta.shape != (self.T,):
            raise ParameterError(f"beta must have shape ({self.T},)")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ParameterError(f"alpha_bar must have shape ({self.T + 1},)")
        if self.alpha_bar[0].item() != 1.0:
            raise ParameterError("alpha_bar[0] must be exactly 1")
        if not torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1]):
            raise ParameterError("alpha_bar must be strictly decreasing")
        if not (torch.all(self.alpha_bar > 0) and torch.all(self.alpha_bar <= 1)):
            raise ParameterError("alpha_bar entries must lie in (0, 1]")

    def abar(self, t: torch.Tensor | int, dtype: torch.dtype) -> torch.Tensor:
        """alpha_bar[t] cast for arithmetic with latents of ``dtype``."""
        if isinstance(t, int):
            return self.alpha_bar[t].to(dtype)
        return self.alpha_bar.to(dtype)[t]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.empty(T + 1, dtype=torch.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = torch.cumprod(1.0 - beta, dim=0)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or (B,) coefficient over latent dims."""
    if coef.dim() == 0:
        return coef
    return coef.view(-1, *([1] * (like.dim() - 1)))


def add_noise(
    z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward process: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    ``t`` may be an int applied to the whole batch or a (B,) tensor of
    per-sample timesteps in [0, T].
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_min = int(t) if isinstance(t, int) else int(t.min())
    t_max = int(t) if isinstance(t, int) else int(t.max())
    if t_min < 0 or t_max > sched.T:
        raise ParameterError(f"t must lie in [0, {sched.T}]")
    ab = sched.abar(t, z0.dtype)
    a = _expand(torch.sqrt(ab), z0)
    b = _expand(torch.sqrt(1.0 - ab), z0)
    return a * z0 + b * eps


def _ddim_transport(
    z: torch.Tensor, eps_pred: torch.Tensor, t_from: int, t_to: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form DDIM move between arbitrary timesteps (either direction).

    Recovers x0_hat under the schedule at t_from, then re-noises it
    deterministically to t_to with the same predicted eps.
    """
    ab_from = sched.abar(t_from, z.dtype)
    ab_to = sched.abar(t_to, z.dtype)
    x0_hat = (z - torch.sqrt(1.0 - ab_from) * eps_pred) / torch.sqrt(ab_from)
    return torch.sqrt(ab_to) * x0_hat + torch.sqrt(1.0 - ab_to) * eps_pred


def ddim_step(
    z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """One deterministic denoising hop t -> t_prev (t_prev < t)."""
    if eps_pred.shape != z_t.shape:
        raise ShapeError("eps_pred shape must equal z_t shape")
    if not (0 <= t_prev < t <= sched.T):
        raise ParameterError(f"need 0 <= t_prev < t <= T, got t_prev={t_prev} t={t}")
    return _ddim_transport(z_t, eps_pred, t, t_prev, sched)


def timestep_ladder(T: int, steps: int) -> list[int]:
    """Uniformly spaced rungs 0 = tau_0 < tau_1 < ... < tau_steps = T."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if steps > T:
        raise ParameterError(f"steps={steps} exceeds schedule T={T}")
    return [round(k * T / steps) for k in range(steps + 1)]


def ddim_sample(
    model: DenoiserModel,
    z_T: torch.Tensor,
    cond: Conditioning,
    steps: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic sampling from t=T down the uniform ladder to t=0."""
    ladder = timestep_ladder(sched.T, steps)
    z = z_T
    for k in range(steps, 0, -1):
        t, t_prev = ladder[k], ladder[k - 1]
        eps = model.predict_eps(z, t, cond)
        z = _ddim_transport(z, eps, t, t_prev, sched)
    return z


def ddim_invert_latent(
    z0: torch.Tensor,
    model: DenoiserModel,
    cond: Conditioning,
    steps: int,
    sched: NoiseSchedule,
) -> list[torch.Tensor]:
    """Run the DDIM ladder in reverse from a clean latent, recording each rung.

    Naive approximation: eps is predicted at the current latent with the
    hop's target timestep, which pairs with the corresponding downward
    step when the per-hop drift is small. Returns steps+1 latents from
    z0 (t=0) to the fully inverted latent (t=T).
    """
    ladder = timestep_ladder(sched.T, steps)
    traj = [z0]
    z = z0
    for k in range(steps):
        t_from, t_to = ladder[k], ladder[k + 1]
        eps = model.predict_eps(z, t_to, cond)
        z = _ddim_transport(z, eps, t_from, t_to, sched)
        if not torch.isfinite(z).all():
            raise InversionError(f"inversion produced non-finite latent at t={t_to}")
        traj.append(z)
    return traj


@dataclass
class LatentTrajectory:
    """Latents recorded along a DDIM inversion, deepest last.

    ``latents[k]`` sits at diffusion time ``timesteps[k]``; entry 0 is
    the encoded image and the final entry is the fully inverted latent.
    """

    latents: list[torch.Tensor]
    timesteps: list[int]

    def __post_init__(self) -> None:
        if len(self.latents) != len(self.timesteps):
            raise ParameterError("trajectory latents and timesteps must align")

    def __len__(self) -> int:
        return len(self.latents)


def gaussian_latent(
    shape: tuple[int, ...], gen: torch.Generator, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=dtype)


def uniform_timesteps(
    n: int, t_range: tuple[int, int], gen: torch.Generator
) -> torch.Tensor:
    """n integer timesteps uniform over the half-open window [lo, hi)."""
    lo, hi = t_range
    if not (0 <= lo < hi):
        raise ParameterError(f"bad timestep window [{lo}, {hi})")
    return torch.randint(lo, hi, (n,), generator=gen)


__all__ = [
    "Conditioning",
    "DenoiserModel",
    "InversionError",
    "LatentTrajectory",
    "NoiseSchedule",
    "ShapeError",
    "add_noise",
    "ddim_invert_latent",
    "ddim_sample",
    "ddim_step",
    "gaussian_latent",
    "make_schedule",
    "timestep_ladder",
    "uniform_timesteps",
]
