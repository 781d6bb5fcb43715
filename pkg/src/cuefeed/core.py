"""Noise schedule, forward noising, and clean-sample reconstruction.

Conventions used throughout the package:

* latents and images are ``torch.Tensor`` of shape (C, H, W), float;
  images live in [0, 1], latents are unconstrained
* timesteps are integers ``0 <= t < num_steps``
* ``alpha_bar[t]`` is the cumulative signal-retention product at step t

The default decoder is the identity: the toy model diffuses directly in
image space. Anything exposing ``decode(latent) -> image`` can be
plugged in instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import NumericError

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention sequence over discrete timesteps.

    ``alpha_bar`` must be strictly decreasing with every entry in
    (0, 1]. Stored in float64; cast happens at the point of use.
    """

    alpha_bar: torch.Tensor

    def __post_init__(self):
        ab = self.alpha_bar
        if not isinstance(ab, torch.Tensor) or ab.ndim != 1 or ab.numel() < 2:
            raise ValueError("alpha_bar must be a 1-d tensor with at least 2 entries")
        if ab.dtype != torch.float64:
            object.__setattr__(self, "alpha_bar", ab.to(torch.float64))
            ab = self.alpha_bar
        if not torch.isfinite(ab).all():
            raise ValueError("alpha_bar contains non-finite entries")
        if (ab <= 0).any() or (ab > 1).any():
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if not (ab[1:] < ab[:-1]).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return int(self.alpha_bar.numel())

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t < self.num_steps:
            raise IndexError(f"timestep {t} outside [0, {self.num_steps})")
        return float(self.alpha_bar[t])


def build_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Scaled-linear beta schedule: linear in sqrt(beta), then squared.

    alpha_bar[t] = prod_{s<=t} (1 - beta_s), computed in float64.
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    sqrt_betas = torch.linspace(
        math.sqrt(beta_start), math.sqrt(beta_end), num_steps, dtype=torch.float64
    )
    betas = sqrt_betas**2
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(alpha_bar=alpha_bar)


def _check_t(schedule: NoiseSchedule, t: int) -> float:
    if not 0 <= int(t) < schedule.num_steps:
        raise IndexError(f"timestep {t} outside [0, {schedule.num_steps})")
    return float(schedule.alpha_bar[int(t)])


def add_noise(
    z0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Forward diffusion: z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    ab = _check_t(schedule, t)
    sqrt_ab = math.sqrt(ab)
    sqrt_one_minus = math.sqrt(1.0 - ab)
    return sqrt_ab * z0 + sqrt_one_minus * eps


def reconstruct_x0_latent(
    zt: torch.Tensor, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward step under the predicted noise.

    z0_hat = (z_t - sqrt(1 - ab_t) * eps_pred) / sqrt(ab_t)

    Differentiable in both ``zt`` and ``eps_pred``; linear in each.
    """
    if zt.shape != eps_pred.shape:
        raise ValueError(
            f"shape mismatch: zt {tuple(zt.shape)} vs eps_pred {tuple(eps_pred.shape)}"
        )
    ab = _check_t(schedule, t)
    if ab <= 0.0:
        raise NumericError(f"alpha_bar[{t}] = {ab}: reconstruction undefined")
    sqrt_ab = math.sqrt(ab)
    sqrt_one_minus = math.sqrt(1.0 - ab)
    return (zt - sqrt_one_minus * eps_pred) / sqrt_ab


def straight_through_clamp(
    x: torch.Tensor, lo: float = 0.0, hi: float = 1.0
) -> torch.Tensor:
    """Clamp in the forward pass, identity in the backward pass.

    A hard clamp kills gradients wherever a reconstruction saturates,
    which at high noise levels is almost everywhere; detectors would
    then stop steering the denoiser. The straight-through estimator
    keeps the forward values inside [lo, hi] while letting gradients
    flow as if no clamp were applied.
    """
    return x + (x.clamp(lo, hi) - x).detach()


class DecoderAdapter:
    """Contract for latent -> image decoders.

    ``decode`` takes a (C_lat, H_lat, W_lat) latent and returns a
    (3, H, W) image whose forward values lie in [0, 1]. The decode path
    must stay differentiable; feedback losses backpropagate through it.
    """

    def decode(self, z0_hat: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityDecoder(DecoderAdapter):
    """Latent space is image space; the toy configuration.

    Applies a straight-through clamp so downstream detectors always see
    values in [0, 1] while the denoising objective (which never calls
    ``decode``) remains untouched.
    """

    def decode(self, z0_hat: torch.Tensor) -> torch.Tensor:
        return straight_through_clamp(z0_hat)


def decode(z0_hat: torch.Tensor, decoder: DecoderAdapter | None = None) -> torch.Tensor:
    """Map a reconstructed latent to image space for the detectors."""
    if z0_hat.ndim != 3:
        raise ValueError(f"expected a (C, H, W) latent, got shape {tuple(z0_hat.shape)}")
    if not torch.isfinite(z0_hat).all():
        raise NumericError("non-finite values in reconstructed latent")
    if decoder is None:
        decoder = IdentityDecoder()
    return decoder.decode(z0_hat)
