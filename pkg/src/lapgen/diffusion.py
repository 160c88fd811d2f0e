"""Closed-form diffusion mathematics.

Forward process, training loss, guidance combination, and single reverse
steps for both DDIM and ancestral (DDPM) sampling.  Everything here is a
pure function of its inputs: randomness only enters through an explicit
``torch.Generator``, so full trajectories are reproducible bit-for-bit.

Conventions:
- ``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` (variance preserving)
- epsilon-prediction target, unweighted MSE
- ``t_prev = -1`` denotes the fully denoised endpoint (``abar = 1``), so the
  final reverse step returns the current clean estimate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class ScheduleError(ValueError):
    """Invalid noise-schedule construction parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise coefficients for a T-step diffusion process."""

    T: int
    betas: torch.Tensor        # (T,) in (0, 1)
    alphas: torch.Tensor       # (T,) 1 - betas
    alpha_bars: torch.Tensor   # (T,) cumulative product of alphas

    def alpha_bar(self, t: int) -> torch.Tensor:
        """abar_t, with t = -1 mapping to the clean-data endpoint abar = 1."""
        if t == -1:
            return torch.tensor(1.0, dtype=self.alpha_bars.dtype)
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return self.alpha_bars[t]


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process sampling parameters."""

    num_inference_steps: int = 100
    guidance_scale: float = 3.0
    sampler_kind: str = "ddim"   # "ddim" | "ddpm"
    eta: float = 0.0             # ddim stochasticity in [0, 1]
    # The underlying schedule convention is not pinned by the problem
    # setting; linear betas / eps-prediction / ddim are inherited defaults.
    schedule_source: str = field(default="convention", compare=False)

    def __post_init__(self):
        if self.sampler_kind not in ("ddim", "ddpm"):
            raise ScheduleError(f"unknown sampler_kind {self.sampler_kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError(f"eta must lie in [0, 1], got {self.eta}")
        if self.num_inference_steps < 1:
            raise ScheduleError("num_inference_steps must be >= 1")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule with betas spaced from beta_start to beta_end inclusive."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float32)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_t(schedule: NoiseSchedule, t: int) -> None:
    if not 0 <= t < schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise a clean sample to level t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_t(schedule, t)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bars[t]
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """q_sample with a per-sample timestep vector t of shape (B,)."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if int(t.min()) < 0 or int(t.max()) >= schedule.T:
        raise IndexError(f"timesteps outside [0, {schedule.T})")
    abar = schedule.alpha_bars[t].reshape(-1, *([1] * (x0.dim() - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert q_sample for a given noise estimate: (x_t - sqrt(1-abar_t)*eps_hat) / sqrt(abar_t)."""
    _check_t(schedule, t)
    abar = schedule.alpha_bars[t]
    return (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def training_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_pred.shape != eps.shape:
        raise ValueError(
            f"eps_pred shape {tuple(eps_pred.shape)} != eps shape {tuple(eps.shape)}"
        )
    return torch.mean((eps_pred - eps) ** 2)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, s: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + s * (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("conditional/unconditional predictions differ in shape")
    return eps_uncond + s * (eps_cond - eps_uncond)


def inference_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending timestep subsequence for num_steps reverse passes.

    Indices are round(T*i/num_steps) for i = 1..num_steps, clamped to T-1 and
    deduplicated.  The implicit final target (t = -1, clean data) is appended
    by the sampling loop, not included here.
    """
    if num_steps > T:
        raise ScheduleError(f"num_inference_steps {num_steps} exceeds T {T}")
    taus = {min(T - 1, round(T * i / num_steps)) for i in range(1, num_steps + 1)}
    return sorted(taus, reverse=True)


def sampler_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One reverse step from level t to level t_prev (t_prev = -1 ends at x0_hat).

    ddim:  x_prev = sqrt(abar_prev)*x0_hat + sqrt(1-abar_prev-sigma^2)*eps_hat + sigma*z
           with sigma = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1-abar_t/abar_prev).
    ddpm:  posterior mean of q(x_prev | x_t, x0_hat) plus posterior-variance noise.

    With eta = 0 (or at the final step) no random numbers are consumed.
    """
    _check_t(schedule, t)
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    if t_prev < -1:
        raise ValueError(f"t_prev {t_prev} below -1")

    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bar(t_prev)
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)

    if config.sampler_kind == "ddim":
        if config.eta > 0.0 and t_prev >= 0:
            sigma = (
                config.eta
                * torch.sqrt((1.0 - abar_prev) / (1.0 - abar_t))
                * torch.sqrt(1.0 - abar_t / abar_prev)
            )
            z = torch.empty_like(x_t).normal_(generator=rng)
        else:
            sigma = torch.tensor(0.0, dtype=x_t.dtype)
            z = None
        x_prev = (
            torch.sqrt(abar_prev) * x0_hat
            + torch.sqrt(torch.clamp(1.0 - abar_prev - sigma**2, min=0.0)) * eps_hat
        )
        if z is not None:
            x_prev = x_prev + sigma * z
        return x_prev

    # ddpm ancestral step over the (possibly strided) pair (t, t_prev)
    alpha = abar_t / abar_prev
    beta = 1.0 - alpha
    denom = 1.0 - abar_t
    coef_x0 = torch.sqrt(abar_prev) * beta / denom
    coef_xt = torch.sqrt(alpha) * (1.0 - abar_prev) / denom
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t_prev < 0:
        return mean
    var = beta * (1.0 - abar_prev) / denom
    z = torch.empty_like(x_t).normal_(generator=rng)
    return mean + torch.sqrt(torch.clamp(var, min=0.0)) * z
