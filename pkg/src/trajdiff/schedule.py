"""Linear noise schedule and the closed-form diffusion transitions.

Steps are numbered 1..T; step 0 denotes the clean signal, so the cumulative
signal coefficient at step 0 is exactly 1. All schedule tables are kept in
float64 and cast to the latent dtype at use sites, so double-precision
callers see double-precision coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .exceptions import ConfigError
from .validation import check_positive_int


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and their cumulative products.

    beta[i], alpha[i] and alpha_bar[i] describe step t = i + 1.
    """

    beta: torch.Tensor
    alpha: torch.Tensor = field(init=False)
    alpha_bar: torch.Tensor = field(init=False)

    def __post_init__(self):
        beta = torch.as_tensor(self.beta, dtype=torch.float64)
        if beta.ndim != 1 or beta.numel() < 1:
            raise ConfigError("beta must be a non-empty 1-D sequence")
        if bool((beta <= 0).any()) or bool((beta >= 1).any()):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", torch.cumprod(1.0 - beta, dim=0))

    @property
    def n_steps(self) -> int:
        return self.beta.numel()

    def alpha_bar_at(self, t):
        """Cumulative signal coefficient at step t, with step 0 mapping to 1.

        Accepts an int or an integer tensor of per-example steps.
        """
        if isinstance(t, torch.Tensor):
            self._check_range(t, low=0)
            padded = torch.cat([self.alpha_bar.new_ones(1), self.alpha_bar])
            return padded[t.long()]
        if not 0 <= t <= self.n_steps:
            raise IndexError(f"step {t} outside [0, {self.n_steps}]")
        return self.alpha_bar.new_tensor(1.0) if t == 0 else self.alpha_bar[t - 1]

    def alpha_at(self, t):
        if isinstance(t, torch.Tensor):
            self._check_range(t, low=1)
            return self.alpha[t.long() - 1]
        if not 1 <= t <= self.n_steps:
            raise IndexError(f"step {t} outside [1, {self.n_steps}]")
        return self.alpha[t - 1]

    def snr(self) -> torch.Tensor:
        """Signal-to-noise ratio per step; strictly decreasing for any
        valid schedule."""
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def _check_range(self, t: torch.Tensor, *, low: int) -> None:
        if t.numel() == 0:
            return
        lo, hi = int(t.min()), int(t.max())
        if lo < low or hi > self.n_steps:
            raise IndexError(f"steps in [{lo}, {hi}] outside [{low}, {self.n_steps}]")


def linear_schedule(n_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Evenly spaced noise rates from beta_start to beta_end inclusive."""
    check_positive_int(n_steps, "n_steps")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = torch.linspace(beta_start, beta_end, n_steps, dtype=torch.float64)
    return NoiseSchedule(beta)


def _as_broadcast_coeff(values: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Reshape per-example coefficients to [B, 1, ..., 1] against ref."""
    coeff = values.to(ref.dtype)
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape(coeff.shape[0], *([1] * (ref.ndim - 1)))


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Jump the clean latent straight to step t.

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise, where t may be a
    scalar or a per-example integer tensor (first axis of x0 is the batch).
    """
    if noise.shape != x0.shape:
        raise ConfigError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0 and t.shape[0] != x0.shape[0]:
        raise ConfigError(f"per-example t has {t.shape[0]} entries for batch {x0.shape[0]}")
    abar = sched.alpha_bar_at(t if isinstance(t, torch.Tensor) else int(t))
    signal = _as_broadcast_coeff(abar.sqrt(), x0)
    spread = _as_broadcast_coeff((1.0 - abar).sqrt(), x0)
    return signal * x0 + spread * noise


def posterior_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    noise: torch.Tensor | None,
    t_prev: int | None = None,
) -> torch.Tensor:
    """One reverse-process update from step t toward step t_prev.

    x_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * noise. By
    default t_prev = t - 1; a smaller t_prev takes a strided jump. The final
    update (t_prev == 0) injects no noise and returns x0_hat unchanged.
    """
    if x0_hat.shape != x_t.shape:
        raise ConfigError(
            f"x0_hat shape {tuple(x0_hat.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    t = int(t)
    if not 1 <= t <= sched.n_steps:
        raise IndexError(f"step {t} outside [1, {sched.n_steps}]")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise ConfigError(f"t_prev must lie in [0, {t - 1}], got {t_prev}")
    if t_prev == 0:
        return x0_hat
    if noise is None:
        raise ConfigError("noise is required for every step except the final one")
    if noise.shape != x_t.shape:
        raise ConfigError(f"noise shape {tuple(noise.shape)} != x_t shape {tuple(x_t.shape)}")
    abar_prev = sched.alpha_bar_at(t_prev).to(x0_hat.dtype)
    return abar_prev.sqrt() * x0_hat + (1.0 - abar_prev).sqrt() * noise


def strided_steps(n_train_steps: int, n_infer_steps: int) -> list[int]:
    """Evenly spaced descending subset of {1..T} starting at T.

    With n_infer_steps == T this is simply T, T-1, ..., 1; with fewer steps
    the subset keeps both endpoints so sampling still starts from the
    noisiest step and ends with a clean reconstruction.
    """
    check_positive_int(n_train_steps, "n_train_steps")
    check_positive_int(n_infer_steps, "n_infer_steps")
    if n_infer_steps > n_train_steps:
        raise ConfigError(
            f"n_infer_steps ({n_infer_steps}) cannot exceed n_train_steps ({n_train_steps})"
        )
    if n_infer_steps == 1:
        return [n_train_steps]
    raw = [
        n_train_steps - (n_train_steps - 1) * i / (n_infer_steps - 1)
        for i in range(n_infer_steps)
    ]
    steps = sorted({int(round(v)) for v in raw}, reverse=True)
    return steps
