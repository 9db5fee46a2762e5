"""Noise schedule tables and closed-form diffusion/denoising arithmetic.

Conventions: steps are 1-indexed, t in 1..T.  alpha_bar has T+1 entries
with alpha_bar[0] = 1, which is what makes the final ancestral step
(t = 1) collapse to the clean prediction with no injected noise.
All functions here are pure numpy; gradients never flow through them
because the noised input of the denoiser is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidRangeError, StepOrderError, StepOutOfRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha_bar tables for a T-step process."""

    T: int
    beta: np.ndarray        # length T, beta[t-1] is the step-t variance
    alpha: np.ndarray       # length T, alpha[t-1] = 1 - beta[t-1]
    alpha_bar: np.ndarray   # length T+1, cumulative product with alpha_bar[0] = 1

    def __post_init__(self):
        self.beta.flags.writeable = False
        self.alpha.flags.writeable = False
        self.alpha_bar.flags.writeable = False

    def check_step(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise StepOutOfRangeError(f"step {t} outside 1..{self.T}")


def build_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas, endpoints inclusive."""
    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha)
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def diffuse_step(sched: NoiseSchedule, x_prev: np.ndarray, t: int,
                 noise: np.ndarray) -> np.ndarray:
    """One forward noising step: sqrt(a_t) x_{t-1} + sqrt(1 - a_t) noise."""
    sched.check_step(t)
    a = sched.alpha[t - 1]
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * noise


def q_sample(sched: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Jump straight to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(sched: NoiseSchedule, xt: np.ndarray, t: int,
               eps_hat: np.ndarray) -> np.ndarray:
    """Invert q_sample given a noise estimate."""
    sched.check_step(t)
    ab = sched.alpha_bar[t]
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_step(sched: NoiseSchedule, xt: np.ndarray, t: int, x0_hat: np.ndarray,
              noise: np.ndarray) -> np.ndarray:
    """Ancestral posterior step from x_t to x_{t-1}.

    At t = 1 the x_t and noise coefficients both vanish and the result is
    exactly x0_hat, so callers may pass zero noise there.
    """
    sched.check_step(t)
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    coef_xt = (1.0 - ab_prev) / (1.0 - ab) * np.sqrt(a)
    coef_x0 = (1.0 - a) / (1.0 - ab) * np.sqrt(ab_prev)
    coef_noise = np.sqrt((1.0 - ab_prev) * (1.0 - a) / (1.0 - ab))
    return coef_xt * xt + coef_x0 * x0_hat + coef_noise * noise


def ddim_step(sched: NoiseSchedule, xt: np.ndarray, t: int, t_prev: int,
              eps_hat: np.ndarray) -> np.ndarray:
    """Deterministic (eta = 0) step from t to an earlier t_prev."""
    if not (0 <= t_prev < t <= sched.T):
        raise StepOrderError(f"need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}")
    x0_hat = predict_x0(sched, xt, t, eps_hat)
    ab_prev = sched.alpha_bar[t_prev]
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
