"""Denoising-diffusion substrate: schedules, corruption, inversion, posterior step.

Step indices t are 1-based (1..T); schedule arrays store t at index t-1.
All operations are pure given explicit noise; reverse-step variance is the
fixed beta-tilde choice, which is zero at t=1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if len(beta) != self.T:
            raise ValueError("beta table length must equal T")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ValueError("beta schedule must be non-decreasing")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def sigma(self, t):
        """Reverse-step standard deviation sqrt(posterior_var) at step t."""
        return float(np.sqrt(self.posterior_var[t - 1]))


def make_schedule(T, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    """Linear beta schedule with precomputed cumulative products."""
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(T, beta, alpha, alpha_bar, posterior_var)


@dataclass
class DiffusionState:
    """A corrupted sample, its step index, and (during training) the noise used."""

    h_t: np.ndarray
    t: int
    eps_used: np.ndarray | None = None


def _check_step(schedule, t):
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    return t


def forward_corrupt(h0, t, schedule: NoiseSchedule, noise=None, rng=None):
    """Corrupt a clean sample directly to step t.

    Supply `noise` for deterministic use, or `rng` to sample it internally.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    t = _check_step(schedule, t)
    if noise is None:
        if rng is None:
            raise ValueError("provide either noise or rng")
        noise = rng.standard_normal(h0.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != h0.shape:
        raise ValueError(f"noise shape {noise.shape} != sample shape {h0.shape}")
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * noise


def estimate_h0(h_t, eps_pred, t, schedule: NoiseSchedule):
    """Invert the corruption formula with a predicted noise vector."""
    h_t = np.asarray(h_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps_pred.shape != h_t.shape:
        raise ValueError("eps_pred shape mismatch")
    t = _check_step(schedule, t)
    ab = schedule.alpha_bar[t - 1]
    return (h_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def posterior_mean(h_t, eps_pred, t, schedule: NoiseSchedule):
    h_t = np.asarray(h_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    t = _check_step(schedule, t)
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    b = schedule.beta[t - 1]
    return (h_t - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def posterior_step(h_t, eps_pred, t, schedule: NoiseSchedule, noise=None, rng=None):
    """One reverse step: returns (mu, h_prev). Noise is forced to zero at t=1."""
    t = _check_step(schedule, t)
    mu = posterior_mean(h_t, eps_pred, t, schedule)
    if t == 1:
        return mu, mu.copy()
    if noise is None:
        if rng is None:
            raise ValueError("provide either noise or rng")
        noise = rng.standard_normal(mu.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape:
        raise ValueError("noise shape mismatch")
    return mu, mu + np.sqrt(schedule.posterior_var[t - 1]) * noise
