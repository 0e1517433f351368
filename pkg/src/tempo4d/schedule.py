"""Linear beta schedule, forward noising, DDPM reverse steps and DDIM steps.

Steps are 1-based: ``t = 1..T``. Index 0 of the cumulative tables holds the
convention ``alpha_bar_0 = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_RULES = ("posterior", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; every array has length ``T + 1`` with slot 0 unused for betas."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_rule: str = "posterior"

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside {lo}..{self.T}")
        return t


@dataclass(frozen=True)
class DdimPlan:
    timesteps: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if not ts:
            raise ValueError("a DDIM plan needs at least one timestep")
        if any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 1:
            raise ValueError(f"DDIM timesteps must be strictly increasing and >= 1: {ts}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


def linear_schedule(T: int = 1000, beta_start: float = 1e-6, beta_end: float = 1e-2,
                    sigma_rule: str = "posterior") -> NoiseSchedule:
    """Endpoint-inclusive linear betas: ``beta_t = start + (t-1)/(T-1) * (end - start)``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma_rule not in SIGMA_RULES:
        raise ValueError(f"unknown sigma rule {sigma_rule!r}; expected one of {SIGMA_RULES}")

    betas = np.zeros(T + 1)
    if T == 1:
        betas[1] = beta_start
    else:
        steps = np.arange(T, dtype=np.float64)
        betas[1:] = beta_start + steps / (T - 1) * (beta_end - beta_start)
        betas[T] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # alpha_bars[0] = 1 since betas[0] = 0

    sigmas = np.zeros(T + 1)
    if sigma_rule == "posterior":
        sigmas[1:] = np.sqrt((1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:])
    else:
        sigmas[1:] = np.sqrt(betas[1:])
    return NoiseSchedule(T, betas, alphas, alpha_bars, sigmas, sigma_rule)


def ddim_plan(schedule: NoiseSchedule, steps: int = 50, eta: float = 0.0) -> DdimPlan:
    """``steps`` uniformly spaced timesteps ending exactly at ``T``."""
    T = schedule.T
    steps = int(min(max(steps, 1), T))
    ts = np.round(np.arange(1, steps + 1) * T / steps).astype(int)
    return DdimPlan(tuple(np.unique(ts)), eta)


def _like(x, coef):
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return x.astype(dtype, copy=False), np.asarray(coef, dtype=dtype)


def q_step(schedule: NoiseSchedule, x_prev, t: int, noise) -> np.ndarray:
    """One forward transition ``x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) noise``."""
    t = schedule.check_step(t)
    beta = schedule.betas[t]
    x_prev, c = _like(x_prev, np.sqrt(1.0 - beta))
    return c * x_prev + np.asarray(np.sqrt(beta), x_prev.dtype) * np.asarray(noise, x_prev.dtype)


def q_sample(schedule: NoiseSchedule, x0, t, noise) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1-abar_t) noise``.

    ``t`` may be an integer or an array of per-sample steps broadcast against
    the leading axis of ``x0``.
    """
    x0 = np.asarray(x0)
    ts = np.asarray(t)
    if ts.ndim == 0:
        schedule.check_step(int(ts))
    elif ts.min() < 1 or ts.max() > schedule.T:
        raise ValueError(f"steps must lie in 1..{schedule.T}")
    ab = schedule.alpha_bars[ts]
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    return (np.sqrt(ab).astype(dtype) * x0 + np.sqrt(1.0 - ab).astype(dtype) * np.asarray(noise, dtype)).astype(dtype)


def predict_x0_from_eps(schedule: NoiseSchedule, x_t, t: int, eps) -> np.ndarray:
    t = schedule.check_step(t)
    ab = schedule.alpha_bars[t]
    x_t, c = _like(x_t, np.sqrt(1.0 - ab))
    return (x_t - c * np.asarray(eps, x_t.dtype)) / np.asarray(np.sqrt(ab), x_t.dtype)


def posterior_mean(schedule: NoiseSchedule, x_t, t: int, eps_hat) -> np.ndarray:
    """``(x_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)``."""
    t = schedule.check_step(t)
    beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
    x_t, c = _like(x_t, beta / np.sqrt(1.0 - ab))
    return (x_t - c * np.asarray(eps_hat, x_t.dtype)) / np.asarray(np.sqrt(alpha), x_t.dtype)


def ddpm_reverse_step(schedule: NoiseSchedule, x_t, t: int, eps_hat, noise) -> np.ndarray:
    """Ancestral step to ``x_{t-1}``; the final step (t = 1) adds no noise."""
    mean = posterior_mean(schedule, x_t, t, eps_hat)
    if t == 1:
        return mean
    return mean + np.asarray(schedule.sigmas[t], mean.dtype) * np.asarray(noise, mean.dtype)


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)))


def ddim_step(schedule: NoiseSchedule, x_t, t: int, t_prev: int, eps_hat, eta: float = 0.0,
              noise=None) -> np.ndarray:
    """Generalized DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` lands on x0).

    With ``eta = 0`` the update is deterministic and ``noise`` is ignored.
    """
    t = schedule.check_step(t)
    t_prev = schedule.check_step(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"DDIM step must go backwards: t_prev={t_prev} >= t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    x0_hat = predict_x0_from_eps(schedule, x_t, t, eps_hat)
    dtype = x0_hat.dtype
    ab_prev = schedule.alpha_bars[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = np.asarray(np.sqrt(ab_prev), dtype) * x0_hat + np.asarray(direction, dtype) * np.asarray(eps_hat, dtype)
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise sample")
        out = out + np.asarray(sigma, dtype) * np.asarray(noise, dtype)
    return out
