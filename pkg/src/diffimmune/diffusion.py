"""DDPM forward process, linear noise schedule, and ancestral sampling.

Everything here is a pure function of its inputs; samplers take an explicit
seed. Timesteps in loss expectations are drawn uniformly over ``[0, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients: beta, alpha = 1-beta, alpha_bar = cumprod."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class DiffusionBatch:
    """A training batch with its timestep and noise draws materialized."""

    x0: np.ndarray           # n x 2
    concept_ids: np.ndarray  # n
    t: np.ndarray            # n, ints in [0, T)
    eps: np.ndarray          # n x 2 standard normal


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def default_schedule() -> NoiseSchedule:
    return build_schedule(200, 1e-4, 0.02)


def q_sample(x0: np.ndarray, t: np.ndarray | int, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Accepts a single point with scalar t or a batch with per-row t.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise ValidationError(f"timestep out of range [0, {schedule.T})")
    abar = schedule.alpha_bar[t_arr]
    if np.ndim(x0) == 2:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def make_diffusion_batch(x0: np.ndarray, concept_ids: np.ndarray,
                         schedule: NoiseSchedule, rng: np.random.Generator) -> DiffusionBatch:
    """Draw fresh uniform timesteps and standard-normal noise for a batch."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2 or x0.shape[1] != 2:
        raise ValidationError(f"x0 must be n x 2, got shape {x0.shape}")
    n = x0.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.standard_normal((n, 2))
    return DiffusionBatch(x0=x0, concept_ids=np.asarray(concept_ids, dtype=np.int64),
                          t=t, eps=eps)


def p_sample_loop(params, concept: int, n: int, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Ancestral DDPM sampler conditioned on one concept.

    Uses the beta_t posterior variance. Deterministic given ``seed``; returns
    an n x 2 matrix of generated points.
    """
    from .denoiser import forward  # local import to avoid a module cycle

    if n == 0:
        return np.zeros((0, 2))
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    x = rng.standard_normal((n, 2))
    cids = np.full(n, concept, dtype=np.int64)
    for t in range(schedule.T - 1, -1, -1):
        t_vec = np.full(n, t, dtype=np.int64)
        eps_hat, _ = forward(params, x, cids, t_vec)
        a_t = schedule.alpha[t]
        abar_t = schedule.alpha_bar[t]
        mean = (x - schedule.beta[t] / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(a_t)
        if t > 0:
            x = mean + np.sqrt(schedule.beta[t]) * rng.standard_normal((n, 2))
        else:
            x = mean
    return x
