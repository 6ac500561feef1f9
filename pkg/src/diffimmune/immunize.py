"""Bi-level immunization trainer and its single-step ablation.

The bi-level loop alternates two plain-SGD updates per the configured
interleave pattern: lower-level steps descend the prior-preservation loss on
the safe split over the full parameter vector, upper-level steps descend the
immunization loss on the defense split over the restricted (conditioning)
coordinates only. The naive ablation applies both updates simultaneously from
the same point each iteration, which drops the second-order coordination the
alternating scheme picks up.

Also home to ``fit_denoiser``, the generic SGD denoising trainer used for
pre-training and by the fine-tuning attacks: a lower-level step and a
denoising SGD step are the same update.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .concepts import ConceptDataset, split_arrays
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule
from .errors import NumericalError, ValidationError
from .losses import LossValue, loss_value_and_grad


@dataclass(frozen=True)
class GiftConfig:
    """Immunization hyperparameters; interleave is (inner, outer) steps per cycle."""

    alpha_inner: float = 1e-3
    alpha_outer: float = 1e-4
    beta: float = 50.0
    interleave: tuple[int, int] = (1, 1)
    total_iterations: int = 1000
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 100
    noise_reduction: str = "sum"
    noise_layers: str = "conditioning"

    def __post_init__(self):
        if self.alpha_inner < 0 or self.alpha_outer < 0:
            raise ValidationError("step sizes must be >= 0")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        k, m = self.interleave
        if k < 0 or m < 0 or k + m < 1:
            raise ValidationError("interleave needs nonnegative counts with k + m >= 1")
        if self.total_iterations < 0 or self.batch_size < 1:
            raise ValidationError("bad iteration/batch counts")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")
        if self.noise_reduction not in ("sum", "mean"):
            raise ValidationError(f"bad noise_reduction {self.noise_reduction!r}")
        if self.noise_layers not in ("conditioning", "all"):
            raise ValidationError(f"bad noise_layers {self.noise_layers!r}")


@dataclass
class ImmunizationRun:
    config: GiftConfig
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (iteration, DenoiserParams)
    initial: DenoiserParams | None = None


def _inner(params, batch, schedule, alpha, rng) -> tuple[DenoiserParams, LossValue]:
    lv, g = loss_value_and_grad(params, "prior", batch, schedule, rng)
    theta = params.theta - alpha * g
    return replace(params, theta=theta), lv


def _outer(params, batch, schedule, alpha, beta, rng, *,
           reduction="sum", noise_layers="conditioning") -> tuple[DenoiserParams, LossValue]:
    lv, g_psi = loss_value_and_grad(params, "immunize", batch, schedule, rng,
                                    beta=beta, restrict=True,
                                    reduction=reduction, noise_layers=noise_layers)
    theta = params.theta.copy()
    theta[params.psi_start:] -= alpha * g_psi
    return replace(params, theta=theta), lv


def inner_step(params: DenoiserParams, safe_batch, schedule: NoiseSchedule,
               alpha_inner: float, rng) -> DenoiserParams:
    """One full-parameter SGD step on the prior-preservation loss."""
    return _inner(params, safe_batch, schedule, alpha_inner, rng)[0]


def outer_step(params: DenoiserParams, malicious_batch, schedule: NoiseSchedule,
               alpha_outer: float, beta: float, rng, *,
               reduction="sum", noise_layers="conditioning") -> DenoiserParams:
    """One restricted SGD step on the immunization loss; non-psi coordinates untouched."""
    return _outer(params, malicious_batch, schedule, alpha_outer, beta, rng,
                  reduction=reduction, noise_layers=noise_layers)[0]


def _training_arrays(dataset: ConceptDataset):
    x_m, c_m = split_arrays(dataset, "D_M")
    x_s, c_s = split_arrays(dataset, "D_S")
    if x_m.shape[0] == 0 or x_s.shape[0] == 0:
        raise ValidationError("immunization needs nonempty D_M and D_S splits")
    return x_m, c_m, x_s, c_s


def _record(run, iteration, level, prior=None, comps=None, total=None):
    row = {"iteration": iteration, "level": level,
           "max": None, "noise": None, "prior": prior, "total": total}
    if comps:
        row["max"] = comps.get("max")
        row["noise"] = comps.get("noise")
    run.history.append(row)


def immunize(params: DenoiserParams, dataset: ConceptDataset,
             schedule: NoiseSchedule, config: GiftConfig):
    """Run the bi-level loop; returns (immunized params, run record).

    Each iteration is one elementary step; its level follows the interleave
    pattern cyclically (inner steps first within a cycle). One rng stream,
    seeded from the config, drives batch selection and loss randomness in
    order, so equal inputs give identical results. On numerical failure the
    partial run is attached to the raised error.
    """
    x_m, c_m, x_s, c_s = _training_arrays(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    run = ImmunizationRun(config=config, initial=params)
    k, m = config.interleave
    cycle = k + m
    try:
        for it in range(config.total_iterations):
            if it % cycle < k:
                idx = rng.integers(0, x_s.shape[0], size=config.batch_size)
                params, lv = _inner(params, (x_s[idx], c_s[idx]), schedule,
                                    config.alpha_inner, rng)
                _record(run, it, "inner", prior=lv.value, total=lv.value)
            else:
                idx = rng.integers(0, x_m.shape[0], size=config.batch_size)
                params, lv = _outer(params, (x_m[idx], c_m[idx]), schedule,
                                    config.alpha_outer, config.beta, rng,
                                    reduction=config.noise_reduction,
                                    noise_layers=config.noise_layers)
                _record(run, it, "outer", comps=lv.components, total=lv.value)
            if (it + 1) % config.checkpoint_every == 0:
                run.checkpoints.append((it + 1, params))
    except NumericalError as err:
        err.partial_run = run
        raise
    return params, run


def immunize_naive(params: DenoiserParams, dataset: ConceptDataset,
                   schedule: NoiseSchedule, config: GiftConfig):
    """Ablation: one simultaneous joint step per iteration, no inner/outer ordering.

    Both gradients are taken at the same starting point; the full-parameter
    prior update and the restricted immunization update are then applied
    together, so no second-order cross term arises.
    """
    x_m, c_m, x_s, c_s = _training_arrays(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    run = ImmunizationRun(config=config, initial=params)
    try:
        for it in range(config.total_iterations):
            idx_s = rng.integers(0, x_s.shape[0], size=config.batch_size)
            idx_m = rng.integers(0, x_m.shape[0], size=config.batch_size)
            lv_p, g_prior = loss_value_and_grad(params, "prior", (x_s[idx_s], c_s[idx_s]),
                                                schedule, rng)
            lv_i, g_psi = loss_value_and_grad(params, "immunize", (x_m[idx_m], c_m[idx_m]),
                                              schedule, rng, beta=config.beta, restrict=True,
                                              reduction=config.noise_reduction,
                                              noise_layers=config.noise_layers)
            theta = params.theta - config.alpha_inner * g_prior
            theta[params.psi_start:] -= config.alpha_outer * g_psi
            params = replace(params, theta=theta)
            row_total = lv_p.value + lv_i.value
            _record(run, it, "naive", prior=lv_p.value, comps=lv_i.components,
                    total=row_total)
            if (it + 1) % config.checkpoint_every == 0:
                run.checkpoints.append((it + 1, params))
    except NumericalError as err:
        err.partial_run = run
        raise
    return params, run


def fit_denoiser(params: DenoiserParams, x0: np.ndarray, concept_ids: np.ndarray,
                 schedule: NoiseSchedule, steps: int, lr: float, batch_size: int,
                 seed: int, snapshot_fn=None, snapshot_every: int = 0):
    """Plain SGD on the standard denoising objective; the shared trainer for
    pre-training and fine-tuning. Returns (params, per-step loss list)."""
    x0 = np.asarray(x0, dtype=float)
    concept_ids = np.asarray(concept_ids, dtype=np.int64)
    if x0.shape[0] == 0:
        raise ValidationError("no training data")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    history = []
    if snapshot_fn is not None and snapshot_every > 0:
        snapshot_fn(0, params)
    for step in range(steps):
        idx = rng.integers(0, x0.shape[0], size=batch_size)
        params, lv = _inner(params, (x0[idx], concept_ids[idx]), schedule, lr, rng)
        history.append(lv.value)
        if snapshot_fn is not None and snapshot_every > 0 and (step + 1) % snapshot_every == 0:
            snapshot_fn(step + 1, params)
    return params, history
