"""The four training objectives: prior preservation, loss maximization,
representation noising, and their weighted combination.

Conventions:

* The denoising objective is the batch mean of per-sample squared error
  ``||eps_hat - eps||^2`` (so a zero model scores ~2 on 2-D data).
* Loss maximization is exactly the negated denoising objective on the
  malicious batch, hence always <= 0.
* Representation noising drives each captured conditioning-block activation
  toward a Gaussian draw matched to that activation's own pooled mean and
  variance. The drawn target is a constant for differentiation: no gradient
  flows through the target or through the pooled statistics. Layer statistics
  are scalars pooled over batch and width; the per-layer MSE is a mean over
  elements and layers are summed by default (``reduction="mean"`` averages).

All losses are deterministic functions of (params, batch, rng state). Passing
a prebuilt DiffusionBatch pins the timestep/noise draws, which is also the
test seam for oracle predictors; ``params`` may be any callable
``fn(x_t, concept_ids, t, capture) -> (eps_hat, trace)`` in value-only paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import ActivationTrace, DenoiserParams, _forward, backward
from .diffusion import DiffusionBatch, NoiseSchedule, make_diffusion_batch, q_sample
from .errors import NumericalError, ValidationError

VAR_FLOOR = 1e-12  # degenerate (constant-activation) sampling guard

SELECTORS = ("prior", "max", "noise", "immunize")


@dataclass(frozen=True)
class LossValue:
    value: float
    components: dict = field(default_factory=dict)


def _as_batch(params, batch, schedule, rng) -> DiffusionBatch:
    if isinstance(batch, DiffusionBatch):
        return batch
    x0, cids = batch
    return make_diffusion_batch(x0, cids, schedule, rng)


def _run_forward(params, x_t, cids, t, capture, need_cache):
    if isinstance(params, DenoiserParams):
        return _forward(params, x_t, cids, t, capture=capture, need_cache=need_cache)
    if callable(params):
        eps_hat, trace = params(x_t, cids, t, capture)
        return np.asarray(eps_hat, dtype=float), trace, None
    raise ValidationError(f"params must be DenoiserParams or callable, got {type(params)}")


def _denoise_forward(params, batch, schedule, capture=False, need_cache=False):
    if batch.x0.shape[0] == 0:
        raise ValidationError("empty batch")
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    eps_hat, trace, cache = _run_forward(params, x_t, batch.concept_ids, batch.t,
                                         capture, need_cache)
    resid = eps_hat - batch.eps
    mse = float((resid ** 2).sum(axis=1).mean())
    return mse, resid, trace, cache


def draw_noise_targets(trace: ActivationTrace, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-layer Gaussian targets N(mu_z, var_z) with stats pooled per layer."""
    targets = []
    for layer in trace.layers:
        if layer.z.size < 2:
            raise ValidationError("activation layer needs >= 2 elements for a variance")
        sigma = np.sqrt(max(layer.var, VAR_FLOOR))
        targets.append(layer.mu + sigma * rng.standard_normal(layer.z.shape))
    return targets


def _noise_value(trace: ActivationTrace, targets: list[np.ndarray],
                 reduction: str) -> tuple[float, dict]:
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"bad reduction {reduction!r}")
    per_layer = [float(((layer.z - tgt) ** 2).mean())
                 for layer, tgt in zip(trace.layers, targets)]
    total = sum(per_layer)
    if reduction == "mean":
        total /= len(per_layer)
    comps = {f"layer_{i}": v for i, v in enumerate(per_layer)}
    return total, comps


def loss_prior(params, batch, schedule: NoiseSchedule, rng=None) -> LossValue:
    """Standard denoising objective on safe data; always >= 0."""
    b = _as_batch(params, batch, schedule, rng)
    mse, _, _, _ = _denoise_forward(params, b, schedule)
    return LossValue(value=mse)


def loss_max(params, batch, schedule: NoiseSchedule, rng=None) -> LossValue:
    """Negated denoising objective on malicious data; always <= 0."""
    b = _as_batch(params, batch, schedule, rng)
    mse, _, _, _ = _denoise_forward(params, b, schedule)
    return LossValue(value=-mse)


def loss_noise(trace: ActivationTrace, rng=None, *, targets=None,
               reduction: str = "sum") -> LossValue:
    """Representation-noising loss over a captured activation trace; >= 0."""
    if trace is None or not trace.layers:
        raise ValidationError("empty activation trace")
    if targets is None:
        targets = draw_noise_targets(trace, rng)
    value, comps = _noise_value(trace, targets, reduction)
    return LossValue(value=value, components=comps)


def loss_immunize(params, batch, schedule: NoiseSchedule, beta: float, rng=None, *,
                  noise_targets=None, reduction: str = "sum",
                  noise_layers: str = "conditioning") -> LossValue:
    """max + beta * noise on one shared capture-enabled forward pass."""
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    b = _as_batch(params, batch, schedule, rng)
    capture = "all" if noise_layers == "all" else True
    mse, _, trace, _ = _denoise_forward(params, b, schedule, capture=capture)
    if noise_targets is None:
        noise_targets = draw_noise_targets(trace, rng)
    noise_val, _ = _noise_value(trace, noise_targets, reduction)
    return LossValue(value=-mse + beta * noise_val,
                     components={"max": -mse, "noise": noise_val})


def _split_injections(trace: ActivationTrace, deltas: list[np.ndarray], arch):
    """Route per-layer gradients to conditioning / trunk injection slots."""
    d_cond: list = [None] * arch.cond_blocks
    d_trunk: list = [None] * arch.trunk_blocks
    for label, d in zip(trace.labels, deltas):
        if label.startswith("cond"):
            d_cond[int(label[4:])] = d
        else:
            d_trunk[int(label[5:])] = d
    return d_cond, d_trunk


def loss_value_and_grad(params: DenoiserParams, selector: str, batch,
                        schedule: NoiseSchedule, rng=None, *, beta: float = 1.0,
                        restrict: bool = False, noise_targets=None,
                        reduction: str = "sum", noise_layers: str = "conditioning"):
    """(LossValue, flat gradient) for one selector, sharing a single forward pass.

    Randomness order is fixed: batch draws (t, eps) first, then per-layer
    target draws, so a given rng state pins every stochastic choice. With
    ``restrict`` the returned vector holds only the psi coordinates.
    """
    if selector not in SELECTORS:
        raise ValidationError(f"unknown loss selector {selector!r}")
    if not isinstance(params, DenoiserParams):
        raise ValidationError("gradients need DenoiserParams")
    b = _as_batch(params, batch, schedule, rng)
    n = b.x0.shape[0]
    capture = False
    if selector in ("noise", "immunize"):
        capture = "all" if noise_layers == "all" else True
    mse, resid, trace, cache = _denoise_forward(params, b, schedule,
                                                capture=capture, need_cache=True)

    d_eps_hat = np.zeros_like(resid)
    d_cond = d_trunk = None
    comps: dict = {}
    if selector == "prior":
        value = mse
        d_eps_hat = 2.0 * resid / n
    elif selector == "max":
        value = -mse
        d_eps_hat = -2.0 * resid / n
    else:
        if noise_targets is None:
            noise_targets = draw_noise_targets(trace, rng)
        noise_val, _ = _noise_value(trace, noise_targets, reduction)
        layer_scale = 1.0 / len(trace.layers) if reduction == "mean" else 1.0
        weight = layer_scale * (beta if selector == "immunize" else 1.0)
        deltas = [weight * 2.0 * (layer.z - tgt) / layer.z.size
                  for layer, tgt in zip(trace.layers, noise_targets)]
        d_cond, d_trunk = _split_injections(trace, deltas, params.arch)
        if selector == "noise":
            value = noise_val
        else:
            value = -mse + beta * noise_val
            comps = {"max": -mse, "noise": noise_val}
            d_eps_hat = -2.0 * resid / n

    grad = backward(params, cache, d_eps_hat, d_cond, d_trunk)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient for selector {selector!r}")
    if restrict:
        grad = grad[params.psi_start:]
    return LossValue(value=value, components=comps), grad
