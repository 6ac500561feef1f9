"""Numerical verification of gradients and of the second-order structure of
the alternating bi-level update.

``grad_check`` compares every analytic gradient against central finite
differences of the matching loss closure. For the representation-noising
losses the Gaussian targets are materialized once at the base point and held
fixed across perturbations, matching their stop-gradient treatment: the
closure differentiated is exactly the function the analytic gradient claims
to differentiate.

``taylor_residual`` compares the two-step update (full-parameter prior step,
then restricted immunization step at the moved point) against its expansion:
prior direction + immunization direction + a curvature correction, where the
curvature-vector product is taken matrix-free as a directional finite
difference of the restricted immunization gradient along the actual inner
displacement direction. Both paths consume identical randomness; on smooth
losses the residual shrinks quadratically in the inner step size, which
``taylor_scaling`` verifies by a log-log slope fit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .denoiser import DenoiserParams, _forward
from .diffusion import NoiseSchedule, make_diffusion_batch, q_sample
from .errors import NumericalError, ValidationError
from .losses import (SELECTORS, _noise_value, draw_noise_targets,
                     loss_value_and_grad)

HVP_STEP_SCALE = 1e-4  # h = scale * (1 + ||psi||)
RESIDUAL_FLOOR = 1e-9


def _frozen_loss_closure(params: DenoiserParams, selector: str, batch, schedule,
                         seed: int, beta: float):
    """(value_fn(theta), analytic_grad, base_value) with all randomness frozen."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if not hasattr(batch, "t"):
        x0, cids = batch
        batch = make_diffusion_batch(x0, cids, schedule, rng)
    targets = None
    if selector in ("noise", "immunize"):
        x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
        _, trace, _ = _forward(params, x_t, batch.concept_ids, batch.t, capture=True)
        targets = draw_noise_targets(trace, rng)

    def value_fn(theta: np.ndarray) -> float:
        p = replace(params, theta=theta)
        x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
        capture = selector in ("noise", "immunize")
        eps_hat, trace, _ = _forward(p, x_t, batch.concept_ids, batch.t, capture=capture)
        resid = eps_hat - batch.eps
        mse = float((resid ** 2).sum(axis=1).mean())
        if selector == "prior":
            return mse
        if selector == "max":
            return -mse
        noise_val, _ = _noise_value(trace, targets, "sum")
        if selector == "noise":
            return noise_val
        return -mse + beta * noise_val

    lv, grad = loss_value_and_grad(params, selector, batch, schedule,
                                   beta=beta, noise_targets=targets)
    return value_fn, grad, lv.value


def _fd_report(value_fn, grad, theta0, h, tol, coords, atol):
    max_rel, worst = 0.0, -1
    for i in coords:
        tp = theta0.copy()
        tp[i] += h
        tm = theta0.copy()
        tm[i] -= h
        fp, fm = value_fn(tp), value_fn(tm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss at perturbed coordinate {i}")
        fd = (fp - fm) / (2.0 * h)
        scale = max(abs(grad[i]), abs(fd))
        rel = 0.0 if scale <= atol else abs(grad[i] - fd) / scale
        if rel > max_rel:
            max_rel, worst = rel, i
    return {"max_rel_err": max_rel, "worst_coord": int(worst),
            "n_coords": len(coords), "passed": bool(max_rel < tol)}


def grad_check(selector: str, params: DenoiserParams, batch, schedule: NoiseSchedule,
               h: float = 1e-5, tol: float = 1e-4, *, seed: int = 0, beta: float = 1.0,
               max_coords: int | None = None, atol: float = 1e-10) -> dict:
    """Analytic vs central-difference gradient for one loss selector.

    Checks every coordinate unless ``max_coords`` caps it (a deterministic
    subsample; always includes the restricted tail). Coordinates where both
    gradients vanish below ``atol`` compare exactly.
    """
    if h <= 0:
        raise ValidationError("h must be positive")
    if selector not in SELECTORS:
        raise ValidationError(f"unknown loss selector {selector!r}")
    value_fn, grad, value = _frozen_loss_closure(params, selector, batch, schedule,
                                                 seed, beta)
    theta0 = params.theta.copy()
    n = theta0.size
    if max_coords is None or max_coords >= n:
        coords = list(range(n))
    else:
        # deterministic subsample, half from the restricted tail
        pick = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        n_tail = min(n - params.psi_start, max_coords // 2)
        tail = pick.choice(np.arange(params.psi_start, n), size=n_tail, replace=False)
        head = pick.choice(params.psi_start, size=max_coords - n_tail, replace=False)
        coords = sorted(set(int(i) for i in np.concatenate([head, tail])))
    report = _fd_report(value_fn, grad, theta0, h, tol, coords, atol)
    report.update({"selector": selector, "value": value, "h": h, "tol": tol})
    return report


def grad_check_custom(value_fn, grad_vec: np.ndarray, theta0: np.ndarray,
                      h: float = 1e-5, tol: float = 1e-4, atol: float = 1e-10) -> dict:
    """Same harness over an injected (value_fn, gradient) pair (test seam)."""
    if h <= 0:
        raise ValidationError("h must be positive")
    report = _fd_report(value_fn, grad_vec, theta0.copy(), h, tol,
                        list(range(theta0.size)), atol)
    report.update({"selector": "custom", "h": h, "tol": tol})
    return report


# ---------------------------------------------------------------------------
# Taylor structure of the alternating update

def _default_fields(params, safe_batch, malicious_batch, schedule, beta, seed):
    """Gradient fields with pinned randomness, as functions of theta.

    The immunization field re-derives its rng from the seed on every call, so
    evaluations at different theta share identical timestep/noise/target draws
    while the layer statistics are recomputed at the evaluated point.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    if not hasattr(safe_batch, "t"):
        x0, cids = safe_batch
        safe_batch = make_diffusion_batch(x0, cids, schedule, rng)
    if not hasattr(malicious_batch, "t"):
        x0, cids = malicious_batch
        malicious_batch = make_diffusion_batch(x0, cids, schedule, rng)
    target_seed = np.random.SeedSequence([seed, 7]).generate_state(1)[0]

    def grad_prior(theta):
        p = replace(params, theta=theta)
        _, g = loss_value_and_grad(p, "prior", safe_batch, schedule)
        return g

    def grad_immunize_psi(theta):
        p = replace(params, theta=theta)
        _, g = loss_value_and_grad(
            p, "immunize", malicious_batch, schedule,
            np.random.default_rng(np.random.SeedSequence([int(target_seed)])),
            beta=beta, restrict=True)
        return g

    return grad_prior, grad_immunize_psi


def directional_field_derivative(field, theta: np.ndarray, direction: np.ndarray,
                                 h: float, variant: str = "central") -> np.ndarray:
    """Matrix-free J_field(theta) @ direction by finite differences."""
    norm = float(np.linalg.norm(direction))
    if norm == 0.0:
        return np.zeros_like(field(theta))
    unit = direction / norm
    if variant == "central":
        diff = field(theta + h * unit) - field(theta - h * unit)
        return diff * (norm / (2.0 * h))
    if variant == "forward":
        diff = field(theta + h * unit) - field(theta)
        return diff * (norm / h)
    raise ValidationError(f"unknown variant {variant!r}")


def taylor_residual(params: DenoiserParams, safe_batch, malicious_batch,
                    schedule: NoiseSchedule, alpha_p: float, alpha_i: float,
                    beta: float, seed: int = 0, *, field_fns=None,
                    hvp_variant: str = "central") -> float:
    """Norm of (two-step restricted update) - (its second-order expansion).

    ``field_fns`` optionally injects (prior gradient field over theta,
    restricted immunization gradient field over theta) for probe losses.
    """
    if field_fns is None:
        grad_prior, grad_immunize = _default_fields(
            params, safe_batch, malicious_batch, schedule, beta, seed)
    else:
        grad_prior, grad_immunize = field_fns
    theta0 = params.theta
    psi0 = theta0[params.psi_start:]

    g_i_base = grad_immunize(theta0)
    if not np.array_equal(g_i_base, grad_immunize(theta0)):
        raise NumericalError("immunization gradient field is not replay-stable")

    g_p = grad_prior(theta0)
    theta1 = theta0 - alpha_p * g_p
    psi1 = theta1[params.psi_start:]
    psi2_exact = psi1 - alpha_i * grad_immunize(theta1)

    psi2_approx = psi0 - alpha_p * g_p[params.psi_start:] - alpha_i * g_i_base
    if alpha_p != 0.0:
        h = HVP_STEP_SCALE * (1.0 + float(np.linalg.norm(psi0)))
        hvp = directional_field_derivative(grad_immunize, theta0, g_p, h, hvp_variant)
        psi2_approx = psi2_approx + alpha_p * alpha_i * hvp
    residual = float(np.linalg.norm(psi2_exact - psi2_approx))
    if not np.isfinite(residual):
        raise NumericalError("non-finite Taylor residual")
    return residual


@dataclass(frozen=True)
class TaylorProbe:
    alpha_p_grid: tuple
    alpha_i: float
    residual_norms: tuple
    fitted_slope: float | None
    status: str  # "ok" | "floor" | "suspicious"


def taylor_scaling(params: DenoiserParams, safe_batch, malicious_batch,
                   schedule: NoiseSchedule, alpha_p_grid, alpha_i: float,
                   beta: float, seed: int = 0, *, field_fns=None) -> TaylorProbe:
    """Residuals across a decreasing alpha grid plus a log-log slope fit."""
    grid = [float(a) for a in alpha_p_grid]
    if len(grid) < 4:
        raise ValidationError("alpha grid needs >= 4 points")
    if any(b >= a for a, b in zip(grid, grid[1:])) or any(a <= 0 for a in grid):
        raise ValidationError("alpha grid must be positive and strictly decreasing")
    residuals = [taylor_residual(params, safe_batch, malicious_batch, schedule,
                                 a, alpha_i, beta, seed, field_fns=field_fns)
                 for a in grid]
    if all(r <= RESIDUAL_FLOOR for r in residuals):
        return TaylorProbe(tuple(grid), alpha_i, tuple(residuals), None, "floor")
    if any(r == 0.0 for r in residuals):
        return TaylorProbe(tuple(grid), alpha_i, tuple(residuals), None, "suspicious")
    slope = float(np.polyfit(np.log(grid), np.log(residuals), 1)[0])
    return TaylorProbe(tuple(grid), alpha_i, tuple(residuals), slope, "ok")
