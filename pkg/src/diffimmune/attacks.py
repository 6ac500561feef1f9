"""Fine-tuning attacks and benign adaptation against a released checkpoint.

Three methods share one SGD loop over the target concept's adaptation split
``D_A``:

* ``full_finetune`` -- the DreamBooth analog: optionally registers a fresh
  concept token, then fine-tunes every parameter on (x, token) pairs. The
  class-prior term of the original recipe has no analog here (there is no
  class prior in the toy data) and is deliberately omitted.
* ``lowrank_adapter`` -- base weights frozen; trains zero-initialized low-rank
  factors on the conditioning-block q/k/v/output projections only.
* ``benign_pi`` -- post-release fine-tune on a *safe* concept under its own
  label; rejected for malicious targets.

Every run emits per-``eval_every``-step metric snapshots (denoising loss on
D_A, probe accuracy and MMD of generations, safe-concept drift), all seeded
from the attack config so paired defended/undefended runs differ only through
their starting checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .concepts import ConceptDataset, split_arrays
from .denoiser import DenoiserParams, add_concept_token, backward, _forward, _views
from .diffusion import NoiseSchedule, make_diffusion_batch, p_sample_loop, q_sample
from .errors import NumericalError, ValidationError
from .immunize import _inner
from . import metrics as _metrics

METHODS = ("full_finetune", "lowrank_adapter", "benign_pi")

TRACE_COLUMNS = ("step", "denoise_loss_DA", "probe_acc", "mmd", "safe_loss")


@dataclass(frozen=True)
class AttackConfig:
    method: str
    target_concept: int
    steps: int = 2000
    lr: float = 1e-3
    rank: int = 4
    fresh_token: bool = True
    seed: int = 0
    batch_size: int = 64
    eval_every: int = 100
    eval_samples: int = 256
    adapter_scale: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown attack method {self.method!r}")
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValidationError("bad steps/lr/batch_size")
        if self.method == "lowrank_adapter" and self.rank < 1:
            raise ValidationError("rank must be >= 1 for lowrank_adapter")
        if self.eval_every < 1 or self.eval_samples < 0:
            raise ValidationError("bad eval cadence")


@dataclass
class AdapterParams:
    """Low-rank factors per targeted matrix; effective weight = W + scale * A @ B.

    A has shape (out, rank) and starts at zero, so a fresh adapter reproduces
    the frozen base exactly.
    """

    factors: dict = field(default_factory=dict)  # name -> (A, B)
    scale: float = 1.0
    rank: int = 1

    def param_count(self) -> int:
        return sum(a.size + b.size for a, b in self.factors.values())


def _adapter_targets(arch) -> list[str]:
    names = []
    for j in range(arch.cond_blocks):
        names += [f"c{j}_wq", f"c{j}_wk", f"c{j}_wv", f"c{j}_wo"]
    return names


def init_adapter(params: DenoiserParams, rank: int, scale: float,
                 rng: np.random.Generator) -> AdapterParams:
    factors = {}
    for name in _adapter_targets(params.arch):
        w = params.views()[name]  # stored (in, out)
        n_in, n_out = w.shape
        if rank > min(n_in, n_out):
            raise ValidationError(f"rank {rank} exceeds dims of {name} {w.shape}")
        a = np.zeros((n_out, rank))
        b = rng.standard_normal((rank, n_in)) / np.sqrt(n_in)
        factors[name] = (a, b)
    return AdapterParams(factors=factors, scale=scale, rank=rank)


def adapter_theta(base: DenoiserParams, adapter: AdapterParams) -> np.ndarray:
    """Base parameter vector with the low-rank deltas merged in."""
    theta = base.theta.copy()
    views = _views(base.arch, theta)
    for name, (a, b) in adapter.factors.items():
        views[name] += adapter.scale * (a @ b).T  # stored layout is (in, out)
    return theta


def adapter_params(base: DenoiserParams, adapter: AdapterParams) -> DenoiserParams:
    return replace(base, theta=adapter_theta(base, adapter))


def _eval_snapshot(step, gen_params, x_da, train_id, target_concept, dataset,
                   schedule, cfg, probe, safe_concept):
    """One metrics row; all randomness pinned to the attack seed."""
    eval_seed = np.random.SeedSequence([cfg.seed, 101]).generate_state(1)[0]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 102]))
    cids = np.full(x_da.shape[0], train_id, dtype=np.int64)
    batch = make_diffusion_batch(x_da, cids, schedule, rng)
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    eps_hat, _, _ = _forward(gen_params, x_t, cids, batch.t)
    da_loss = float(((eps_hat - batch.eps) ** 2).sum(axis=1).mean())

    probe_acc = mmd_val = safe_loss = None
    if cfg.eval_samples > 0:
        gen = p_sample_loop(gen_params, train_id, cfg.eval_samples, schedule,
                            seed=int(eval_seed))
        if probe is not None:
            probe_acc = _metrics.probe_accuracy(probe, gen, target_concept)
        finite = gen[np.all(np.isfinite(gen), axis=1)]
        if finite.shape[0] >= 2:
            bw = _metrics.median_bandwidth(finite, x_da)
            mmd_val = _metrics.mmd(finite, x_da, bw)
    if safe_concept is not None:
        safe_loss = _metrics.heldout_denoise_loss(
            gen_params, dataset, "D_S", safe_concept, schedule,
            seed=int(np.random.SeedSequence([cfg.seed, 103]).generate_state(1)[0]))
    return {"step": step, "denoise_loss_DA": da_loss, "probe_acc": probe_acc,
            "mmd": mmd_val, "safe_loss": safe_loss}


def _adaptation_data(dataset: ConceptDataset, cfg: AttackConfig):
    dataset.concept_by_id(cfg.target_concept)
    x_da, _ = split_arrays(dataset, "D_A", cfg.target_concept)
    if x_da.shape[0] == 0:
        raise ValidationError(f"concept {cfg.target_concept} has no D_A samples")
    return x_da


def attack_full(params: DenoiserParams, dataset: ConceptDataset,
                schedule: NoiseSchedule, cfg: AttackConfig,
                probe=None, safe_concept: int | None = None):
    """DreamBooth-analog full fine-tune on D_A; returns (params', trace rows)."""
    if cfg.method != "full_finetune":
        raise ValidationError(f"attack_full got method {cfg.method!r}")
    x_da = _adaptation_data(dataset, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    if cfg.fresh_token:
        params, train_id = add_concept_token(params, "random", rng)
    else:
        train_id = cfg.target_concept

    trace = []

    def snap(step, p):
        trace.append(_eval_snapshot(step, p, x_da, train_id, cfg.target_concept,
                                    dataset, schedule, cfg, probe, safe_concept))

    snap(0, params)
    cids = np.full(cfg.batch_size, train_id, dtype=np.int64)
    for step in range(cfg.steps):
        idx = rng.integers(0, x_da.shape[0], size=cfg.batch_size)
        params, _ = _inner(params, (x_da[idx], cids), schedule, cfg.lr, rng)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            snap(step + 1, params)
    return params, trace


def attack_lowrank(params: DenoiserParams, dataset: ConceptDataset,
                   schedule: NoiseSchedule, cfg: AttackConfig,
                   probe=None, safe_concept: int | None = None):
    """Low-rank adapter attack; base frozen, returns (adapter, trace rows)."""
    if cfg.method != "lowrank_adapter":
        raise ValidationError(f"attack_lowrank got method {cfg.method!r}")
    x_da = _adaptation_data(dataset, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    if cfg.fresh_token:
        params, train_id = add_concept_token(params, "random", rng)
    else:
        train_id = cfg.target_concept
    adapter = init_adapter(params, cfg.rank, cfg.adapter_scale, rng)

    trace = []

    def snap(step, adp):
        trace.append(_eval_snapshot(step, adapter_params(params, adp), x_da, train_id,
                                    cfg.target_concept, dataset, schedule, cfg,
                                    probe, safe_concept))

    snap(0, adapter)
    views_of = _views  # local alias
    cids = np.full(cfg.batch_size, train_id, dtype=np.int64)
    for step in range(cfg.steps):
        idx = rng.integers(0, x_da.shape[0], size=cfg.batch_size)
        theta_eff = adapter_theta(params, adapter)
        batch = make_diffusion_batch(x_da[idx], cids, schedule, rng)
        x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
        eps_hat, _, cache = _forward(params, x_t, cids, batch.t, need_cache=True,
                                     theta=theta_eff)
        resid = eps_hat - batch.eps
        g = backward(params, cache, 2.0 * resid / cfg.batch_size, theta=theta_eff)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite adapter gradient")
        g_views = views_of(params.arch, g)
        new_factors = {}
        for name, (a, b) in adapter.factors.items():
            dw = g_views[name].T  # to (out, in)
            da = adapter.scale * dw @ b.T
            db = adapter.scale * a.T @ dw
            new_factors[name] = (a - cfg.lr * da, b - cfg.lr * db)
        adapter = replace(adapter, factors=new_factors)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            snap(step + 1, adapter)
    return adapter, trace


def finetune_benign(params: DenoiserParams, dataset: ConceptDataset,
                    schedule: NoiseSchedule, cfg: AttackConfig,
                    probe=None, safe_concept: int | None = None):
    """Post-release benign fine-tune on a safe concept; returns (params', trace)."""
    if cfg.method != "benign_pi":
        raise ValidationError(f"finetune_benign got method {cfg.method!r}")
    concept = dataset.concept_by_id(cfg.target_concept)
    if concept.role != "safe":
        raise ValidationError(
            f"benign fine-tune target {cfg.target_concept} has role {concept.role!r}")
    x_da = _adaptation_data(dataset, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    train_id = cfg.target_concept

    trace = []

    def snap(step, p):
        trace.append(_eval_snapshot(step, p, x_da, train_id, cfg.target_concept,
                                    dataset, schedule, cfg, probe, safe_concept))

    snap(0, params)
    cids = np.full(cfg.batch_size, train_id, dtype=np.int64)
    for step in range(cfg.steps):
        idx = rng.integers(0, x_da.shape[0], size=cfg.batch_size)
        params, _ = _inner(params, (x_da[idx], cids), schedule, cfg.lr, rng)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            snap(step + 1, params)
    return params, trace
