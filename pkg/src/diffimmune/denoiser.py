"""Conditional denoiser with designated conditioning blocks and activation capture.

The network is a residual MLP trunk with sinusoidal time features, interleaved
with conditioning blocks. Each conditioning block is single-head cross-attention
from the hidden state onto the concept embedding as a single key/value token;
the softmax runs over that token plus an implicit zero-logit null sink, so the
attention gate stays query-dependent (a bare one-token softmax would be
identically 1 and leave the query projection dead).

Parameters live in one flat float64 vector ``theta``. The conditioning-block
weights and the concept embedding table occupy a contiguous tail of ``theta``;
that tail is the restricted index set used by the immunization outer loop.
Gradients are hand-derived reverse mode and validated against central finite
differences by the analysis module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor. ``embed_dim`` doubles as the attention width."""

    width: int = 128
    trunk_blocks: int = 4
    cond_blocks: int = 3
    embed_dim: int = 16
    n_concepts: int = 2

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValidationError("width must be an even integer >= 2")
        if self.trunk_blocks < 1 or self.cond_blocks < 1:
            raise ValidationError("block counts must be >= 1")
        if self.cond_blocks > self.trunk_blocks:
            raise ValidationError("cond_blocks may not exceed trunk_blocks")
        if self.embed_dim < 1 or self.n_concepts < 1:
            raise ValidationError("embed_dim and n_concepts must be >= 1")


def _layout(arch: Arch) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) parameter map.

    The restricted set (conditioning-block projection matrices plus the
    concept table) occupies a contiguous tail. Attention biases sit outside
    it: restricting to projections keeps upper-level damage tied to specific
    embeddings instead of shifting every token through shared bias terms.
    """
    w, e = arch.width, arch.embed_dim
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("w_in", (2, w)), ("w_t0", (w, w)), ("b0", (w,)),
    ]
    for i in range(arch.trunk_blocks):
        entries += [(f"t{i}_w1", (w, w)), (f"t{i}_wt", (w, w)), (f"t{i}_b1", (w,)),
                    (f"t{i}_w2", (w, w)), (f"t{i}_b2", (w,))]
    entries += [("w_out", (w, 2)), ("b_out", (2,))]
    for j in range(arch.cond_blocks):
        entries += [(f"c{j}_bq", (e,)), (f"c{j}_bk", (e,)),
                    (f"c{j}_bv", (e,)), (f"c{j}_bo", (w,))]
    for j in range(arch.cond_blocks):
        entries += [(f"c{j}_wq", (w, e)), (f"c{j}_wk", (e, e)),
                    (f"c{j}_wv", (e, e)), (f"c{j}_wo", (e, w))]
    entries.append(("table", (arch.n_concepts, e)))
    return entries


def param_count(arch: Arch) -> int:
    return sum(int(np.prod(shape)) for _, shape in _layout(arch))


def psi_count(arch: Arch) -> int:
    """Closed-form size of the restricted (conditioning) parameter set."""
    w, e = arch.width, arch.embed_dim
    per_block = w * e + e * e + e * e + e * w
    return arch.cond_blocks * per_block + arch.n_concepts * e


def _views(arch: Arch, theta: np.ndarray) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in _layout(arch):
        size = int(np.prod(shape))
        out[name] = theta[off:off + size].reshape(shape)
        off += size
    if off != theta.size:
        raise ValidationError(f"theta size {theta.size} does not match arch ({off})")
    return out


@dataclass(frozen=True)
class DenoiserParams:
    theta: np.ndarray
    arch: Arch

    @property
    def psi_start(self) -> int:
        return self.theta.size - psi_count(self.arch)

    @property
    def psi_index(self) -> np.ndarray:
        return np.arange(self.psi_start, self.theta.size)

    def views(self) -> dict[str, np.ndarray]:
        return _views(self.arch, self.theta)


@dataclass(frozen=True)
class LayerTrace:
    z: np.ndarray
    mu: float
    var: float


@dataclass(frozen=True)
class ActivationTrace:
    layers: tuple[LayerTrace, ...]
    labels: tuple[str, ...]


def _layer_trace(z: np.ndarray) -> LayerTrace:
    return LayerTrace(z=z, mu=float(z.mean()), var=float(z.var()))


RESIDUAL_INIT_DAMP = 0.1  # keeps deep residual stacks near-identity at init


def init_denoiser(arch: Arch, seed: int) -> DenoiserParams:
    """Variance-scaled (Glorot) init; embeddings unit normal; biases zero.

    Residual-branch output matrices are damped by a constant factor so the
    stacked blocks start close to identity, which keeps plain SGD stable.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    chunks = []
    for name, shape in _layout(arch):
        if name == "table":
            chunks.append(rng.standard_normal(shape))
        elif len(shape) == 2:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            if name.endswith("_w2") or name.endswith("_wo"):
                std *= RESIDUAL_INIT_DAMP
            chunks.append(std * rng.standard_normal(shape))
        else:
            chunks.append(np.zeros(shape))
    theta = np.concatenate([c.ravel() for c in chunks])
    return DenoiserParams(theta=theta, arch=arch)


def time_embedding(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, transformer-style frequencies."""
    half = width // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    ang = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    out = np.empty((len(t), width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class _Cache:
    """Intermediates from one forward pass, consumed by ``backward``."""

    __slots__ = ("x_t", "temb", "cids", "e", "trunk", "cond", "h_final")

    def __init__(self):
        self.trunk = []
        self.cond = []


def _forward(params: DenoiserParams, x_t: np.ndarray, concept_ids: np.ndarray,
             t: np.ndarray, capture=False, need_cache=False,
             theta: np.ndarray | None = None):
    """Returns (eps_hat, trace, cache).

    ``capture`` may be False, True (conditioning blocks) or "all" (trunk and
    conditioning blocks). Capture is observation only and never changes
    ``eps_hat``. ``theta`` overrides the stored parameter vector (same layout),
    used by the low-rank adapter path.
    """
    arch = params.arch
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 2 or x_t.shape[1] != 2:
        raise ValidationError(f"x_t must be n x 2, got {x_t.shape}")
    cids = np.asarray(concept_ids, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    if cids.shape != (x_t.shape[0],) or t.shape != (x_t.shape[0],):
        raise ValidationError("batch size mismatch between x_t, concept_ids, t")
    if np.any(t < 0):
        raise ValidationError("negative timestep")
    if np.any(cids < 0) or np.any(cids >= arch.n_concepts):
        raise ValidationError(f"unknown concept id (table holds {arch.n_concepts})")

    V = _views(arch, params.theta if theta is None else np.asarray(theta, dtype=float))
    cache = _Cache() if need_cache else None
    captured: list[tuple[str, np.ndarray]] = []
    cap_all = capture == "all"

    temb = time_embedding(t, arch.width)
    h = x_t @ V["w_in"] + temb @ V["w_t0"] + V["b0"]
    e = V["table"][cids]
    if need_cache:
        cache.x_t, cache.temb, cache.cids, cache.e = x_t, temb, cids, e
    scale = 1.0 / np.sqrt(arch.embed_dim)

    for i in range(arch.trunk_blocks):
        a = h @ V[f"t{i}_w1"] + temb @ V[f"t{i}_wt"] + V[f"t{i}_b1"]
        u = np.tanh(a)
        h_new = h + u @ V[f"t{i}_w2"] + V[f"t{i}_b2"]
        if need_cache:
            cache.trunk.append((h, u))
        h = h_new
        if cap_all:
            captured.append((f"trunk{i}", h))
        if i < arch.cond_blocks:
            j = i
            q = h @ V[f"c{j}_wq"] + V[f"c{j}_bq"]
            # bounded key/value projections keep the injected signal finite,
            # so loss maximization cannot blow the residual stream up
            k = np.tanh(e @ V[f"c{j}_wk"] + V[f"c{j}_bk"])
            v = np.tanh(e @ V[f"c{j}_wv"] + V[f"c{j}_bv"])
            s = (q * k).sum(axis=1) * scale
            # softmax over {concept token, zero-logit null sink}
            w = 1.0 / (1.0 + np.exp(-s))
            attn = w[:, None] * v
            h_new = h + attn @ V[f"c{j}_wo"] + V[f"c{j}_bo"]
            if need_cache:
                cache.cond.append((h, q, k, v, w, attn))
            h = h_new
            if capture:
                captured.append((f"cond{j}", h))

    if need_cache:
        cache.h_final = h
    eps_hat = h @ V["w_out"] + V["b_out"]
    trace = None
    if capture:
        trace = ActivationTrace(
            layers=tuple(_layer_trace(z) for _, z in captured),
            labels=tuple(name for name, _ in captured))
    return eps_hat, trace, cache


def forward(params: DenoiserParams, x_t: np.ndarray, concept_ids: np.ndarray,
            t: np.ndarray, capture=False):
    """Noise prediction eps_hat plus (optionally) the activation trace."""
    eps_hat, trace, _ = _forward(params, x_t, concept_ids, t, capture=capture)
    return eps_hat, trace


def backward(params: DenoiserParams, cache: _Cache, d_eps_hat: np.ndarray,
             d_cond: list[np.ndarray | None] | None = None,
             d_trunk: list[np.ndarray | None] | None = None,
             theta: np.ndarray | None = None) -> np.ndarray:
    """Reverse-mode gradient over the full flat parameter vector.

    ``d_eps_hat`` is the upstream gradient on the network output; ``d_cond``
    and ``d_trunk`` optionally inject gradients at each conditioning-block /
    trunk-block output (used by the representation-noising loss).
    """
    arch = params.arch
    V = _views(arch, params.theta if theta is None else np.asarray(theta, dtype=float))
    g = np.zeros(params.theta.size)
    G = _views(arch, g)
    scale = 1.0 / np.sqrt(arch.embed_dim)

    G["w_out"] += cache.h_final.T @ d_eps_hat
    G["b_out"] += d_eps_hat.sum(axis=0)
    dh = d_eps_hat @ V["w_out"].T

    for i in reversed(range(arch.trunk_blocks)):
        if i < arch.cond_blocks:
            j = i
            h_in, q, k, v, w, attn = cache.cond[j]
            if d_cond is not None and d_cond[j] is not None:
                dh = dh + d_cond[j]
            do = dh
            G[f"c{j}_wo"] += attn.T @ do
            G[f"c{j}_bo"] += do.sum(axis=0)
            dattn = do @ V[f"c{j}_wo"].T
            dw = (dattn * v).sum(axis=1)
            dv = w[:, None] * dattn * (1.0 - v * v)
            ds = dw * w * (1.0 - w)
            dq = ds[:, None] * k * scale
            dk = ds[:, None] * q * scale * (1.0 - k * k)
            G[f"c{j}_wq"] += h_in.T @ dq
            G[f"c{j}_bq"] += dq.sum(axis=0)
            G[f"c{j}_wk"] += cache.e.T @ dk
            G[f"c{j}_bk"] += dk.sum(axis=0)
            G[f"c{j}_wv"] += cache.e.T @ dv
            G[f"c{j}_bv"] += dv.sum(axis=0)
            de = dk @ V[f"c{j}_wk"].T + dv @ V[f"c{j}_wv"].T
            np.add.at(G["table"], cache.cids, de)
            dh = dh + dq @ V[f"c{j}_wq"].T
        if d_trunk is not None and d_trunk[i] is not None:
            dh = dh + d_trunk[i]
        h_in, u = cache.trunk[i]
        G[f"t{i}_w2"] += u.T @ dh
        G[f"t{i}_b2"] += dh.sum(axis=0)
        da = (dh @ V[f"t{i}_w2"].T) * (1.0 - u * u)
        G[f"t{i}_w1"] += h_in.T @ da
        G[f"t{i}_wt"] += cache.temb.T @ da
        G[f"t{i}_b1"] += da.sum(axis=0)
        dh = dh + da @ V[f"t{i}_w1"].T

    G["w_in"] += cache.x_t.T @ dh
    G["w_t0"] += cache.temb.T @ dh
    G["b0"] += dh.sum(axis=0)
    return g


def gradient(params: DenoiserParams, loss_selector: str, batch, schedule, rng,
             *, beta: float = 1.0, restrict_to_psi: bool = False,
             noise_targets=None) -> np.ndarray:
    """Gradient of a selected loss, over all of theta or restricted to psi.

    ``batch`` is either a DiffusionBatch (timesteps and noise already drawn) or
    an ``(x0, concept_ids)`` pair, in which case draws come from ``rng``. The
    restricted variant materializes only the psi coordinates.
    """
    from . import losses  # deferred: losses imports this module

    _, grad = losses.loss_value_and_grad(
        params, loss_selector, batch, schedule, rng, beta=beta,
        restrict=restrict_to_psi, noise_targets=noise_targets)
    return grad


def add_concept_token(params: DenoiserParams, init="random",
                      rng: np.random.Generator | None = None):
    """Append one embedding row (a fresh concept token); returns (params', id).

    ``init`` is "random" (requires ``rng``) or ``("copy-of", concept_id)``.
    Existing parameters are unchanged; the new row lands inside the restricted
    index set.
    """
    arch = params.arch
    e = arch.embed_dim
    if init == "random":
        if rng is None:
            raise ValidationError("random token init needs an rng")
        row = rng.standard_normal(e)
    elif isinstance(init, tuple) and len(init) == 2 and init[0] == "copy-of":
        src = int(init[1])
        if not 0 <= src < arch.n_concepts:
            raise ValidationError(f"copy-of references unknown concept id {src}")
        row = params.views()["table"][src].copy()
    else:
        raise ValidationError(f"bad token init {init!r}")
    new_arch = Arch(width=arch.width, trunk_blocks=arch.trunk_blocks,
                    cond_blocks=arch.cond_blocks, embed_dim=arch.embed_dim,
                    n_concepts=arch.n_concepts + 1)
    theta = np.concatenate([params.theta, row])
    return DenoiserParams(theta=theta, arch=new_arch), arch.n_concepts


def save_checkpoint(params: DenoiserParams, path) -> None:
    """Schema-versioned binary dump; round-trips bit-exactly."""
    arch_json = json.dumps({
        "width": params.arch.width, "trunk_blocks": params.arch.trunk_blocks,
        "cond_blocks": params.arch.cond_blocks, "embed_dim": params.arch.embed_dim,
        "n_concepts": params.arch.n_concepts}, sort_keys=True)
    np.savez(path,
             schema_version=np.int64(CHECKPOINT_SCHEMA_VERSION),
             arch=np.frombuffer(arch_json.encode(), dtype=np.uint8),
             theta=params.theta,
             psi_index=np.arange(params.psi_start, params.theta.size, dtype=np.int64))


def load_checkpoint(path) -> DenoiserParams:
    with np.load(path) as z:
        version = int(z["schema_version"])
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise ValidationError(
                f"checkpoint schema version {version} != {CHECKPOINT_SCHEMA_VERSION}")
        arch = Arch(**json.loads(z["arch"].tobytes().decode()))
        theta = z["theta"].copy()
        psi = z["psi_index"]
    params = DenoiserParams(theta=theta, arch=arch)
    if psi.size != psi_count(arch) or (psi.size and psi[0] != params.psi_start):
        raise ValidationError("checkpoint psi_index inconsistent with arch")
    return params
