"""Batch experiment driver.

Subcommands: make-data, pretrain, immunize, attack, eval, analyze. Every run
consumes one strictly validated JSON config (shared ``schema_version`` field),
writes its artifacts plus CSV tables for plotting, and finishes with a
manifest recording the resolved config, its hash, and all input/output paths.
Re-running a command with the manifest's config reproduces byte-identical
metric CSVs.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O failure.
All configuration flows through config files and flags; ``--threads`` bounds
BLAS parallelism (speed only) and ``--seed`` overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

CONFIG_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1

_MISSING = object()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def _verr(msg):
    from .errors import ValidationError
    raise ValidationError(msg)


def _take(d: dict, key: str, kinds, default=_MISSING, where: str = "config"):
    if key not in d:
        if default is _MISSING:
            _verr(f"{where}: missing required field {key!r}")
        return default
    v = d.pop(key)
    if kinds is bool:
        if not isinstance(v, bool):
            _verr(f"{where}.{key}: expected bool, got {type(v).__name__}")
    elif kinds is int:
        if isinstance(v, bool) or not isinstance(v, int):
            _verr(f"{where}.{key}: expected integer, got {v!r}")
    elif kinds is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            _verr(f"{where}.{key}: expected number, got {v!r}")
        v = float(v)
    elif kinds is not None and not isinstance(v, kinds):
        _verr(f"{where}.{key}: expected {kinds}, got {type(v).__name__}")
    return v


def _done(d: dict, where: str = "config"):
    if d:
        _verr(f"{where}: unknown field(s) {sorted(d)}")


def load_config(path, kind: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        _verr(f"{path}: malformed JSON at line {err.lineno}: {err.msg}")
    if not isinstance(doc, dict):
        _verr(f"{path}: config must be a JSON object")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        _verr(f"{path}: schema_version {version!r} != {CONFIG_SCHEMA_VERSION}")
    got = doc.get("kind")
    if got != kind:
        _verr(f"{path}: config kind {got!r}, command needs {kind!r}")
    return doc


def _resolve_schedule(cfg: dict, where="config.schedule"):
    from .diffusion import build_schedule
    sub = dict(_take(cfg, "schedule", dict, default={}))
    T = _take(sub, "T", int, default=200, where=where)
    b0 = _take(sub, "beta_start", float, default=1e-4, where=where)
    b1 = _take(sub, "beta_end", float, default=0.02, where=where)
    _done(sub, where)
    return build_schedule(T, b0, b1), {"T": T, "beta_start": b0, "beta_end": b1}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c) if isinstance(row, dict) else row[i])
                             for i, c in enumerate(columns)])


def write_manifest(out_dir, command, resolved_config, inputs, outputs, wall_time):
    for p in outputs:
        if not os.path.exists(p):
            raise OSError(f"declared output missing: {p}")
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "config": resolved_config,
        "config_hash": config_hash(resolved_config),
        "input_artifact_paths": [os.path.abspath(p) for p in inputs],
        "output_paths": [os.path.abspath(p) for p in outputs],
        "wall_time_s": wall_time,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_make_data(args) -> int:
    from .concepts import Concept, make_concept_set, save_dataset

    t0 = time.monotonic()
    cfg = load_config(args.config, "dataset")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    seed = _take(work, "seed", int)
    if args.seed is not None:
        seed = args.seed
    raw_concepts = _take(work, "concepts", list)
    counts = _take(work, "counts", dict)
    _done(work)

    concepts = []
    for i, c in enumerate(raw_concepts):
        c = dict(c)
        where = f"config.concepts[{i}]"
        concepts.append(Concept(
            id=_take(c, "id", int, where=where),
            name=_take(c, "name", str, where=where),
            family=_take(c, "family", str, where=where),
            rotation=_take(c, "rotation", float, default=0.0, where=where),
            scale=_take(c, "scale", float, default=1.0, where=where),
            offset=tuple(_take(c, "offset", list, default=[0.0, 0.0], where=where)),
            role=_take(c, "role", str, default="safe", where=where)))
        _done(c, where)

    dataset = make_concept_set(concepts, counts, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "dataset.json")
    save_dataset(dataset, out_path)
    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "dataset",
                "seed": seed, "concepts": cfg["concepts"], "counts": counts}
    write_manifest(args.out_dir, "make-data", resolved, [args.config], [out_path],
                   time.monotonic() - t0)
    print(f"wrote {out_path}")
    return 0


def _load_dataset(path):
    from .concepts import load_dataset
    return load_dataset(path)


def cmd_pretrain(args) -> int:
    from .concepts import split_arrays
    import numpy as np
    from .denoiser import Arch, init_denoiser, save_checkpoint
    from .immunize import fit_denoiser

    t0 = time.monotonic()
    cfg = load_config(args.config, "pretrain")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    seed = _take(work, "seed", int, default=0)
    if args.seed is not None:
        seed = args.seed
    arch_cfg = dict(_take(work, "arch", dict, default={}))
    steps = _take(work, "steps", int)
    lr = _take(work, "lr", float)
    batch_size = _take(work, "batch_size", int, default=128)
    concept_filter = _take(work, "concepts", (list, type(None)), default=None)
    schedule, sched_doc = _resolve_schedule(work)
    _done(work)

    dataset = _load_dataset(args.dataset)
    n_concepts = max(dataset.concept_ids) + 1
    arch = Arch(width=_take(arch_cfg, "width", int, default=128, where="config.arch"),
                trunk_blocks=_take(arch_cfg, "trunk_blocks", int, default=4, where="config.arch"),
                cond_blocks=_take(arch_cfg, "cond_blocks", int, default=3, where="config.arch"),
                embed_dim=_take(arch_cfg, "embed_dim", int, default=16, where="config.arch"),
                n_concepts=n_concepts)
    _done(arch_cfg, "config.arch")

    wanted = set(concept_filter) if concept_filter is not None else set(dataset.concept_ids)
    xs, cs = [], []
    for concept in dataset.concepts:
        if concept.id not in wanted:
            continue
        split = "D_M" if concept.role == "malicious" else "D_S"
        x, c = split_arrays(dataset, split, concept.id)
        xs.append(x)
        cs.append(c)
    x_all = np.vstack(xs) if xs else np.zeros((0, 2))
    c_all = np.concatenate(cs) if cs else np.zeros(0, dtype=np.int64)

    params = init_denoiser(arch, seed)
    params, history = fit_denoiser(params, x_all, c_all, schedule, steps, lr,
                                   batch_size, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.npz")
    save_checkpoint(params, ckpt)
    hist_path = os.path.join(args.out_dir, "history.csv")
    write_csv(hist_path, ("step", "loss"),
              [{"step": i, "loss": v} for i, v in enumerate(history)])
    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "pretrain",
                "seed": seed, "steps": steps, "lr": lr, "batch_size": batch_size,
                "concepts": concept_filter, "schedule": sched_doc,
                "arch": {"width": arch.width, "trunk_blocks": arch.trunk_blocks,
                         "cond_blocks": arch.cond_blocks, "embed_dim": arch.embed_dim}}
    write_manifest(args.out_dir, "pretrain", resolved, [args.config, args.dataset],
                   [ckpt, hist_path], time.monotonic() - t0)
    print(f"wrote {ckpt}")
    return 0


_HISTORY_COLUMNS = ("iteration", "level", "max", "noise", "prior", "total")


def _persist_run(out_dir, run, final_params):
    from .denoiser import save_checkpoint

    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    hist_path = os.path.join(out_dir, "history.csv")
    write_csv(hist_path, _HISTORY_COLUMNS, run.history)
    outputs.append(hist_path)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for it, p in run.checkpoints:
        path = os.path.join(ckpt_dir, f"ckpt_{it:06d}.npz")
        save_checkpoint(p, path)
        outputs.append(path)
    if final_params is not None:
        final = os.path.join(out_dir, "checkpoint.npz")
        save_checkpoint(final_params, final)
        outputs.insert(0, final)
    return outputs


def cmd_immunize(args) -> int:
    from .denoiser import load_checkpoint
    from .errors import NumericalError
    from .immunize import GiftConfig, immunize, immunize_naive

    t0 = time.monotonic()
    cfg = load_config(args.config, "immunize")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    naive = _take(work, "naive", bool, default=False)
    gift_cfg = dict(_take(work, "gift", dict, default={}))
    schedule, sched_doc = _resolve_schedule(work)
    _done(work)

    where = "config.gift"
    interleave = _take(gift_cfg, "interleave", list, default=[1, 1], where=where)
    gc = GiftConfig(
        alpha_inner=_take(gift_cfg, "alpha_inner", float, default=1e-3, where=where),
        alpha_outer=_take(gift_cfg, "alpha_outer", float, default=1e-3, where=where),
        beta=_take(gift_cfg, "beta", float, default=1.0, where=where),
        interleave=(int(interleave[0]), int(interleave[1])),
        total_iterations=_take(gift_cfg, "total_iterations", int, default=1000, where=where),
        batch_size=_take(gift_cfg, "batch_size", int, default=64, where=where),
        seed=args.seed if args.seed is not None
        else _take(gift_cfg, "seed", int, default=0, where=where),
        checkpoint_every=_take(gift_cfg, "checkpoint_every", int, default=100, where=where),
        noise_reduction=_take(gift_cfg, "noise_reduction", str, default="sum", where=where),
        noise_layers=_take(gift_cfg, "noise_layers", str, default="conditioning", where=where))
    if args.seed is not None:
        gift_cfg.pop("seed", None)
    _done(gift_cfg, where)

    dataset = _load_dataset(args.dataset)
    params = load_checkpoint(args.checkpoint)
    runner = immunize_naive if naive else immunize
    try:
        final, run = runner(params, dataset, schedule, gc)
    except NumericalError as err:
        partial = getattr(err, "partial_run", None)
        if partial is not None:
            _persist_run(args.out_dir, partial, None)
            print(f"numerical abort; partial artifacts in {args.out_dir}", file=sys.stderr)
        raise
    outputs = _persist_run(args.out_dir, run, final)
    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "immunize",
                "naive": naive, "schedule": sched_doc,
                "gift": {"alpha_inner": gc.alpha_inner, "alpha_outer": gc.alpha_outer,
                         "beta": gc.beta, "interleave": list(gc.interleave),
                         "total_iterations": gc.total_iterations,
                         "batch_size": gc.batch_size, "seed": gc.seed,
                         "checkpoint_every": gc.checkpoint_every,
                         "noise_reduction": gc.noise_reduction,
                         "noise_layers": gc.noise_layers}}
    snap = os.path.join(args.out_dir, "config.json")
    with open(snap, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append(snap)
    write_manifest(args.out_dir, "immunize", resolved,
                   [args.config, args.dataset, args.checkpoint], outputs,
                   time.monotonic() - t0)
    print(f"wrote {outputs[0]}")
    return 0


def _save_adapter(adapter, path):
    import numpy as np
    arrays = {"schema_version": np.int64(1), "scale": np.float64(adapter.scale),
              "rank": np.int64(adapter.rank)}
    for name, (a, b) in adapter.factors.items():
        arrays[f"A_{name}"] = a
        arrays[f"B_{name}"] = b
    np.savez(path, **arrays)


def cmd_attack(args) -> int:
    from .attacks import AttackConfig, attack_full, attack_lowrank, finetune_benign
    from .denoiser import load_checkpoint, save_checkpoint
    from .errors import SeparabilityError
    from .metrics import train_probe
    from .attacks import TRACE_COLUMNS

    t0 = time.monotonic()
    cfg = load_config(args.config, "attack")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    atk = dict(_take(work, "attack", dict))
    probe_cfg = dict(_take(work, "probe", dict, default={"enabled": True, "seed": 0}))
    safe_concept = _take(work, "safe_concept", (int, type(None)), default=None)
    schedule, sched_doc = _resolve_schedule(work)
    _done(work)

    where = "config.attack"
    ac = AttackConfig(
        method=_take(atk, "method", str, where=where),
        target_concept=_take(atk, "target_concept", int, where=where),
        steps=_take(atk, "steps", int, default=2000, where=where),
        lr=_take(atk, "lr", float, default=1e-3, where=where),
        rank=_take(atk, "rank", int, default=4, where=where),
        fresh_token=_take(atk, "fresh_token", bool, default=True, where=where),
        seed=args.seed if args.seed is not None
        else _take(atk, "seed", int, default=0, where=where),
        batch_size=_take(atk, "batch_size", int, default=64, where=where),
        eval_every=_take(atk, "eval_every", int, default=100, where=where),
        eval_samples=_take(atk, "eval_samples", int, default=256, where=where),
        adapter_scale=_take(atk, "adapter_scale", float, default=1.0, where=where))
    if args.seed is not None:
        atk.pop("seed", None)
    _done(atk, where)
    probe_enabled = _take(probe_cfg, "enabled", bool, default=True, where="config.probe")
    probe_seed = _take(probe_cfg, "seed", int, default=0, where="config.probe")
    _done(probe_cfg, "config.probe")

    dataset = _load_dataset(args.dataset)
    params = load_checkpoint(args.checkpoint)
    probe = None
    if probe_enabled:
        try:
            probe = train_probe(dataset, probe_seed)
        except SeparabilityError as err:
            print(f"probe unavailable: {err}", file=sys.stderr)

    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    if ac.method == "full_finetune":
        new_params, trace = attack_full(params, dataset, schedule, ac, probe, safe_concept)
        out_ckpt = os.path.join(args.out_dir, "checkpoint.npz")
        save_checkpoint(new_params, out_ckpt)
        outputs.append(out_ckpt)
    elif ac.method == "lowrank_adapter":
        adapter, trace = attack_lowrank(params, dataset, schedule, ac, probe, safe_concept)
        out_adp = os.path.join(args.out_dir, "adapter.npz")
        _save_adapter(adapter, out_adp)
        outputs.append(out_adp)
    else:
        new_params, trace = finetune_benign(params, dataset, schedule, ac, probe, safe_concept)
        out_ckpt = os.path.join(args.out_dir, "checkpoint.npz")
        save_checkpoint(new_params, out_ckpt)
        outputs.append(out_ckpt)

    trace_path = os.path.join(args.out_dir, "trace.csv")
    write_csv(trace_path, TRACE_COLUMNS, trace)
    outputs.append(trace_path)
    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "attack",
                "schedule": sched_doc, "safe_concept": safe_concept,
                "probe": {"enabled": probe_enabled, "seed": probe_seed},
                "attack": {"method": ac.method, "target_concept": ac.target_concept,
                           "steps": ac.steps, "lr": ac.lr, "rank": ac.rank,
                           "fresh_token": ac.fresh_token, "seed": ac.seed,
                           "batch_size": ac.batch_size, "eval_every": ac.eval_every,
                           "eval_samples": ac.eval_samples,
                           "adapter_scale": ac.adapter_scale}}
    write_manifest(args.out_dir, "attack", resolved,
                   [args.config, args.dataset, args.checkpoint], outputs,
                   time.monotonic() - t0)
    print(f"wrote {trace_path}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from .concepts import split_arrays
    from .denoiser import load_checkpoint
    from .diffusion import p_sample_loop
    from .errors import SeparabilityError, ValidationError
    from .metrics import (emit_report, heldout_denoise_loss, median_bandwidth,
                          mi_proxy, mmd, probe_accuracy, train_probe)

    t0 = time.monotonic()
    cfg = load_config(args.config, "eval")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    seed = _take(work, "seed", int, default=0)
    if args.seed is not None:
        seed = args.seed
    n_generate = _take(work, "n_generate", int, default=500)
    mi_bins = _take(work, "mi_bins", int, default=10)
    probe_cfg = dict(_take(work, "probe", dict, default={"enabled": True, "seed": 0}))
    concept_filter = _take(work, "concepts", (list, type(None)), default=None)
    split_by_role = dict(_take(work, "heldout_split_by_role", dict,
                               default={"malicious": "D_M", "safe": "D_A"}))
    schedule, sched_doc = _resolve_schedule(work)
    _done(work)
    probe_enabled = _take(probe_cfg, "enabled", bool, default=True, where="config.probe")
    probe_seed = _take(probe_cfg, "seed", int, default=0, where="config.probe")
    _done(probe_cfg, "config.probe")

    dataset = _load_dataset(args.dataset)
    probe = None
    if probe_enabled:
        try:
            probe = train_probe(dataset, probe_seed)
        except SeparabilityError as err:
            print(f"probe unavailable: {err}", file=sys.stderr)

    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "eval", "seed": seed,
                "n_generate": n_generate, "mi_bins": mi_bins,
                "probe": {"enabled": probe_enabled, "seed": probe_seed},
                "concepts": concept_filter, "heldout_split_by_role": split_by_role,
                "schedule": sched_doc}
    cfg_hash = config_hash(resolved)

    wanted = set(concept_filter) if concept_filter is not None else set(dataset.concept_ids)
    records = []
    for ckpt_path in args.checkpoint:
        params = load_checkpoint(ckpt_path)
        state = os.path.splitext(os.path.basename(ckpt_path))[0]
        if len(args.checkpoint) > 1:
            state = os.path.basename(os.path.dirname(os.path.abspath(ckpt_path))) + "/" + state
        for concept in dataset.concepts:
            if concept.id not in wanted:
                continue
            split = split_by_role.get(concept.role, "D_A")
            x_held, _ = split_arrays(dataset, split, concept.id)
            rec = {"model_state": state, "concept": concept.id,
                   "provenance": {"config_hash": cfg_hash,
                                  "checkpoint": os.path.abspath(ckpt_path)},
                   "heldout_denoise_loss": None, "probe_accuracy": None,
                   "mmd": None, "mi_proxy": None}
            if x_held.shape[0] > 0:
                rec["heldout_denoise_loss"] = heldout_denoise_loss(
                    params, dataset, split, concept.id, schedule, seed)
            if n_generate > 0:
                gen = p_sample_loop(params, concept.id, n_generate, schedule, seed)
                finite = gen[np.all(np.isfinite(gen), axis=1)]
                if probe is not None:
                    rec["probe_accuracy"] = probe_accuracy(probe, gen, concept.id)
                if finite.shape[0] >= 2 and x_held.shape[0] >= 2:
                    bw = median_bandwidth(finite, x_held)
                    rec["mmd"] = mmd(finite, x_held, bw)
            if x_held.shape[0] >= 10 * mi_bins:
                rec["mi_proxy"] = mi_proxy(params, x_held, concept.id, schedule, mi_bins)
            records.append(rec)

    if not records:
        raise ValidationError("no (checkpoint, concept) cells selected for evaluation")
    os.makedirs(args.out_dir, exist_ok=True)
    json_path, csv_path = emit_report(records, args.out_dir)
    write_manifest(args.out_dir, "eval", resolved,
                   [args.config, args.dataset] + list(args.checkpoint),
                   [json_path, csv_path], time.monotonic() - t0)
    print(f"wrote {json_path}")
    return 0


def cmd_analyze(args) -> int:
    import numpy as np
    from .analysis import taylor_scaling, grad_check
    from .concepts import split_arrays
    from .denoiser import load_checkpoint
    from .errors import NumericalError, ValidationError
    from .losses import SELECTORS

    t0 = time.monotonic()
    cfg = load_config(args.config, "analyze")
    work = dict(cfg)
    work.pop("schema_version"), work.pop("kind")
    seed = _take(work, "seed", int, default=0)
    if args.seed is not None:
        seed = args.seed
    batch_size = _take(work, "batch_size", int, default=8)
    gc_cfg = dict(_take(work, "grad_check", dict, default={}))
    ty_cfg = dict(_take(work, "taylor", dict, default={}))
    schedule, sched_doc = _resolve_schedule(work)
    _done(work)
    h = _take(gc_cfg, "h", float, default=1e-5, where="config.grad_check")
    tol = _take(gc_cfg, "tol", float, default=1e-4, where="config.grad_check")
    max_coords = _take(gc_cfg, "max_coords", (int, type(None)), default=400,
                       where="config.grad_check")
    _done(gc_cfg, "config.grad_check")
    alpha_grid = _take(ty_cfg, "alpha_grid", list,
                       default=[1e-2, 3e-3, 1e-3, 3e-4, 1e-4], where="config.taylor")
    alpha_i = _take(ty_cfg, "alpha_i", float, default=1e-3, where="config.taylor")
    beta = _take(ty_cfg, "beta", float, default=1.0, where="config.taylor")
    quadratic_probe = _take(ty_cfg, "quadratic_probe", bool, default=False,
                            where="config.taylor")
    _done(ty_cfg, "config.taylor")

    dataset = _load_dataset(args.dataset)
    params = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    x_m, c_m = split_arrays(dataset, "D_M")
    x_s, c_s = split_arrays(dataset, "D_S")
    if x_m.shape[0] == 0 or x_s.shape[0] == 0:
        raise ValidationError("analyze needs nonempty D_M and D_S splits")
    idx_m = rng.integers(0, x_m.shape[0], size=batch_size)
    idx_s = rng.integers(0, x_s.shape[0], size=batch_size)
    mal_batch = (x_m[idx_m], c_m[idx_m])
    safe_batch = (x_s[idx_s], c_s[idx_s])

    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    failures = []
    for sel in SELECTORS:
        batch = mal_batch if sel in ("max", "noise", "immunize") else safe_batch
        rep = grad_check(sel, params, batch, schedule, h, tol, seed=seed,
                         beta=beta, max_coords=max_coords)
        rows.append({"selector": sel, "value": rep["value"],
                     "max_rel_err": rep["max_rel_err"], "n_coords": rep["n_coords"],
                     "passed": rep["passed"]})
        if not rep["passed"]:
            failures.append(sel)
    gc_path = os.path.join(args.out_dir, "gradcheck.csv")
    write_csv(gc_path, ("selector", "value", "max_rel_err", "n_coords", "passed"), rows)

    field_fns = None
    if quadratic_probe:
        n = params.theta.size
        psi_n = n - params.psi_start
        a = np.random.default_rng(np.random.SeedSequence([seed, 3])).normal(size=(psi_n, psi_n))
        a = a @ a.T / psi_n
        field_fns = (lambda th: 2.0 * th, lambda th: a @ th[params.psi_start:])
    probe = taylor_scaling(params, safe_batch, mal_batch, schedule, alpha_grid,
                           alpha_i, beta, seed, field_fns=field_fns)
    ty_path = os.path.join(args.out_dir, "taylor.csv")
    write_csv(ty_path, ("alpha_p", "residual"),
              [{"alpha_p": a, "residual": r}
               for a, r in zip(probe.alpha_p_grid, probe.residual_norms)])
    status = probe.status
    if quadratic_probe and status == "floor":
        status = "exact"
    summary = {"gradcheck_passed": not failures, "gradcheck_failures": failures,
               "taylor_status": status, "taylor_slope": probe.fitted_slope}
    sum_path = os.path.join(args.out_dir, "summary.json")
    with open(sum_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    resolved = {"schema_version": CONFIG_SCHEMA_VERSION, "kind": "analyze",
                "seed": seed, "batch_size": batch_size, "schedule": sched_doc,
                "grad_check": {"h": h, "tol": tol, "max_coords": max_coords},
                "taylor": {"alpha_grid": [float(a) for a in alpha_grid],
                           "alpha_i": alpha_i, "beta": beta,
                           "quadratic_probe": quadratic_probe}}
    write_manifest(args.out_dir, "analyze", resolved,
                   [args.config, args.dataset, args.checkpoint],
                   [gc_path, ty_path, sum_path], time.monotonic() - t0)
    print(f"wrote {sum_path}")
    if failures:
        raise NumericalError(f"gradient check failed for: {', '.join(failures)}")
    return 0


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # validation problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffimmune",
                     description="Immunization lab: data, training, attacks, "
                                 "evaluation, and numerical analysis.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread bound (affects speed only)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, *, dataset=False, checkpoint=False, multi_checkpoint=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if dataset:
            p.add_argument("--dataset", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if multi_checkpoint:
            p.add_argument("--checkpoint", action="append", required=True)
        p.set_defaults(fn=fn)
        return p

    add("make-data", cmd_make_data)
    add("pretrain", cmd_pretrain, dataset=True)
    add("immunize", cmd_immunize, dataset=True, checkpoint=True)
    add("attack", cmd_attack, dataset=True, checkpoint=True)
    add("eval", cmd_eval, dataset=True, multi_checkpoint=True)
    add("analyze", cmd_analyze, dataset=True, checkpoint=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    from .errors import NumericalError, ValidationError
    try:
        return args.fn(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
