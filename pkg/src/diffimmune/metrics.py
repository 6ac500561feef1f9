"""Desk-scale evaluation metrics.

The image-space metrics used for full-scale text-to-image evaluation have no
analog on 2-D point clouds, so this lab substitutes:

* prompt/concept alignment  -> held-out accuracy of a supervised concept probe,
* perceptual / feature similarity -> kernel MMD between sample sets,
* explicit-content rate -> probe accuracy against the designated malicious
  concept,
* plus a histogram mutual-information proxy between inputs and conditioning
  activations (diagnostic only, never a gate).

Every emitted report carries this substitution map.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .concepts import ConceptDataset, split_arrays
from .diffusion import DiffusionBatch, NoiseSchedule
from .errors import SeparabilityError, ValidationError
from .losses import _denoise_forward, _run_forward

REPORT_SCHEMA_VERSION = 1

METRIC_SUBSTITUTIONS = {
    "prompt_alignment": "probe_accuracy",
    "perceptual_similarity": "mmd",
    "feature_similarity": "mmd",
    "explicit_content_rate": "probe_accuracy_vs_malicious_concept",
}

METRIC_COLUMNS = ("heldout_denoise_loss", "probe_accuracy", "mmd", "mi_proxy")


# ---------------------------------------------------------------------------
# concept probe

BACKGROUND_CLASS = -1


@dataclass(frozen=True)
class ProbeClassifier:
    """Multinomial logistic regression on quadratic features of the plane.

    Trained with an extra diffuse background class (id -1) covering the data's
    bounding box, so off-distribution points are not attributed to any
    concept. Held-out accuracy is measured on the concept classes only.
    """

    classes: np.ndarray          # concept ids, sorted, plus the background id
    weights: np.ndarray          # n_classes x n_features
    feature_mean: np.ndarray
    feature_std: np.ndarray
    seed: int
    heldout_accuracy: float


def _probe_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.column_stack([
        np.ones(x.shape[0]), x[:, 0], x[:, 1],
        x[:, 0] ** 2, x[:, 1] ** 2, x[:, 0] * x[:, 1]])


def _softmax_ce_and_grad(w_flat, feats, labels, n_classes, l2, sample_w):
    n, f = feats.shape
    w = w_flat.reshape(n_classes, f)
    logits = feats @ w.T
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    p = exp / exp.sum(axis=1, keepdims=True)
    ce = -float(sample_w @ np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    ce += 0.5 * l2 * float(w_flat @ w_flat)
    d = p
    d[np.arange(n), labels] -= 1.0
    grad = (d * sample_w[:, None]).T @ feats + l2 * w
    return ce, grad.ravel()


def train_probe(dataset: ConceptDataset, seed: int, *, min_accuracy: float = 0.95,
                heldout_frac: float = 0.25, l2: float = 1e-4,
                background_frac: float = 0.5) -> ProbeClassifier:
    """Fit the concept probe on all dataset samples; fails below the accuracy floor."""
    if len(dataset.concepts) < 2:
        raise ValidationError("probe needs >= 2 concepts")
    x = np.array([s.x for s in dataset.samples], dtype=float)
    classes = np.array(sorted(dataset.concept_ids) + [BACKGROUND_CLASS], dtype=np.int64)
    class_pos = {cid: i for i, cid in enumerate(classes)}
    labels = np.array([class_pos[s.concept] for s in dataset.samples], dtype=np.int64)
    if x.shape[0] < 4:
        raise ValidationError("not enough samples to train a probe")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(x.shape[0])
    n_hold = max(1, int(round(heldout_frac * x.shape[0])))
    hold, train = order[:n_hold], order[n_hold:]

    # diffuse background points over an enlarged bounding box (train-only)
    n_bg = max(8, int(round(background_frac * len(train))))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.maximum(hi - lo, 1.0)
    bg = rng.uniform(lo - 0.25 * span, hi + 0.25 * span, size=(n_bg, 2))
    x_train = np.vstack([x[train], bg])
    y_train = np.concatenate([labels[train],
                              np.full(n_bg, class_pos[BACKGROUND_CLASS], dtype=np.int64)])

    feats_train = _probe_features(x_train)
    mean = feats_train.mean(axis=0)
    std = np.maximum(feats_train.std(axis=0), 1e-12)

    # balanced class weights so small concepts get regions of their own
    counts = np.bincount(y_train, minlength=len(classes)).astype(float)
    sample_w = 1.0 / (counts[y_train] * len(classes))

    w0 = np.zeros(len(classes) * feats_train.shape[1])
    res = minimize(_softmax_ce_and_grad, w0, jac=True, method="L-BFGS-B",
                   args=((feats_train - mean) / std, y_train, len(classes), l2, sample_w),
                   options={"maxiter": 500})
    w = res.x.reshape(len(classes), feats_train.shape[1])
    feats_hold = (_probe_features(x[hold]) - mean) / std
    pred = np.argmax(feats_hold @ w.T, axis=1)
    acc = float((pred == labels[hold]).mean())
    if acc < min_accuracy:
        raise SeparabilityError(
            f"probe held-out accuracy {acc:.3f} below floor {min_accuracy}")
    return ProbeClassifier(classes=classes, weights=w, feature_mean=mean,
                           feature_std=std, seed=seed, heldout_accuracy=acc)


def probe_predict(probe: ProbeClassifier, x: np.ndarray) -> np.ndarray:
    feats = (_probe_features(x) - probe.feature_mean) / probe.feature_std
    return probe.classes[np.argmax(feats @ probe.weights.T, axis=1)]


def probe_accuracy(probe: ProbeClassifier, samples: np.ndarray, target: int) -> float:
    """Fraction of samples the probe assigns to the target concept.

    Non-finite points (a possible pathology of broken generators) never count
    as the target.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] == 0:
        raise ValidationError("empty sample set")
    finite = np.all(np.isfinite(samples), axis=1)
    hits = np.zeros(samples.shape[0], dtype=bool)
    if finite.any():
        hits[finite] = probe_predict(probe, samples[finite]) == target
    return float(hits.mean())


# ---------------------------------------------------------------------------
# kernel two-sample distance

def median_bandwidth(a: np.ndarray, b: np.ndarray | None = None) -> float:
    """Median pairwise distance over the pooled points (the usual heuristic)."""
    pts = np.vstack([a, b]) if b is not None else np.asarray(a)
    d = cdist(pts, pts)
    iu = np.triu_indices(len(pts), k=1)
    med = float(np.median(d[iu])) if iu[0].size else 1.0
    return max(med, 1e-12)


def mmd(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: float) -> float:
    """Unbiased squared MMD with a Gaussian kernel exp(-||x-y||^2 / (2 bw^2))."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if bandwidth <= 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise ValidationError("unbiased MMD needs >= 2 points per set")
    gamma = 1.0 / (2.0 * bandwidth ** 2)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


# ---------------------------------------------------------------------------
# denoising-loss metric

def eval_batch(dataset: ConceptDataset, split: str, concept: int,
               schedule: NoiseSchedule, seed: int, n_draws: int = 8) -> DiffusionBatch:
    """The deterministic evaluation batch behind ``heldout_denoise_loss``."""
    x, cids = split_arrays(dataset, split, concept)
    if x.shape[0] == 0:
        raise ValidationError(f"no samples for concept {concept} in split {split}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    x_rep = np.tile(x, (n_draws, 1))
    c_rep = np.tile(cids, n_draws)
    t = rng.integers(0, schedule.T, size=x_rep.shape[0])
    eps = rng.standard_normal(x_rep.shape)
    return DiffusionBatch(x0=x_rep, concept_ids=c_rep, t=t, eps=eps)


def heldout_denoise_loss(params, dataset: ConceptDataset, split: str, concept: int,
                         schedule: NoiseSchedule, seed: int, n_draws: int = 8) -> float:
    """Monte-Carlo denoising loss on one concept's split, fixed draws per seed."""
    batch = eval_batch(dataset, split, concept, schedule, seed, n_draws)
    mse, _, _, _ = _denoise_forward(params, batch, schedule)
    return mse


# ---------------------------------------------------------------------------
# mutual-information diagnostic

def histogram_mi(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    """Plug-in mutual information of two 1-D variables from a 2-D histogram."""
    h, _, _ = np.histogram2d(a, b, bins=bins)
    n = h.sum()
    if n == 0:
        raise ValidationError("empty histogram")
    p = h / n
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    mi = float((p[mask] * np.log(p[mask] / (px @ py)[mask])).sum())
    return max(mi, 0.0)


def mi_proxy(params, samples: np.ndarray, concept: int, schedule: NoiseSchedule,
             bins: int) -> float:
    """Histogram MI between a 1-D input projection and a 1-D projection of the
    last conditioning-block activation on a clean (t=0) pass. Diagnostic only."""
    samples = np.asarray(samples, dtype=float)
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    if samples.shape[0] < 10 * bins:
        raise ValidationError(f"need >= {10 * bins} samples for {bins} bins")
    t = np.zeros(samples.shape[0], dtype=np.int64)
    cids = np.full(samples.shape[0], concept, dtype=np.int64)
    _, trace, _ = _run_forward(params, samples, cids, t, capture=True, need_cache=False)
    if trace is None or not trace.layers:
        raise ValidationError("no activation trace captured")
    z = trace.layers[-1].z
    return histogram_mi(samples.mean(axis=1), z.mean(axis=1), bins)


# ---------------------------------------------------------------------------
# report emission

@dataclass(frozen=True)
class MetricsReport:
    records: tuple
    substitutions: dict
    schema_version: int = REPORT_SCHEMA_VERSION


def _check_record(rec: dict) -> None:
    for key in ("model_state", "concept", "provenance"):
        if key not in rec:
            raise ValidationError(f"metric record missing {key!r}")
    for key in METRIC_COLUMNS:
        v = rec.get(key)
        if v is not None and not np.isfinite(v):
            raise ValidationError(f"non-finite metric {key}={v!r}")


def emit_report(records: list[dict], out_dir) -> tuple[str, str]:
    """Write report.json + metrics.csv; returns both paths.

    Absent metrics are recorded as null (JSON) / "NA" (CSV), never as zero.
    """
    import os

    if not records:
        raise ValidationError("no metric records to report")
    for rec in records:
        _check_record(rec)
    os.makedirs(out_dir, exist_ok=True)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "metric_substitutions": METRIC_SUBSTITUTIONS,
        "records": [
            {**{k: rec.get(k) for k in ("model_state", "concept", "provenance")},
             **{k: rec.get(k) for k in METRIC_COLUMNS}}
            for rec in records
        ],
    }
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("model_state", "concept") + METRIC_COLUMNS)
        for rec in records:
            writer.writerow(
                [rec["model_state"], rec["concept"]]
                + [("NA" if rec.get(k) is None else repr(float(rec[k])))
                   for k in METRIC_COLUMNS])
    return json_path, csv_path


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValidationError("report schema version mismatch")
    return report
