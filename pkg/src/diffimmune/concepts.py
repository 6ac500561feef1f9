"""Synthetic 2-D concept datasets with disjoint defense / attack / prior splits.

A "concept" is a parametric point-cloud family (blob, ring, moons, spiral,
grid) placed in the plane by a rotation/scale/offset transform. Datasets carry
three split labels:

* ``D_M`` -- defense split, consumed by the immunization outer loop,
* ``D_A`` -- adaptation split, consumed by fine-tuning attacks and held-out
  evaluation,
* ``D_S`` -- safe/prior split, consumed by the preservation inner loop.

Every sample's random stream is derived from ``(seed, split, concept, index)``
so generation is deterministic and order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

FAMILIES = ("gaussian-blobs", "ring", "two-moons", "spiral", "grid")
SPLITS = ("D_M", "D_A", "D_S")
ROLES = ("malicious", "safe")

# splits each role may populate
_ROLE_SPLITS = {"malicious": ("D_M", "D_A"), "safe": ("D_S", "D_A")}
_SPLIT_CODE = {s: i for i, s in enumerate(SPLITS)}

DATASET_SCHEMA_VERSION = 1

# family shape parameters (fixed; transforms supply placement and size)
RING_SIGMA = 0.1     # radial std around unit radius
MOON_SIGMA = 0.1     # isotropic jitter on the two unit moons
SPIRAL_TURNS = 1.5   # spiral angle runs over [0, SPIRAL_TURNS * 2*pi]
SPIRAL_SIGMA = 0.05
GRID_K = 3           # grid is GRID_K x GRID_K over [-1, 1]^2
GRID_SIGMA = 0.05


@dataclass(frozen=True)
class Concept:
    """One labeled point-cloud family placed in the plane."""

    id: int
    name: str
    family: str
    rotation: float = 0.0
    scale: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)
    role: str = "safe"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.rotation < 2.0 * math.pi:
            raise ValidationError(f"rotation must lie in [0, 2*pi), got {self.rotation}")
        if len(self.offset) != 2:
            raise ValidationError("offset must be a 2-vector")


@dataclass(frozen=True)
class Sample:
    x: tuple[float, float]
    concept: int
    split: str


@dataclass(frozen=True)
class ConceptDataset:
    concepts: tuple[Concept, ...]
    samples: tuple[Sample, ...]
    seed: int
    counts: dict = field(default_factory=dict)

    def concept_by_id(self, concept_id: int) -> Concept:
        for c in self.concepts:
            if c.id == concept_id:
                return c
        raise ValidationError(f"unknown concept id {concept_id}")

    @property
    def concept_ids(self) -> list[int]:
        return [c.id for c in self.concepts]


def _rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _draw_base(family: str, rng: np.random.Generator) -> np.ndarray:
    """One point from the unit-placement version of the family."""
    if family == "gaussian-blobs":
        return rng.standard_normal(2)
    if family == "ring":
        phi = rng.uniform(0.0, 2.0 * math.pi)
        r = 1.0 + RING_SIGMA * rng.standard_normal()
        return np.array([r * math.cos(phi), r * math.sin(phi)])
    if family == "two-moons":
        moon = rng.integers(2)
        theta = rng.uniform(0.0, math.pi)
        if moon == 0:
            base = np.array([math.cos(theta), math.sin(theta)])
        else:
            base = np.array([1.0 - math.cos(theta), 0.5 - math.sin(theta)])
        return base + MOON_SIGMA * rng.standard_normal(2)
    if family == "spiral":
        span = SPIRAL_TURNS * 2.0 * math.pi
        theta = rng.uniform(0.0, span)
        r = theta / span
        base = np.array([r * math.cos(theta), r * math.sin(theta)])
        return base + SPIRAL_SIGMA * rng.standard_normal(2)
    if family == "grid":
        ij = rng.integers(GRID_K, size=2)
        if GRID_K > 1:
            center = -1.0 + 2.0 * ij / (GRID_K - 1)
        else:
            center = np.zeros(2)
        return center + GRID_SIGMA * rng.standard_normal(2)
    raise ValidationError(f"unknown family {family!r}")


def _apply_transform(concept: Concept, base: np.ndarray) -> np.ndarray:
    rot = _rotation_matrix(concept.rotation)
    return np.asarray(concept.offset, dtype=float) + concept.scale * (base @ rot.T)


def family_moments(concept: Concept) -> tuple[np.ndarray, float]:
    """Closed-form (mean, covariance trace) of a concept's sampling distribution.

    Used by distributional sanity checks; the trace is rotation invariant so
    only scale enters the second moment.
    """
    fam = concept.family
    if fam == "gaussian-blobs":
        mean, second = np.zeros(2), 2.0
    elif fam == "ring":
        mean, second = np.zeros(2), 1.0 + RING_SIGMA**2
    elif fam == "two-moons":
        mean = np.array([0.5, 0.25])
        second = 1.0 + 5.0 / 8.0 - 1.0 / math.pi + 2.0 * MOON_SIGMA**2
    elif fam == "spiral":
        span = SPIRAL_TURNS * 2.0 * math.pi
        # E[theta cos theta] and E[theta sin theta] over theta ~ U[0, span]
        int_cos = math.cos(span) + span * math.sin(span) - 1.0
        int_sin = math.sin(span) - span * math.cos(span)
        mean = np.array([int_cos, int_sin]) / span**2
        second = 1.0 / 3.0 + 2.0 * SPIRAL_SIGMA**2
    elif fam == "grid":
        if GRID_K > 1:
            centers = -1.0 + 2.0 * np.arange(GRID_K) / (GRID_K - 1)
        else:
            centers = np.zeros(1)
        mean = np.zeros(2)
        second = 2.0 * (float(np.mean(centers**2)) + GRID_SIGMA**2)
    else:
        raise ValidationError(f"unknown family {fam!r}")
    trace = second - float(mean @ mean)
    rot = _rotation_matrix(concept.rotation)
    mean_t = np.asarray(concept.offset, dtype=float) + concept.scale * (rot @ mean)
    return mean_t, concept.scale**2 * trace


def _sample_rng(seed: int, split: str, concept_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], concept_id, index]))


def draw_concept_points(concept: Concept, n: int, seed: int, split: str = "D_A",
                        index_offset: int = 0) -> np.ndarray:
    """n points from a concept's distribution using per-item derived streams.

    ``index_offset`` selects a fresh block of streams, so callers can draw
    evaluation sets guaranteed disjoint from any dataset split.
    """
    pts = np.empty((n, 2))
    for i in range(n):
        rng = _sample_rng(seed, split, concept.id, index_offset + i)
        pts[i] = _apply_transform(concept, _draw_base(concept.family, rng))
    return pts


def _validate_counts(counts: dict) -> dict[str, dict[str, int]]:
    if not isinstance(counts, dict) or not counts:
        raise ValidationError("counts must be a non-empty mapping role -> split -> count")
    norm: dict[str, dict[str, int]] = {}
    for role, per_split in counts.items():
        if role not in ROLES:
            raise ValidationError(f"counts has unknown role {role!r}")
        if not isinstance(per_split, dict) or not per_split:
            raise ValidationError(f"counts[{role!r}] must map split -> count")
        norm[role] = {}
        for split, n in per_split.items():
            if split not in SPLITS:
                raise ValidationError(f"counts[{role!r}] has unknown split {split!r}")
            if split not in _ROLE_SPLITS[role]:
                raise ValidationError(f"role {role!r} may not populate split {split!r}")
            if not isinstance(n, int) or n <= 0:
                raise ValidationError(f"counts[{role!r}][{split!r}] must be a positive integer")
            norm[role][split] = n
    if "safe" in norm and norm["safe"].get("D_S", 0) < 1:
        raise ValidationError("safe concepts need at least one D_S sample")
    return norm


def make_concept_set(spec: list[Concept], counts: dict, seed: int) -> ConceptDataset:
    """Generate a dataset from concept descriptors and per-role split counts.

    ``counts`` maps role -> split -> samples per concept of that role, e.g.
    ``{"malicious": {"D_M": 20, "D_A": 20}, "safe": {"D_S": 500, "D_A": 200}}``.
    Deterministic given ``seed``; D_M and D_A use disjoint random streams.
    """
    if not spec:
        raise ValidationError("empty concept spec")
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValidationError("seed must be an integer in [0, 2**64)")
    ids = [c.id for c in spec]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate concept ids in spec")
    roles = {c.role for c in spec}
    if "malicious" not in roles or "safe" not in roles:
        raise ValidationError("spec needs at least one malicious and one safe concept")
    norm = _validate_counts(counts)
    for role in roles:
        if role not in norm:
            raise ValidationError(f"counts missing entry for role {role!r}")

    samples: list[Sample] = []
    for concept in spec:
        for split in SPLITS:  # fixed order keeps serialization deterministic
            n = norm[concept.role].get(split, 0)
            for i in range(n):
                rng = _sample_rng(seed, split, concept.id, i)
                x = _apply_transform(concept, _draw_base(concept.family, rng))
                if not np.all(np.isfinite(x)):
                    raise ValidationError(f"non-finite sample for concept {concept.id}")
                samples.append(Sample(x=(float(x[0]), float(x[1])), concept=concept.id, split=split))
    return ConceptDataset(concepts=tuple(spec), samples=tuple(samples), seed=seed,
                          counts={r: dict(v) for r, v in norm.items()})


def split_view(dataset: ConceptDataset, split: str, concept: int | None = None) -> list[Sample]:
    """Samples matching the split (and optional concept) filter, in dataset order."""
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    if concept is not None:
        dataset.concept_by_id(concept)  # raises on unknown id
    return [s for s in dataset.samples
            if s.split == split and (concept is None or s.concept == concept)]


def split_arrays(dataset: ConceptDataset, split: str,
                 concept: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(x0, concept_ids) arrays for a split, ready for batching."""
    view = split_view(dataset, split, concept)
    if not view:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    x = np.array([s.x for s in view], dtype=float)
    cids = np.array([s.concept for s in view], dtype=np.int64)
    return x, cids


def dataset_to_json(dataset: ConceptDataset) -> str:
    """Canonical JSON serialization; identical datasets give identical bytes."""
    doc = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "seed": dataset.seed,
        "counts": dataset.counts,
        "concepts": [
            {"id": c.id, "name": c.name, "family": c.family, "rotation": c.rotation,
             "scale": c.scale, "offset": list(c.offset), "role": c.role}
            for c in dataset.concepts
        ],
        "samples": [
            {"x": list(s.x), "concept": s.concept, "split": s.split}
            for s in dataset.samples
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_dataset(dataset: ConceptDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dataset_to_json(dataset))


def load_dataset(path) -> ConceptDataset:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise ValidationError(
            f"dataset schema version {doc.get('schema_version')} != {DATASET_SCHEMA_VERSION}")
    concepts = tuple(
        Concept(id=c["id"], name=c["name"], family=c["family"], rotation=c["rotation"],
                scale=c["scale"], offset=tuple(c["offset"]), role=c["role"])
        for c in doc["concepts"])
    samples = tuple(
        Sample(x=tuple(s["x"]), concept=s["concept"], split=s["split"])
        for s in doc["samples"])
    return ConceptDataset(concepts=concepts, samples=samples, seed=doc["seed"],
                          counts=doc.get("counts", {}))
