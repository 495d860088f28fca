"""Prototype records shared by the clustering step and the RBF model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .errors import BadMagicError, ValidationError, VersionMismatchError
from .store import _atomic_write_text

PROTOTYPES_FORMAT = "prbf-prototypes"
PROTOTYPES_VERSION = 1


@dataclass(frozen=True)
class Prototype:
    vector: np.ndarray          # float32, a verbatim row of the concept pool
    class_index: int
    source_segment_key: str


@dataclass
class PrototypeSet:
    prototypes: list[Prototype]
    per_class_count: int
    sigma_default: float
    classes: list[str] = field(default_factory=list)
    seed: int = 0
    extractor_tag: str = ""

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def dim(self) -> int:
        return int(self.prototypes[0].vector.shape[0])

    def matrix(self) -> np.ndarray:
        """Prototype vectors stacked as a (k, dim) float64 matrix."""
        return np.stack([p.vector for p in self.prototypes]).astype(np.float64)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for p in self.prototypes:
            counts[p.class_index] = counts.get(p.class_index, 0) + 1
        return counts

    def validate(self) -> None:
        if not self.prototypes:
            raise ValidationError("prototype set is empty")
        if self.sigma_default <= 0:
            raise ValidationError("sigma_default must be > 0")
        for cls, count in self.class_counts().items():
            if count != self.per_class_count:
                raise ValidationError(
                    f"class {cls} has {count} prototypes, expected "
                    f"{self.per_class_count}"
                )


def default_sigma(prototypes) -> float:
    """Median pairwise Euclidean distance between prototypes.

    Accepts a :class:`PrototypeSet` or a (k, dim) matrix.  Errors when fewer
    than two prototypes exist or the spread degenerates to zero.
    """
    if isinstance(prototypes, PrototypeSet):
        vectors = prototypes.matrix()
    else:
        vectors = np.asarray(prototypes, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ValidationError("default_sigma needs at least 2 prototypes")
    med = float(np.median(pdist(vectors)))
    if med <= 0.0:
        raise ValidationError(
            "prototype spread is degenerate (median pairwise distance is 0)"
        )
    return med


def _vector_to_json(vec: np.ndarray) -> list[float]:
    # float32 -> float64 is exact, so json round-trips the 32-bit values.
    return [float(v) for v in np.asarray(vec, dtype=np.float32)]


def save_prototypes(pset: PrototypeSet, path) -> None:
    pset.validate()
    payload = {
        "format": PROTOTYPES_FORMAT,
        "version": PROTOTYPES_VERSION,
        "k_per_class": pset.per_class_count,
        "sigma_default": pset.sigma_default,
        "classes": pset.classes,
        "seed": pset.seed,
        "extractor_tag": pset.extractor_tag,
        "prototypes": [
            {
                "class_index": p.class_index,
                "source_segment_key": p.source_segment_key,
                "vector": _vector_to_json(p.vector),
            }
            for p in pset.prototypes
        ],
    }
    _atomic_write_text(path, json.dumps(payload, indent=1))


def load_prototypes(path) -> PrototypeSet:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"prototype file not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != PROTOTYPES_FORMAT:
        raise BadMagicError(f"{path} is not a prototype file")
    if payload.get("version") != PROTOTYPES_VERSION:
        raise VersionMismatchError(
            f"{path} has version {payload.get('version')}, "
            f"expected {PROTOTYPES_VERSION}"
        )
    prototypes = [
        Prototype(
            vector=np.asarray(entry["vector"], dtype=np.float32),
            class_index=int(entry["class_index"]),
            source_segment_key=entry["source_segment_key"],
        )
        for entry in payload["prototypes"]
    ]
    pset = PrototypeSet(
        prototypes=prototypes,
        per_class_count=int(payload["k_per_class"]),
        sigma_default=float(payload["sigma_default"]),
        classes=list(payload.get("classes", [])),
        seed=int(payload.get("seed", 0)),
        extractor_tag=payload.get("extractor_tag", ""),
    )
    pset.validate()
    return pset
