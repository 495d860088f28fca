"""K-Medoids prototype selection and silhouette scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import _kernels
from .errors import InsufficientPoolError, ValidationError
from .prototypes import Prototype, PrototypeSet, default_sigma
from .store import CurationState, EmbeddingStore


@dataclass
class ClusteringResult:
    medoid_rows: list[int]        # row indices into the input matrix, ascending
    assignment: np.ndarray        # point -> medoid ordinal
    total_cost: float


def kmedoids(points, k: int, seed: int = 0) -> ClusteringResult:
    """PAM (BUILD + SWAP) clustering; the result is a 1-swap local optimum.

    Fully deterministic: BUILD is greedy and swap ties resolve to the lowest
    row index, so ``seed`` does not influence the outcome.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValidationError("points must be a 2-D matrix")
    n = pts.shape[0]
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points contain non-finite values")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of points ({n})")
    D = cdist(pts, pts)
    medoids = np.sort(np.asarray(_kernels.pam(D, k), dtype=np.int64))
    assignment = np.argmin(D[:, medoids], axis=1)
    total_cost = float(D[np.arange(n), medoids[assignment]].sum())
    return ClusteringResult(medoids.tolist(), assignment, total_cost)


def silhouette(points, assignment) -> float:
    """Mean silhouette score; singleton clusters contribute 0."""
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(assignment)
    if pts.shape[0] != labels.shape[0]:
        raise ValidationError("assignment length does not match points")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValidationError("silhouette requires at least 2 clusters")
    D = cdist(pts, pts)
    n = pts.shape[0]
    scores = np.zeros(n)
    masks = {c: labels == c for c in uniq}
    for i in range(n):
        own = masks[labels[i]]
        size = int(own.sum())
        if size == 1:
            continue
        a = D[i, own].sum() / (size - 1)
        b = min(D[i, masks[c]].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def per_class_silhouettes(points, assignment, classes) -> dict:
    """Silhouette per class label, for clustering-quality reports.

    ``assignment`` are cluster ids, ``classes`` the class of each point;
    pooled and per-class views are both of interest.
    """
    pts = np.asarray(points, dtype=np.float64)
    classes = np.asarray(classes)
    out = {}
    for c in np.unique(classes):
        mask = classes == c
        sub_assign = np.asarray(assignment)[mask]
        if np.unique(sub_assign).size < 2:
            out[int(c)] = None
        else:
            out[int(c)] = silhouette(pts[mask], sub_assign)
    return out


def select_prototypes(pool: EmbeddingStore, curation: CurationState,
                      labels: dict[str, int], k_per_class: int, seed: int = 0,
                      class_names: list[str] | None = None) -> PrototypeSet:
    """Cluster each class's accepted segments independently with K-Medoids.

    Prototypes are verbatim rows of the pool (medoid property) and carry
    their source segment key so the UI can show the originating crop.
    """
    if k_per_class < 1:
        raise ValidationError("k_per_class must be >= 1")
    keys = [pool.key_for_row(i) for i in range(pool.rows)]
    accepted_rows: dict[int, list[int]] = {}
    for row, key in enumerate(keys):
        if curation.decision_for(key) != "accepted":
            continue
        if key not in labels:
            raise ValidationError(f"segment '{key}' has no class label")
        accepted_rows.setdefault(labels[key], []).append(row)

    all_classes = sorted(set(labels.values()))
    shortfalls = {}
    for cls in all_classes:
        have = len(accepted_rows.get(cls, []))
        if have < k_per_class:
            name = class_names[cls] if class_names else str(cls)
            shortfalls[name] = (have, k_per_class)
    if shortfalls:
        raise InsufficientPoolError(shortfalls)

    prototypes: list[Prototype] = []
    for cls in all_classes:
        rows = accepted_rows[cls]
        result = kmedoids(pool.matrix[rows].astype(np.float64), k_per_class, seed)
        for m in result.medoid_rows:
            row = rows[m]
            prototypes.append(Prototype(
                vector=pool.matrix[row].copy(),
                class_index=cls,
                source_segment_key=keys[row],
            ))

    pset = PrototypeSet(
        prototypes=prototypes,
        per_class_count=k_per_class,
        sigma_default=default_sigma(np.stack([p.vector for p in prototypes])),
        classes=list(class_names) if class_names else [],
        seed=seed,
        extractor_tag=pool.extractor_tag,
    )
    pset.validate()
    return pset
