"""Acquisition scoring for the active-learning curation queue.

With a trained model, score = prediction entropy (uncertainty sampling).
Without one, score = distance to the nearest accepted segment of the same
class, falling back to the deviation from the class mean embedding while a
class has no accepted segments yet.  Queues are per class, descending by
score with the segment key breaking ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RbfModel, softmax
from .store import CurationState, EmbeddingStore
from .training import _phi_batch


@dataclass(frozen=True)
class Candidate:
    segment_key: str
    class_index: int
    score: float


@dataclass
class CandidateQueue:
    per_class: dict[int, list[Candidate]]

    def for_class(self, class_index: int, limit: int | None = None):
        items = self.per_class.get(class_index, [])
        return items if limit is None else items[:limit]

    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())


def _entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-12, 1.0)
    return -(p * np.log(p)).sum(axis=1)


def rank_candidates(curation: CurationState, model: RbfModel | None,
                    store: EmbeddingStore, labels: dict[str, int]) -> CandidateQueue:
    keys = [store.key_for_row(i) for i in range(store.rows)]
    undecided = [i for i, key in enumerate(keys)
                 if curation.decision_for(key) == "undecided"]
    Z = store.matrix.astype(np.float64)

    scores = np.zeros(store.rows)
    if model is not None:
        if undecided:
            phi = _phi_batch(Z[undecided], model._P, model.sigma)
            probs = softmax(phi @ model._W64.T + model._b64)
            scores[undecided] = _entropy(probs)
    else:
        accepted_by_class: dict[int, list[int]] = {}
        for i, key in enumerate(keys):
            if curation.decision_for(key) == "accepted":
                accepted_by_class.setdefault(labels[key], []).append(i)
        class_rows: dict[int, list[int]] = {}
        for i, key in enumerate(keys):
            class_rows.setdefault(labels[key], []).append(i)
        means = {c: Z[rows].mean(axis=0) for c, rows in class_rows.items()}
        for i in undecided:
            cls = labels[keys[i]]
            anchors = accepted_by_class.get(cls)
            if anchors:
                diffs = Z[anchors] - Z[i]
                scores[i] = float(np.sqrt((diffs ** 2).sum(axis=1)).min())
            else:
                scores[i] = float(np.linalg.norm(Z[i] - means[cls]))

    per_class: dict[int, list[Candidate]] = {}
    for i in undecided:
        key = keys[i]
        cls = labels[key]
        per_class.setdefault(cls, []).append(
            Candidate(key, cls, float(scores[i]))
        )
    for cls in per_class:
        per_class[cls].sort(key=lambda c: (-c.score, c.segment_key))
    return CandidateQueue(per_class)
