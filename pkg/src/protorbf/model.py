"""The interpretable classifier: Gaussian RBF activations against prototypes,
a dense softmax head, per-segment inference, image-level averaging and
computation-identical explanations.

Parameters are stored in 32-bit; all arithmetic runs in 64-bit.  Prediction
and explanation share one code path: the activation vector that produces a
segment's logits is the same array object reported in its explanation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ValidationError, VersionMismatchError
from .prototypes import (
    Prototype,
    PrototypeSet,
    _vector_to_json,
    default_sigma,
)
from .store import _atomic_write_text

MODEL_FORMAT = "prbf-model"
MODEL_VERSION = 1

__all__ = [
    "RbfModel", "Explanation", "SegmentExplanation", "rbf_activations",
    "forward", "predict_image", "explain", "default_sigma", "save_model",
    "load_model",
]


@dataclass
class RbfModel:
    prototypes: PrototypeSet
    sigma: float
    W: np.ndarray                 # (classes, k) float32
    b: np.ndarray                 # (classes,) float32
    classes: list[str]

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.sigma <= 0:
            raise ValidationError("sigma must be > 0")
        k = len(self.prototypes)
        if self.W.shape != (len(self.classes), k):
            raise ValidationError(
                f"W has shape {self.W.shape}, expected "
                f"({len(self.classes)}, {k})"
            )
        if self.b.shape != (len(self.classes),):
            raise ValidationError(f"b has shape {self.b.shape}, expected "
                                  f"({len(self.classes)},)")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValidationError("model parameters contain non-finite values")
        self._P = self.prototypes.matrix()          # (k, dim) float64
        self._W64 = self.W.astype(np.float64)
        self._b64 = self.b.astype(np.float64)

    @property
    def dim(self) -> int:
        return self._P.shape[1]

    @property
    def n_prototypes(self) -> int:
        return self._P.shape[0]


@dataclass
class SegmentExplanation:
    segment_index: int
    activations: np.ndarray        # the phi vector that produced the logits
    probabilities: np.ndarray
    top_prototype: int             # argmax of ``activations`` (lowest on ties)
    top_activation: float
    top_source_key: str

    def to_json(self) -> dict:
        return {
            "segment_index": self.segment_index,
            "activations": [float(v) for v in self.activations],
            "probabilities": [float(v) for v in self.probabilities],
            "top_prototype": self.top_prototype,
            "top_activation": float(self.top_activation),
            "top_source_key": self.top_source_key,
        }


@dataclass
class Explanation:
    per_segment: list[SegmentExplanation]
    image_probabilities: np.ndarray
    predicted_class: int

    def to_json(self) -> dict:
        return {
            "predicted_class": self.predicted_class,
            "image_probabilities": [float(v) for v in self.image_probabilities],
            "per_segment": [seg.to_json() for seg in self.per_segment],
        }


def _check_vector(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != dim:
        raise ValidationError(
            f"embedding has shape {z.shape}, model expects ({dim},)"
        )
    if not np.all(np.isfinite(z)):
        raise ValidationError("embedding contains non-finite values")
    return z


def rbf_activations(z, model: RbfModel) -> np.ndarray:
    """phi_i(z) = exp(-||z - c_i||^2 / (2 sigma^2)), each in (0, 1]."""
    z = _check_vector(z, model.dim)
    diff = model._P - z
    d2 = np.einsum("ij,ij->i", diff, diff)
    return np.exp(-d2 / (2.0 * model.sigma ** 2))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(z, model: RbfModel) -> np.ndarray:
    """Class probability vector softmax(W . phi(z) + b)."""
    phi = rbf_activations(z, model)
    return softmax(model._W64 @ phi + model._b64)


def predict_image(segments, model: RbfModel):
    """Classify an image from its segment embeddings.

    Returns ``(class_index, image_probabilities, explanation)``.  The image
    distribution is the arithmetic mean of the per-segment probability
    vectors; the explanation is assembled from the very intermediates that
    produced the decision.
    """
    segs = np.asarray(segments, dtype=np.float64)
    if segs.size == 0:
        raise ValidationError("predict_image needs at least one segment embedding")
    if segs.ndim == 1:
        segs = segs[None, :]
    if segs.ndim != 2:
        raise ValidationError("segments must be a vector or a 2-D matrix")

    per_segment = []
    prob_rows = []
    for j in range(segs.shape[0]):
        phi = rbf_activations(segs[j], model)
        probs = softmax(model._W64 @ phi + model._b64)
        top = int(np.argmax(phi))
        per_segment.append(SegmentExplanation(
            segment_index=j,
            activations=phi,
            probabilities=probs,
            top_prototype=top,
            top_activation=float(phi[top]),
            top_source_key=model.prototypes.prototypes[top].source_segment_key,
        ))
        prob_rows.append(probs)

    image_probs = np.mean(prob_rows, axis=0)
    predicted = int(np.argmax(image_probs))
    explanation = Explanation(per_segment, image_probs, predicted)
    return predicted, image_probs, explanation


def explain(segments, model: RbfModel) -> Explanation:
    """The explanation embedded in :func:`predict_image`'s result."""
    return predict_image(segments, model)[2]


def save_model(model: RbfModel, path) -> None:
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "classes": model.classes,
        "sigma": float(np.float32(model.sigma)),
        "W": [_vector_to_json(row) for row in model.W],
        "b": _vector_to_json(model.b),
        "prototypes": {
            "k_per_class": model.prototypes.per_class_count,
            "sigma_default": model.prototypes.sigma_default,
            "seed": model.prototypes.seed,
            "extractor_tag": model.prototypes.extractor_tag,
            "entries": [
                {
                    "class_index": p.class_index,
                    "source_segment_key": p.source_segment_key,
                    "vector": _vector_to_json(p.vector),
                }
                for p in model.prototypes.prototypes
            ],
        },
    }
    _atomic_write_text(path, json.dumps(payload, indent=1))


def load_model(path) -> RbfModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"model file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BadMagicError(f"{path} is not a model file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise BadMagicError(f"{path} is not a model file")
    if payload.get("version") != MODEL_VERSION:
        raise VersionMismatchError(
            f"{path} has version {payload.get('version')}, expected {MODEL_VERSION}"
        )
    proto_payload = payload["prototypes"]
    prototypes = PrototypeSet(
        prototypes=[
            Prototype(
                vector=np.asarray(e["vector"], dtype=np.float32),
                class_index=int(e["class_index"]),
                source_segment_key=e["source_segment_key"],
            )
            for e in proto_payload["entries"]
        ],
        per_class_count=int(proto_payload["k_per_class"]),
        sigma_default=float(proto_payload["sigma_default"]),
        classes=list(payload["classes"]),
        seed=int(proto_payload.get("seed", 0)),
        extractor_tag=proto_payload.get("extractor_tag", ""),
    )
    return RbfModel(
        prototypes=prototypes,
        sigma=float(payload["sigma"]),
        W=np.asarray(payload["W"], dtype=np.float32),
        b=np.asarray(payload["b"], dtype=np.float32),
        classes=list(payload["classes"]),
    )
