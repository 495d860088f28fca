"""Synthetic fixtures shared by unit and acceptance tests."""

import numpy as np

from protorbf.pipeline import Workspace
from protorbf.store import (
    DatasetManifest,
    EmbeddingStore,
    ManifestImage,
    SegmentRecord,
    save_segments,
    write_embeddings,
)

BLOB_DIM = 64
BLOB_TRAIN = 200
BLOB_TEST = 100


def make_blob_data(seed: int = 7, n_train: int = BLOB_TRAIN,
                   n_test: int = BLOB_TEST, dim: int = BLOB_DIM):
    """Two Gaussian blobs whose centers sit 6 blob-sigmas apart.

    Blob sigma is the RMS norm spread sqrt(E||eps||^2) = sqrt(dim) per unit
    coordinate noise, so a nearest-prototype rule is essentially perfect by
    construction.  Returns (Z_train, y_train, Z_test, y_test).
    """
    rng = np.random.default_rng(seed)
    blob_sigma = np.sqrt(dim)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    offset = 6.0 * blob_sigma * direction

    def draw(n):
        half = n // 2
        y = np.array([0] * half + [1] * (n - half))
        Z = rng.normal(size=(n, dim))
        Z[y == 1] += offset
        return Z, y

    Z_train, y_train = draw(n_train)
    Z_test, y_test = draw(n_test)
    return Z_train, y_train, Z_test, y_test


def make_blob_workspace(root, seed: int = 7) -> Workspace:
    """A workspace holding the blob fixture as one-segment pseudo-images,
    with the segmented and embedded stages marked complete.

    Everything downstream (curate, cluster, train, eval) then runs through
    the real pipeline surfaces.
    """
    Z_train, y_train, Z_test, y_test = make_blob_data(seed)
    classes = ["alpha", "beta"]
    images, index, records = [], [], []
    matrix = np.concatenate([Z_train, Z_test]).astype(np.float32)
    labels = np.concatenate([y_train, y_test])
    splits = ["train"] * len(y_train) + ["test"] * len(y_test)
    for i, (cls, split) in enumerate(zip(labels, splits)):
        image_id = f"img{i:04d}"
        images.append(ManifestImage(image_id, f"{image_id}.png", int(cls), split))
        index.append((image_id, 0))
        records.append(SegmentRecord(
            image_id=image_id, segment_index=0, class_index=int(cls),
            crop_path=f"crops/{image_id}_seg0.png", bbox=(0, 0, 1, 1),
            pixel_count=1, mask_shape=(1, 1), mask_runs=(0, 1),
        ))
    manifest = DatasetManifest("synthetic-blobs", classes, images)
    ws = Workspace.init(root, manifest)
    save_segments(records, ws.segments_path)
    store = EmbeddingStore(matrix, index, extractor_tag="synthetic")
    write_embeddings(store, ws.embeddings_path)
    ws.mark_complete("segmented", {"synthetic": True})
    ws.mark_complete("embedded", {"extractor_tag": "synthetic",
                                  "dim": BLOB_DIM, "rows": len(index)})
    return ws


def nearest_medoid_accuracy(Z_train, y_train, Z_test, y_test, k_per_class=5):
    """Independent oracle: classify test points by their nearest per-class
    medoid (chosen exhaustively as the point minimizing within-class cost on
    a subsample), entirely apart from the RBF pipeline."""
    from scipy.spatial.distance import cdist

    medoids = []
    med_classes = []
    for cls in (0, 1):
        rows = Z_train[y_train == cls]
        D = cdist(rows, rows)
        order = np.argsort(D.sum(axis=1), kind="stable")[:k_per_class]
        medoids.append(rows[order])
        med_classes.extend([cls] * k_per_class)
    medoids = np.concatenate(medoids)
    med_classes = np.array(med_classes)
    nearest = np.argmin(cdist(Z_test, medoids), axis=1)
    return float((med_classes[nearest] == y_test).mean())
