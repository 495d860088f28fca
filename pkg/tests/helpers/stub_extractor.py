#!/usr/bin/env python3
"""Deterministic stand-in extractor for tests.

Embeddings are simple pooled color statistics of each crop, so they are a
pure function of the pixels, carry no heavyweight dependencies, and separate
classes whose crops differ in color.
"""

import argparse

import numpy as np
from PIL import Image

from protorbf.store import EmbeddingStore, load_segments, write_embeddings


def crop_features(arr: np.ndarray) -> np.ndarray:
    means = arr.mean(axis=(0, 1))
    stds = arr.std(axis=(0, 1))
    half = arr.shape[0] // 2
    vertical = arr[:half].mean(axis=(0, 1)) - arr[half:].mean(axis=(0, 1))
    return np.concatenate([means, stds, vertical[:2]])


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--segments", required=True)
    ap.add_argument("--backbone", default="stub")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    records = load_segments(args.segments)
    rows, index = [], []
    for r in records:
        with Image.open(r.crop_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        rows.append(crop_features(arr))
        index.append((r.image_id, r.segment_index))
    store = EmbeddingStore(np.array(rows, dtype=np.float32), index,
                           extractor_tag=f"stub-{args.backbone}")
    write_embeddings(store, args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
