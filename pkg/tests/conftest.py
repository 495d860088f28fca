import sys
from pathlib import Path

import numpy as np
import pytest

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))

STUB_EXTRACTOR = TESTS_DIR / "helpers" / "stub_extractor.py"


def quadrant_image(size: int = 20) -> np.ndarray:
    """Four uniform color quadrants; hard edges (use smoothing_sigma=0)."""
    img = np.zeros((size, size, 3))
    half = size // 2
    img[:half, :half] = [1.0, 0.0, 0.0]
    img[:half, half:] = [0.0, 1.0, 0.0]
    img[half:, :half] = [0.0, 0.0, 1.0]
    img[half:, half:] = [1.0, 1.0, 0.0]
    return img


def quadrant_labels(size: int = 20) -> np.ndarray:
    expected = np.zeros((size, size), dtype=np.int32)
    half = size // 2
    expected[:half, half:] = 1
    expected[half:, :half] = 2
    expected[half:, half:] = 3
    return expected


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel regions by raster order of first occurrence, for partition
    comparisons that ignore the id permutation."""
    out = np.empty_like(labels)
    mapping = {}
    flat = labels.ravel()
    out_flat = out.ravel()
    for i, v in enumerate(flat):
        v = int(v)
        if v not in mapping:
            mapping[v] = len(mapping)
        out_flat[i] = mapping[v]
    return out


@pytest.fixture
def stub_extractor_cmd():
    return f"{sys.executable} {STUB_EXTRACTOR}"
