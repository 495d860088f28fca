"""On-disk dataset model: manifests, segment index, curation log and the
binary embedding interchange format.

File formats
------------
``manifest.jsonl``      line 1: ``{"record": "dataset", "name", "classes"}``,
                        then one ``{"record": "image", ...}`` per image.
``segments.jsonl``      one JSON record per segment crop.
``curation.log.jsonl``  append-only decision events; state is a fold.
``embeddings.prbf``     header ``PRBF`` (4 bytes) + version u16 LE + dim u32 LE
                        + rows u32 LE, then rows*dim float32 LE, row-major.
``<name>.index.json``   sidecar mapping row ordinal -> (image_id, segment_index)
                        plus the extractor tag.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    IndexMismatchError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)

MAGIC = b"PRBF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")

SPLITS = ("train", "val", "test")
DECISIONS = ("accepted", "rejected", "undecided")


def _atomic_write_bytes(path, payload: bytes) -> None:
    """Write-temp-then-rename so a crash never clobbers the previous file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestImage:
    image_id: str
    path: str
    class_index: int
    split: str


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    images: list[ManifestImage] = field(default_factory=list)

    def validate(self, require_training_splits: bool = False) -> None:
        if not self.classes:
            raise ValidationError("manifest declares no classes")
        seen = set()
        for im in self.images:
            if im.image_id in seen:
                raise ValidationError(f"duplicate image_id '{im.image_id}'")
            seen.add(im.image_id)
            if not 0 <= im.class_index < len(self.classes):
                raise ValidationError(
                    f"image '{im.image_id}' has class index {im.class_index} "
                    f"outside 0..{len(self.classes) - 1}"
                )
            if im.split not in SPLITS:
                raise ValidationError(
                    f"image '{im.image_id}' has unknown split '{im.split}'"
                )
        if require_training_splits:
            for split in ("train", "test"):
                if not any(im.split == split for im in self.images):
                    raise ValidationError(f"split '{split}' is empty")

    def by_split(self, split: str) -> list[ManifestImage]:
        return [im for im in self.images if im.split == split]

    def image(self, image_id: str) -> ManifestImage:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise ValidationError(f"unknown image_id '{image_id}'")

    def class_of(self, image_id: str) -> int:
        return self.image(image_id).class_index

    def save(self, path) -> None:
        lines = [json.dumps({"record": "dataset", "name": self.name,
                             "classes": self.classes})]
        for im in self.images:
            lines.append(json.dumps({
                "record": "image", "image_id": im.image_id, "path": im.path,
                "class_index": im.class_index, "split": im.split,
            }))
        _atomic_write_text(path, "\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"manifest not found: {path}")
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not records or records[0].get("record") != "dataset":
            raise ValidationError(f"{path} does not start with a dataset record")
        head = records[0]
        images = []
        for rec in records[1:]:
            if rec.get("record") != "image":
                raise ValidationError(f"unexpected record type {rec.get('record')!r}")
            images.append(ManifestImage(rec["image_id"], rec["path"],
                                        int(rec["class_index"]), rec["split"]))
        manifest = DatasetManifest(head["name"], list(head["classes"]), images)
        manifest.validate()
        return manifest


# ---------------------------------------------------------------------------
# segment index
# ---------------------------------------------------------------------------

def segment_key(image_id: str, segment_index: int) -> str:
    return f"{image_id}:{segment_index}"


def encode_mask(mask: np.ndarray) -> list[int]:
    """Row-major run-length encoding, first run counts False pixels."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    current = False
    count = 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = v
            count = 1
    runs.append(count)
    return runs


def decode_mask(shape, runs) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise ValidationError("mask run-length data does not match its shape")
    return flat.reshape(shape)


@dataclass(frozen=True)
class SegmentRecord:
    image_id: str
    segment_index: int
    class_index: int
    crop_path: str
    bbox: tuple[int, int, int, int]  # x, y, w, h
    pixel_count: int
    mask_shape: tuple[int, int]
    mask_runs: tuple[int, ...]

    @property
    def segment_key(self) -> str:
        return segment_key(self.image_id, self.segment_index)

    def mask(self) -> np.ndarray:
        return decode_mask(self.mask_shape, self.mask_runs)


def save_segments(records: list[SegmentRecord], path) -> None:
    lines = []
    for r in records:
        lines.append(json.dumps({
            "image_id": r.image_id, "segment_index": r.segment_index,
            "class_index": r.class_index, "crop_path": r.crop_path,
            "bbox": list(r.bbox), "pixel_count": r.pixel_count,
            "mask_shape": list(r.mask_shape), "mask_runs": list(r.mask_runs),
        }))
    _atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_segments(path) -> list[SegmentRecord]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"segments index not found: {path}")
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        records.append(SegmentRecord(
            rec["image_id"], int(rec["segment_index"]), int(rec["class_index"]),
            rec["crop_path"], tuple(rec["bbox"]), int(rec["pixel_count"]),
            tuple(rec["mask_shape"]), tuple(rec["mask_runs"]),
        ))
    return records


# ---------------------------------------------------------------------------
# embedding store
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingStore:
    """Row-major matrix of per-segment feature vectors plus a row index."""

    matrix: np.ndarray                 # (rows, dim) float32
    index: list[tuple[str, int]]       # row -> (image_id, segment_index)
    extractor_tag: str = ""

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        self.index = [(str(i), int(s)) for i, s in self.index]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def validate(self) -> None:
        if self.matrix.ndim != 2:
            raise ValidationError("embedding matrix must be 2-D")
        if len(self.index) != self.rows:
            raise IndexMismatchError(
                f"index lists {len(self.index)} rows, matrix has {self.rows}"
            )
        if len(set(self.index)) != len(self.index):
            raise ValidationError("duplicate (image_id, segment_index) in index")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("embedding matrix contains non-finite values")

    def key_for_row(self, row: int) -> str:
        image_id, seg = self.index[row]
        return segment_key(image_id, seg)

    def row_for_key(self, key: str) -> int:
        try:
            return self._key_rows[key]
        except AttributeError:
            self._key_rows = {self.key_for_row(i): i for i in range(self.rows)}
            return self._key_rows[key]

    def rows_for_image(self, image_id: str) -> list[int]:
        rows = [i for i, (img, _) in enumerate(self.index) if img == image_id]
        return sorted(rows, key=lambda i: self.index[i][1])


def index_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".index.json")


def write_embeddings(store: EmbeddingStore, path) -> None:
    """Persist a store as ``<path>`` + ``<stem>.index.json``, atomically."""
    store.validate()
    matrix = np.ascontiguousarray(store.matrix, dtype="<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, store.dim, store.rows)
    _atomic_write_bytes(path, header + matrix.tobytes(order="C"))
    sidecar = {
        "format": "prbf-index",
        "version": FORMAT_VERSION,
        "extractor_tag": store.extractor_tag,
        "dim": store.dim,
        "rows": store.rows,
        "index": [[image_id, seg] for image_id, seg in store.index],
    }
    _atomic_write_text(index_path_for(path), json.dumps(sidecar, indent=1))


def read_embeddings(path) -> EmbeddingStore:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path} does not start with {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path} is shorter than its header")
    _, version, dim, rows = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    expected = dim * rows * 4
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise TruncatedPayloadError(
            f"{path} payload holds {actual} bytes, header promises {expected}"
        )
    matrix = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).copy()

    sidecar_path = index_path_for(path)
    if not sidecar_path.exists():
        raise IndexMismatchError(f"sidecar index not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    entries = sidecar.get("index", [])
    if len(entries) != rows:
        raise IndexMismatchError(
            f"index lists {len(entries)} rows, payload has {rows}"
        )
    store = EmbeddingStore(
        matrix=matrix,
        index=[(e[0], int(e[1])) for e in entries],
        extractor_tag=sidecar.get("extractor_tag", ""),
    )
    store.validate()
    return store


# ---------------------------------------------------------------------------
# curation state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurationState:
    """Fold of the decision event log.

    ``decisions`` holds the latest decision per segment key; keys never seen
    are implicitly undecided.  ``revision`` increments on every mutation.
    """

    segment_classes: dict[str, int]
    decisions: dict[str, str] = field(default_factory=dict)
    revision: int = 0

    def decision_for(self, key: str) -> str:
        return self.decisions.get(key, "undecided")

    def accepted_keys(self) -> list[str]:
        return [k for k, d in self.decisions.items() if d == "accepted"]

    def accepted_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for key in self.accepted_keys():
            cls = self.segment_classes[key]
            counts[cls] = counts.get(cls, 0) + 1
        return counts

    def undecided_keys(self, ordered_keys) -> list[str]:
        return [k for k in ordered_keys if self.decision_for(k) == "undecided"]


def record_decision(state: CurationState, key: str, decision: str) -> CurationState:
    """Pure fold step; the on-disk log is handled by :class:`CurationLog`."""
    if key not in state.segment_classes:
        raise ValidationError(f"unknown segment key '{key}'")
    if decision not in DECISIONS:
        raise ValidationError(f"unknown decision '{decision}'")
    decisions = dict(state.decisions)
    decisions[key] = decision
    return CurationState(state.segment_classes, decisions, state.revision + 1)


class CurationLog:
    """Append-only persistence for curation decisions.

    Every mutation is appended and flushed before the new state is returned,
    so replaying the log from empty always reproduces the live state.
    """

    def __init__(self, path, segment_classes: dict[str, int]):
        self.path = Path(path)
        self.segment_classes = dict(segment_classes)
        self.state = self.replay(self.path, self.segment_classes)

    @staticmethod
    def replay(path, segment_classes: dict[str, int]) -> CurationState:
        state = CurationState(dict(segment_classes))
        path = Path(path)
        if not path.exists():
            return state
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            state = record_decision(state, event["segment_key"], event["decision"])
            if state.revision != event["revision"]:
                raise ValidationError(
                    f"curation log corrupt: event revision {event['revision']} "
                    f"!= replayed revision {state.revision}"
                )
        return state

    def record(self, key: str, decision: str) -> CurationState:
        new_state = record_decision(self.state, key, decision)
        line = json.dumps({
            "revision": new_state.revision,
            "segment_key": key,
            "decision": decision,
        })
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.state = new_state
        return new_state
