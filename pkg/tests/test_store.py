import json
import os

import numpy as np
import pytest

from protorbf.errors import (
    BadMagicError,
    IndexMismatchError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from protorbf.store import (
    CurationLog,
    CurationState,
    DatasetManifest,
    EmbeddingStore,
    ManifestImage,
    SegmentRecord,
    decode_mask,
    encode_mask,
    index_path_for,
    load_segments,
    read_embeddings,
    record_decision,
    save_segments,
    write_embeddings,
)


def small_store():
    return EmbeddingStore(
        matrix=np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32),
        index=[("a", 0), ("a", 1)],
        extractor_tag="test",
    )


class TestEmbeddingFormat:
    def test_payload_size(self, tmp_path):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        blob = path.read_bytes()
        # header: 4 magic + 2 version + 4 dim + 4 rows = 14 bytes
        assert blob[:4] == b"PRBF"
        assert len(blob) - 14 == 24  # 6 values * 4 bytes

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        store = EmbeddingStore(
            rng.normal(size=(17, 9)).astype(np.float32),
            [(f"img{i}", 0) for i in range(17)],
            extractor_tag="resnet50",
        )
        path = tmp_path / "embeddings.prbf"
        write_embeddings(store, path)
        loaded = read_embeddings(path)
        assert np.array_equal(loaded.matrix, store.matrix)
        assert loaded.matrix.dtype == np.float32
        assert loaded.index == store.index
        assert loaded.extractor_tag == "resnet50"

    def test_nan_refused_and_no_file(self, tmp_path):
        store = small_store()
        store.matrix[0, 0] = np.nan
        path = tmp_path / "embeddings.prbf"
        with pytest.raises(ValidationError):
            write_embeddings(store, path)
        assert not path.exists()

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(TruncatedPayloadError) as exc:
            read_embeddings(path)
        assert "23" in str(exc.value) and "24" in str(exc.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            read_embeddings(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            read_embeddings(path)

    def test_index_row_mismatch(self, tmp_path):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        sidecar = json.loads(index_path_for(path).read_text())
        sidecar["index"].append(["ghost", 0])
        index_path_for(path).write_text(json.dumps(sidecar))
        with pytest.raises(IndexMismatchError) as exc:
            read_embeddings(path)
        assert "3" in str(exc.value) and "2" in str(exc.value)

    def test_atomic_rewrite_keeps_previous_on_crash(self, tmp_path, monkeypatch):
        path = tmp_path / "embeddings.prbf"
        write_embeddings(small_store(), path)
        original = path.read_bytes()

        def boom(src, dst):
            raise OSError("injected crash before rename")

        monkeypatch.setattr("protorbf.store.os.replace", boom)
        bigger = EmbeddingStore(np.ones((3, 3), np.float32),
                                [("b", 0), ("b", 1), ("b", 2)])
        with pytest.raises(OSError):
            write_embeddings(bigger, path)
        monkeypatch.undo()
        assert path.read_bytes() == original
        assert not list(tmp_path.glob("*.tmp"))


class TestManifestAndSegments:
    def make_manifest(self):
        return DatasetManifest("demo", ["benign", "malignant"], [
            ManifestImage("i1", "i1.png", 0, "train"),
            ManifestImage("i2", "i2.png", 1, "train"),
            ManifestImage("i3", "i3.png", 0, "test"),
        ])

    def test_manifest_round_trip(self, tmp_path):
        manifest = self.make_manifest()
        manifest.save(tmp_path / "manifest.jsonl")
        loaded = DatasetManifest.load(tmp_path / "manifest.jsonl")
        assert loaded == manifest

    def test_manifest_rejects_duplicates(self):
        manifest = self.make_manifest()
        manifest.images.append(ManifestImage("i1", "x.png", 0, "train"))
        with pytest.raises(ValidationError):
            manifest.validate()

    def test_manifest_rejects_bad_class(self):
        manifest = self.make_manifest()
        manifest.images.append(ManifestImage("i9", "x.png", 7, "train"))
        with pytest.raises(ValidationError):
            manifest.validate()

    def test_mask_rle_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = rng.random((5, 7)) > 0.5
            runs = encode_mask(mask)
            assert np.array_equal(decode_mask(mask.shape, runs), mask)

    def test_segment_records_round_trip(self, tmp_path):
        records = [SegmentRecord("i1", 0, 1, "crops/i1_seg0.png",
                                 (0, 0, 4, 4), 16, (4, 4), (0, 16))]
        save_segments(records, tmp_path / "segments.jsonl")
        assert load_segments(tmp_path / "segments.jsonl") == records


class TestCuration:
    CLASSES = {"i1:0": 0, "i1:1": 0, "i2:0": 1}

    def test_accept_increments_count(self):
        state = CurationState(self.CLASSES)
        state = record_decision(state, "i1:0", "accepted")
        assert state.accepted_counts() == {0: 1}
        assert state.revision == 1

    def test_accept_then_reject_decrements(self):
        state = CurationState(self.CLASSES)
        state = record_decision(state, "i1:0", "accepted")
        state = record_decision(state, "i1:0", "rejected")
        assert state.accepted_counts() == {}
        assert state.revision == 2

    def test_unknown_key_leaves_state_unchanged(self):
        state = CurationState(self.CLASSES)
        with pytest.raises(ValidationError):
            record_decision(state, "ghost:0", "accepted")
        assert state.revision == 0
        assert state.decisions == {}

    def test_log_replay_reproduces_state(self, tmp_path):
        path = tmp_path / "curation.log.jsonl"
        log = CurationLog(path, self.CLASSES)
        log.record("i1:0", "accepted")
        log.record("i2:0", "accepted")
        log.record("i1:0", "rejected")
        replayed = CurationLog.replay(path, self.CLASSES)
        assert replayed == log.state
        assert replayed.revision == 3
        assert replayed.accepted_counts() == {1: 1}

    def test_repeat_decision_bumps_revision_only(self, tmp_path):
        log = CurationLog(tmp_path / "log.jsonl", self.CLASSES)
        first = log.record("i1:0", "accepted")
        second = log.record("i1:0", "accepted")
        assert second.revision == first.revision + 1
        assert second.decisions == first.decisions

    def test_corrupt_revision_detected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(
            json.dumps({"revision": 5, "segment_key": "i1:0",
                        "decision": "accepted"}) + "\n"
        )
        with pytest.raises(ValidationError):
            CurationLog(path, self.CLASSES)
