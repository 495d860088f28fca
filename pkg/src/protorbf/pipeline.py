"""Workspace layout and pipeline stage bookkeeping.

A workspace directory holds every pipeline artifact under fixed names; stage
completion markers (with per-stage config snapshots) live in ``run.json``.
Stages run strictly in order: segmented -> embedded -> curated -> clustered
-> trained.  ``segment`` and ``embed`` outputs are immutable once marked;
``cluster`` and ``train`` may re-run (the curation loop feeds new prototypes
into the next model) and doing so invalidates their successors.
"""

from __future__ import annotations

import datetime
import json
from pathlib import Path

from .errors import StageOrderError, ValidationError
from .store import (
    CurationLog,
    DatasetManifest,
    _atomic_write_text,
    load_segments,
    read_embeddings,
)

STAGES = ("segmented", "embedded", "curated", "clustered", "trained")
RUN_VERSION = 1


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    # -- file layout --------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def segments_path(self) -> Path:
        return self.root / "segments.jsonl"

    @property
    def crops_dir(self) -> Path:
        return self.root / "crops"

    @property
    def embeddings_path(self) -> Path:
        return self.root / "embeddings.prbf"

    @property
    def curation_log_path(self) -> Path:
        return self.root / "curation.log.jsonl"

    @property
    def prototypes_path(self) -> Path:
        return self.root / "prototypes.json"

    @property
    def model_path(self) -> Path:
        return self.root / "model.prbf.json"

    @property
    def train_config_path(self) -> Path:
        return self.root / "train.config.json"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    @property
    def run_path(self) -> Path:
        return self.root / "run.json"

    # -- lifecycle ----------------------------------------------------------
    @staticmethod
    def init(root, manifest: DatasetManifest) -> "Workspace":
        ws = Workspace(root)
        if ws.run_path.exists():
            raise ValidationError(f"workspace already initialized: {ws.root}")
        manifest.validate()
        ws.root.mkdir(parents=True, exist_ok=True)
        ws.crops_dir.mkdir(exist_ok=True)
        manifest.save(ws.manifest_path)
        ws._save_run({
            "version": RUN_VERSION,
            "name": manifest.name,
            "created_at": _now(),
            "stages": {stage: None for stage in STAGES},
        })
        return ws

    @staticmethod
    def open(root) -> "Workspace":
        ws = Workspace(root)
        if not ws.run_path.exists():
            raise ValidationError(
                f"{ws.root} is not a workspace (run 'init' first)"
            )
        return ws

    def _load_run(self) -> dict:
        run = json.loads(self.run_path.read_text())
        if run.get("version") != RUN_VERSION:
            raise ValidationError(f"unsupported run.json version in {self.root}")
        return run

    def _save_run(self, run: dict) -> None:
        _atomic_write_text(self.run_path, json.dumps(run, indent=1))

    # -- stage markers ------------------------------------------------------
    def completed(self, stage: str) -> bool:
        return self._load_run()["stages"].get(stage) is not None

    def stage_config(self, stage: str) -> dict | None:
        marker = self._load_run()["stages"].get(stage)
        return None if marker is None else marker.get("config")

    def check_prereqs(self, stage: str) -> None:
        run = self._load_run()
        for earlier in STAGES[: STAGES.index(stage)]:
            if run["stages"].get(earlier) is None:
                raise StageOrderError(stage, earlier)

    def require_completed(self, stage: str, for_what: str) -> None:
        if not self.completed(stage):
            raise StageOrderError(for_what, stage)

    def refuse_rerun(self, stage: str) -> None:
        if self.completed(stage):
            raise ValidationError(
                f"stage '{stage}' already completed; its outputs are "
                f"immutable — use a fresh workspace"
            )

    def mark_complete(self, stage: str, config: dict | None = None) -> None:
        run = self._load_run()
        run["stages"][stage] = {"completed_at": _now(), "config": config or {}}
        for later in STAGES[STAGES.index(stage) + 1:]:
            run["stages"][later] = None
        self._save_run(run)

    # -- artifact loading ---------------------------------------------------
    def load_manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.manifest_path)

    def load_segment_records(self):
        return load_segments(self.segments_path)

    def load_store(self):
        return read_embeddings(self.embeddings_path)

    def segment_classes(self) -> dict[str, int]:
        return {r.segment_key: r.class_index for r in self.load_segment_records()}

    def open_curation_log(self) -> CurationLog:
        return CurationLog(self.curation_log_path, self.segment_classes())


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()
