"""Local HTTP service powering the curation UI and serving explanations.

All mutations (selections, recluster) funnel through a single writer lock;
reads never block on it.  Recluster is synchronous and exclusive: a second
request while one is running gets 409.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import _kernels
from .clustering import select_prototypes
from .errors import InsufficientPoolError, ValidationError
from .model import load_model, predict_image
from .pipeline import STAGES, Workspace
from .prototypes import save_prototypes
from .ranking import rank_candidates
from .store import DECISIONS

_FALLBACK_PAGE = """<!doctype html>
<html><head><title>protorbf</title></head>
<body><h1>protorbf curation service</h1>
<p>No UI assets are installed; the JSON API is live under <code>/api/</code>.
Build the frontend (see README) to enable the review interface.</p>
</body></html>"""


class SelectionBody(BaseModel):
    segment_key: str
    decision: str


class ReclusterBody(BaseModel):
    k_per_class: int | None = None
    seed: int | None = None


class ServiceContext:
    def __init__(self, workspace: Workspace, default_k_per_class: int = 15,
                 default_seed: int = 0):
        workspace.check_prereqs("curated")
        self.workspace = workspace
        self.manifest = workspace.load_manifest()
        self.segments = workspace.load_segment_records()
        self.by_key = {r.segment_key: r for r in self.segments}
        self.labels = {r.segment_key: r.class_index for r in self.segments}
        self.store = workspace.load_store()
        self.log = workspace.open_curation_log()
        self.default_k_per_class = default_k_per_class
        self.default_seed = default_seed
        self.writer_lock = threading.Lock()
        self.recluster_lock = threading.Lock()
        self.prototypes = None
        self.model = None
        if workspace.prototypes_path.exists() and workspace.completed("clustered"):
            from .prototypes import load_prototypes
            self.prototypes = load_prototypes(workspace.prototypes_path)
        if workspace.model_path.exists() and workspace.completed("trained"):
            self.model = load_model(workspace.model_path)

    def class_index(self, value: str) -> int:
        if value in self.manifest.classes:
            return self.manifest.classes.index(value)
        try:
            idx = int(value)
        except ValueError:
            raise HTTPException(404, f"unknown class '{value}'")
        if not 0 <= idx < len(self.manifest.classes):
            raise HTTPException(404, f"class index {idx} out of range")
        return idx

    def crop_url(self, segment_key: str) -> str | None:
        record = self.by_key.get(segment_key)
        if record is None:
            return None
        return f"/crops/{Path(record.crop_path).name}"


def _candidate_json(ctx: ServiceContext, cand) -> dict:
    return {
        "segment_key": cand.segment_key,
        "class": ctx.manifest.classes[cand.class_index],
        "class_index": cand.class_index,
        "score": cand.score,
        "crop_url": ctx.crop_url(cand.segment_key),
        "decision": ctx.log.state.decision_for(cand.segment_key),
    }


def _prototypes_json(ctx: ServiceContext) -> dict:
    pset = ctx.prototypes
    return {
        "k_per_class": pset.per_class_count,
        "sigma_default": pset.sigma_default,
        "seed": pset.seed,
        "extractor_tag": pset.extractor_tag,
        "prototypes": [
            {
                "ordinal": i,
                "class": ctx.manifest.classes[p.class_index],
                "class_index": p.class_index,
                "source_segment_key": p.source_segment_key,
                "crop_url": ctx.crop_url(p.source_segment_key),
            }
            for i, p in enumerate(pset.prototypes)
        ],
    }


def create_app(workspace: Workspace, k_per_class: int = 15, seed: int = 0,
               static_dir=None) -> FastAPI:
    ctx = ServiceContext(workspace, k_per_class, seed)
    app = FastAPI(title="protorbf curation service")
    app.state.ctx = ctx

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"detail": "malformed request body"})

    @app.get("/api/status")
    def status():
        state = ctx.log.state
        counts = state.accepted_counts()
        run_stages = {s: workspace.completed(s) for s in STAGES}
        return {
            "name": ctx.manifest.name,
            "classes": ctx.manifest.classes,
            "stages": run_stages,
            "revision": state.revision,
            "accepted_counts": {
                ctx.manifest.classes[c]: counts.get(c, 0)
                for c in range(len(ctx.manifest.classes))
            },
            "undecided": sum(
                1 for key in ctx.labels
                if state.decision_for(key) == "undecided"
            ),
            "segments": len(ctx.segments),
            "model_trained": ctx.model is not None,
            "prototypes_ready": ctx.prototypes is not None,
            "kernel_backend": _kernels.BACKEND,
        }

    @app.get("/api/candidates")
    def candidates(request: Request, limit: int = 50):
        class_param = request.query_params.get("class")
        queue = rank_candidates(ctx.log.state, ctx.model, ctx.store, ctx.labels)
        if class_param is not None:
            cls = ctx.class_index(class_param)
            items = queue.for_class(cls, limit)
            return {
                "class": ctx.manifest.classes[cls],
                "revision": ctx.log.state.revision,
                "remaining": len(queue.for_class(cls)),
                "candidates": [_candidate_json(ctx, c) for c in items],
            }
        return {
            "revision": ctx.log.state.revision,
            "classes": {
                ctx.manifest.classes[cls]: [
                    _candidate_json(ctx, c) for c in queue.for_class(cls, limit)
                ]
                for cls in sorted(queue.per_class)
            },
        }

    @app.post("/api/selections")
    def selections(body: SelectionBody):
        if body.decision not in DECISIONS:
            raise HTTPException(400, f"unknown decision '{body.decision}'")
        if body.segment_key not in ctx.labels:
            raise HTTPException(404, f"unknown segment key '{body.segment_key}'")
        with ctx.writer_lock:
            state = ctx.log.record(body.segment_key, body.decision)
        counts = state.accepted_counts()
        return {
            "revision": state.revision,
            "segment_key": body.segment_key,
            "decision": body.decision,
            "accepted_counts": {
                ctx.manifest.classes[c]: counts.get(c, 0)
                for c in range(len(ctx.manifest.classes))
            },
        }

    @app.post("/api/recluster")
    def recluster(body: ReclusterBody | None = None):
        if not ctx.recluster_lock.acquire(blocking=False):
            raise HTTPException(409, "a recluster is already in progress")
        try:
            body = body or ReclusterBody()
            k = body.k_per_class or ctx.default_k_per_class
            seed_val = body.seed if body.seed is not None else ctx.default_seed
            with ctx.writer_lock:
                state = ctx.log.state
            try:
                pset = select_prototypes(
                    ctx.store, state, ctx.labels, k, seed_val,
                    class_names=ctx.manifest.classes,
                )
            except InsufficientPoolError as exc:
                raise HTTPException(409, {
                    "error": "insufficient_pool",
                    "message": str(exc),
                    "shortfalls": {
                        name: {"have": have, "need": need}
                        for name, (have, need) in exc.shortfalls.items()
                    },
                })
            with ctx.writer_lock:
                save_prototypes(pset, workspace.prototypes_path)
                workspace.mark_complete("curated", {"via": "service"})
                workspace.mark_complete("clustered",
                                        {"k_per_class": k, "seed": seed_val})
                ctx.prototypes = pset
                ctx.model = None
            return _prototypes_json(ctx)
        finally:
            ctx.recluster_lock.release()

    @app.get("/api/prototypes")
    def prototypes():
        if ctx.prototypes is None:
            raise HTTPException(404, "no prototypes yet; run a recluster")
        return _prototypes_json(ctx)

    @app.get("/api/explanations/{image_id}")
    def explanations(image_id: str):
        try:
            ctx.manifest.image(image_id)
        except ValidationError:
            raise HTTPException(404, f"unknown image id '{image_id}'")
        if ctx.model is None:
            raise HTTPException(409, "model not trained yet")
        rows = ctx.store.rows_for_image(image_id)
        if not rows:
            raise HTTPException(404, f"image '{image_id}' has no embeddings")
        Z = ctx.store.matrix[rows].astype(float)
        predicted, image_probs, explanation = predict_image(Z, ctx.model)
        segs = []
        for row, seg in zip(rows, explanation.per_segment):
            _, seg_index = ctx.store.index[row]
            key = ctx.store.key_for_row(row)
            entry = seg.to_json()
            entry["segment_index"] = seg_index
            entry["segment_key"] = key
            entry["crop_url"] = ctx.crop_url(key)
            entry["top_prototype_crop_url"] = ctx.crop_url(seg.top_source_key)
            entry["top_prototype_class"] = ctx.model.classes[
                ctx.model.prototypes.prototypes[seg.top_prototype].class_index
            ]
            segs.append(entry)
        return {
            "image_id": image_id,
            "predicted_class": ctx.model.classes[predicted],
            "predicted_class_index": predicted,
            "confidence": float(image_probs[predicted]),
            "image_probabilities": {
                name: float(p)
                for name, p in zip(ctx.model.classes, image_probs)
            },
            "per_segment": segs,
        }

    @app.get("/crops/{filename}")
    def crops(filename: str):
        if Path(filename).name != filename:
            raise HTTPException(404, "not found")
        path = workspace.crops_dir / filename
        if not path.exists():
            raise HTTPException(404, f"no crop named '{filename}'")
        return FileResponse(path)

    assets = Path(static_dir) if static_dir else Path(__file__).parent / "static"
    if assets.is_dir() and (assets / "index.html").exists():
        app.mount("/", StaticFiles(directory=assets, html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def home():
            return _FALLBACK_PAGE

    return app
