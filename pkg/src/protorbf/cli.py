"""Command-line pipeline driver.

Stages run in order: init -> segment -> embed -> curate -> cluster -> train,
then eval / predict / explain.  Exit codes: 0 success, 1 usage error,
2 data or validation error.
"""

from __future__ import annotations

import json
import shlex
import shutil
import subprocess
from pathlib import Path

import click
import numpy as np

from .clustering import select_prototypes, silhouette
from .errors import ProtoRbfError, ValidationError
from .model import load_model, predict_image, save_model
from .pipeline import Workspace
from .prototypes import load_prototypes, save_prototypes
from .ranking import rank_candidates  # noqa: F401  (re-exported for callers)
from .segmentation import (
    extract_segment_crops,
    load_image,
    save_crop,
    slic_segment,
)
from .store import (
    DatasetManifest,
    EmbeddingStore,
    SegmentRecord,
    encode_mask,
    read_embeddings,
    save_segments,
)
from .training import TrainConfig, evaluate, train


def _resolve(workspace: Workspace, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else workspace.root / p


@click.group()
def cli():
    """Prototype-RBF interpretable classifier pipeline."""


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def init(workspace, manifest_path):
    """Create a workspace from a dataset manifest."""
    manifest = DatasetManifest.load(manifest_path)
    ws = Workspace.init(workspace, manifest)
    click.echo(f"initialized workspace {ws.root} "
               f"({len(manifest.images)} images, "
               f"{len(manifest.classes)} classes)")


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--n-segments", default=4, show_default=True)
@click.option("--compactness", default=100.0, show_default=True)
@click.option("--smoothing-sigma", default=1.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def segment(workspace, n_segments, compactness, smoothing_sigma, seed):
    """Superpixel-segment every image and write per-region crops."""
    ws = Workspace.open(workspace)
    ws.check_prereqs("segmented")
    ws.refuse_rerun("segmented")
    manifest = ws.load_manifest()
    records = []
    for im in manifest.images:
        img = load_image(_resolve(ws, im.path))
        labels = slic_segment(img, n_segments, compactness, smoothing_sigma, seed)
        for crop in extract_segment_crops(img, labels, image_id=im.image_id):
            save_crop(crop, ws.crops_dir)
            runs = encode_mask(crop.mask)
            records.append(SegmentRecord(
                image_id=im.image_id,
                segment_index=crop.segment_index,
                class_index=im.class_index,
                crop_path=f"crops/{im.image_id}_seg{crop.segment_index}.png",
                bbox=crop.bounding_box,
                pixel_count=crop.pixel_count,
                mask_shape=crop.mask.shape,
                mask_runs=tuple(runs),
            ))
    save_segments(records, ws.segments_path)
    ws.mark_complete("segmented", {
        "n_segments": n_segments, "compactness": compactness,
        "smoothing_sigma": smoothing_sigma, "seed": seed,
    })
    click.echo(f"wrote {len(records)} segment records "
               f"for {len(manifest.images)} images")


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--extractor-cmd", default="segembed", show_default=True,
              help="Command used to spawn the embedding extractor.")
@click.option("--backbone", default="resnet50", show_default=True)
def embed(workspace, extractor_cmd, backbone):
    """Spawn the extractor over the segment crops."""
    ws = Workspace.open(workspace)
    ws.check_prereqs("embedded")
    ws.refuse_rerun("embedded")
    cmd = shlex.split(extractor_cmd) + [
        "--manifest", str(ws.manifest_path),
        "--segments", str(ws.segments_path),
        "--backbone", backbone,
        "--out", str(ws.embeddings_path),
    ]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True,
                              cwd=ws.root)
    except FileNotFoundError as exc:
        raise ValidationError(f"extractor command not found: {exc}")
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
        raise ValidationError(
            "extractor failed (exit {}): {}".format(proc.returncode,
                                                    " | ".join(tail))
        )
    store = ws.load_store()
    ws.mark_complete("embedded", {
        "extractor_cmd": extractor_cmd, "backbone": backbone,
        "extractor_tag": store.extractor_tag, "dim": store.dim,
        "rows": store.rows,
    })
    click.echo(f"embedded {store.rows} segments at dim {store.dim} "
               f"(extractor: {store.extractor_tag})")


def _auto_accept_all(ws: Workspace) -> int:
    log = ws.open_curation_log()
    accepted = 0
    for record in ws.load_segment_records():
        if log.state.decision_for(record.segment_key) == "undecided":
            log.record(record.segment_key, "accepted")
            accepted += 1
    return accepted


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--serve", is_flag=True, help="Run the curation HTTP service.")
@click.option("--auto-accept-all", is_flag=True,
              help="Accept every undecided segment (headless mode).")
@click.option("--port", default=8711, show_default=True)
@click.option("--k-per-class", default=15, show_default=True)
@click.option("--seed", default=0, show_default=True)
def curate(workspace, serve, auto_accept_all, port, k_per_class, seed):
    """Review segments, headless (--auto-accept-all) or via the UI (--serve)."""
    ws = Workspace.open(workspace)
    ws.check_prereqs("curated")
    if not serve and not auto_accept_all:
        raise click.UsageError("pass --serve and/or --auto-accept-all")
    if auto_accept_all:
        accepted = _auto_accept_all(ws)
        ws.mark_complete("curated", {"mode": "auto-accept-all",
                                     "accepted": accepted})
        click.echo(f"auto-accepted {accepted} segments")
    if serve:
        import uvicorn

        from .service import create_app
        app = create_app(ws, k_per_class=k_per_class, seed=seed)
        click.echo(f"serving curation UI on http://127.0.0.1:{port}")
        uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
        log = ws.open_curation_log()
        if log.state.accepted_keys() and not ws.completed("curated"):
            ws.mark_complete("curated", {"mode": "serve",
                                         "revision": log.state.revision})


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--k-per-class", default=15, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--auto-accept-all", is_flag=True,
              help="Accept every undecided segment before clustering.")
def cluster(workspace, k_per_class, seed, auto_accept_all):
    """Select per-class prototypes from the accepted pool with K-Medoids."""
    ws = Workspace.open(workspace)
    if auto_accept_all and not ws.completed("curated"):
        ws.check_prereqs("curated")
        accepted = _auto_accept_all(ws)
        ws.mark_complete("curated", {"mode": "auto-accept-all",
                                     "accepted": accepted})
    ws.check_prereqs("clustered")
    manifest = ws.load_manifest()
    log = ws.open_curation_log()
    if not log.state.accepted_keys():
        raise ValidationError(
            "concept pool is empty: no accepted segments yet "
            "(run curate, or pass --auto-accept-all)"
        )
    pool = ws.load_store()
    labels = ws.segment_classes()
    pset = select_prototypes(pool, log.state, labels, k_per_class, seed,
                             class_names=manifest.classes)
    save_prototypes(pset, ws.prototypes_path)

    scores = _silhouette_report(pool, log.state, labels, pset)
    ws.mark_complete("clustered", {
        "k_per_class": k_per_class, "seed": seed, "silhouette": scores,
    })
    click.echo(f"selected {len(pset)} prototypes "
               f"({k_per_class} per class), sigma={pset.sigma_default:.6g}")
    pooled = scores["pooled"]
    click.echo("silhouette (pooled): "
               + ("n/a" if pooled is None else f"{pooled:.4f}"))
    for name, value in scores["per_class"].items():
        shown = "n/a" if value is None else f"{value:.4f}"
        click.echo(f"silhouette ({name}): {shown}")


def _silhouette_report(pool: EmbeddingStore, state, labels, pset) -> dict:
    """Clustering quality of the accepted pool under the chosen prototypes,
    pooled and per class (both views are of interest)."""
    keys = [pool.key_for_row(i) for i in range(pool.rows)]
    accepted = [i for i, k in enumerate(keys)
                if state.decision_for(k) == "accepted"]
    Z = pool.matrix[accepted].astype(np.float64)
    P = pset.matrix()
    d = ((Z[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d, axis=1)
    pooled = None
    if np.unique(assign).size >= 2:
        pooled = silhouette(Z, assign)
    per_class = {}
    proto_classes = np.array([p.class_index for p in pset.prototypes])
    seg_classes = np.array([labels[keys[i]] for i in accepted])
    for cls in np.unique(seg_classes):
        rows = seg_classes == cls
        cols = np.flatnonzero(proto_classes == cls)
        sub_assign = np.argmin(d[np.ix_(rows, cols)], axis=1)
        name = pset.classes[cls] if pset.classes else str(int(cls))
        if np.unique(sub_assign).size >= 2:
            per_class[name] = silhouette(Z[rows], sub_assign)
        else:
            per_class[name] = None
    return {"pooled": pooled, "per_class": per_class}


@cli.command(name="train")
@click.option("--workspace", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TrainConfig JSON; flags below override it.")
@click.option("--seed", type=int, default=None)
@click.option("--sigma", type=float, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--max-epochs", type=int, default=None)
def train_cmd(workspace, config_path, seed, sigma, learning_rate, max_epochs):
    """Fit the dense head on the clustered prototypes."""
    ws = Workspace.open(workspace)
    ws.check_prereqs("trained")
    cfg = TrainConfig.load(config_path) if config_path else TrainConfig()
    if seed is not None:
        cfg.seed = seed
    if sigma is not None:
        cfg.sigma = sigma
    if learning_rate is not None:
        cfg.learning_rate = learning_rate
    if max_epochs is not None:
        cfg.max_epochs = max_epochs
    cfg.validate()

    store = ws.load_store()
    manifest = ws.load_manifest()
    prototypes = load_prototypes(ws.prototypes_path)
    model, report = train(store, manifest, prototypes, cfg)
    save_model(model, ws.model_path)
    report.save(ws.report_path)
    cfg.save(ws.train_config_path)
    ws.mark_complete("trained", {
        "seed": cfg.seed, "epochs": len(report.epochs),
        "stop_reason": report.stop_reason, "best_epoch": report.best_epoch,
    })
    click.echo(f"trained {len(report.epochs)} epochs "
               f"(stop: {report.stop_reason}, best epoch {report.best_epoch}, "
               f"best val loss {report.best_val_loss:.6f})")
    click.echo(report.final_metrics.format_table(manifest.classes))


@cli.command(name="eval")
@click.option("--workspace", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
def eval_cmd(workspace, split):
    """Image-level metrics on a split."""
    ws = Workspace.open(workspace)
    ws.require_completed("trained", "eval")
    model = load_model(ws.model_path)
    store = ws.load_store()
    manifest = ws.load_manifest()
    metrics = evaluate(model, store, manifest, split)
    click.echo(metrics.format_table(manifest.classes))
    out = ws.root / f"eval.{split}.json"
    out.write_text(json.dumps(metrics.to_json(), indent=1))
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.option("--extractor-cmd", default="segembed", show_default=True)
@click.option("--backbone", default="resnet50", show_default=True)
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
def predict(workspace, extractor_cmd, backbone, image):
    """Segment, embed and classify a new image."""
    ws = Workspace.open(workspace)
    ws.require_completed("trained", "predict")
    params = ws.stage_config("segmented") or {}
    img = load_image(image)
    labels = slic_segment(
        img,
        params.get("n_segments", 4),
        params.get("compactness", 100.0),
        params.get("smoothing_sigma", 1.3),
        params.get("seed", 0),
    )
    image_id = "query"
    tmp = ws.root / "tmp-predict"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        records = []
        for crop in extract_segment_crops(img, labels, image_id=image_id):
            save_crop(crop, tmp)
            records.append(SegmentRecord(
                image_id=image_id,
                segment_index=crop.segment_index,
                class_index=0,
                crop_path=f"tmp-predict/{image_id}_seg{crop.segment_index}.png",
                bbox=crop.bounding_box,
                pixel_count=crop.pixel_count,
                mask_shape=crop.mask.shape,
                mask_runs=tuple(encode_mask(crop.mask)),
            ))
        manifest = ws.load_manifest()
        query_manifest = DatasetManifest(
            manifest.name, manifest.classes,
            [type(manifest.images[0])(image_id, str(image), 0, "test")],
        )
        query_manifest.save(tmp / "manifest.jsonl")
        save_segments(records, tmp / "segments.jsonl")
        out = tmp / "embeddings.prbf"
        cmd = shlex.split(extractor_cmd) + [
            "--manifest", str(tmp / "manifest.jsonl"),
            "--segments", str(tmp / "segments.jsonl"),
            "--backbone", backbone,
            "--out", str(out),
        ]
        proc = subprocess.run(cmd, capture_output=True, text=True, cwd=ws.root)
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
            raise ValidationError(
                f"extractor failed (exit {proc.returncode}): {' | '.join(tail)}"
            )
        store = read_embeddings(out)
        model = load_model(ws.model_path)
        rows = store.rows_for_image(image_id)
        predicted, probs, explanation = predict_image(
            store.matrix[rows].astype(float), model)
        click.echo(f"predicted class: {model.classes[predicted]} "
                   f"(confidence {probs[predicted]:.4f})")
        for name, p in zip(model.classes, probs):
            click.echo(f"  p({name}) = {p:.4f}")
        _echo_segments(explanation, model, ws)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


@cli.command()
@click.option("--workspace", required=True, type=click.Path())
@click.argument("image_id")
def explain(workspace, image_id):
    """Trace a workspace image's prediction to its prototypes."""
    ws = Workspace.open(workspace)
    ws.require_completed("trained", "explain")
    store = ws.load_store()
    rows = store.rows_for_image(image_id)
    if not rows:
        raise ValidationError(f"no embeddings for image id '{image_id}'")
    model = load_model(ws.model_path)
    predicted, probs, explanation = predict_image(
        store.matrix[rows].astype(float), model)
    click.echo(f"image {image_id}: predicted class "
               f"{model.classes[predicted]} (confidence {probs[predicted]:.4f})")
    _echo_segments(explanation, model, ws, store=store, rows=rows)


def _echo_segments(explanation, model, ws: Workspace, store=None, rows=None):
    crop_paths = {}
    if ws.segments_path.exists():
        crop_paths = {r.segment_key: r.crop_path
                      for r in ws.load_segment_records()}
    for j, seg in enumerate(explanation.per_segment):
        proto = model.prototypes.prototypes[seg.top_prototype]
        source_crop = crop_paths.get(proto.source_segment_key, "?")
        line = (f"  segment {seg.segment_index}: top prototype "
                f"#{seg.top_prototype} "
                f"(class {model.classes[proto.class_index]}, "
                f"activation {seg.top_activation:.4f}, "
                f"source {proto.source_segment_key} -> {source_crop})")
        if store is not None and rows is not None:
            key = store.key_for_row(rows[j])
            line += f" [segment crop {crop_paths.get(key, '?')}]"
        click.echo(line)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ProtoRbfError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
