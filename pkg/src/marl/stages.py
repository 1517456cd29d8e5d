"""Pipeline stages. Each one reads prior-stage artifacts plus its config
section, writes its own artifacts atomically under the run's output
directory, and returns a JSON-friendly summary.

Stage graph: synth -> ingest -> train -> embed -> cluster -> archetypes
-> evaluate, with plot reading whatever exists.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import __version__, artifacts, clustering, energy, ingest, synth, tasks, vqae
from .config import RunConfig
from .errors import ConfigError, StageDependencyError
from .nn.autodiff import Parameter

SYNTH_GEOJSON = "synth/footprints.geojson"
SYNTH_GT = "synth/ground_truth.json"
INGEST_IMAGES = "ingest/images.npy"
INGEST_RECORDS = "ingest/records.json"
TRAIN_CHECKPOINT = "train/checkpoint.marl"
TRAIN_LOSS_CSV = "train/loss.csv"
TRAIN_LABEL_MAP = "train/label_map.json"
EMBED_LATENTS = "embed/latents.bin"
CLUSTER_MODEL = "cluster/clusters_{cls}.json"
CLUSTER_WCSS = "cluster/wcss_{cls}.csv"
ARCHETYPE_INDEX = "archetypes/index.json"
EVALUATE_REPORT = "evaluate/report.json"


def _require(out: Path, rel: str) -> Path:
    path = out / rel
    if not path.exists():
        raise StageDependencyError(f"missing artifact {path}; run the producing stage first")
    return path


def _write_summary(out: Path, stage: str, summary: dict) -> None:
    artifacts.atomic_write_json(out / stage / "summary.json", summary)


# ---------------------------------------------------------------------------


def stage_synth(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    s = cfg.synth
    spec = synth.GeneratorSpec(
        n=s.n, seed=s.seed, class_mix=dict(s.class_mix),
        shape_families=tuple(s.shape_families),
        vintage_shape_correlation=s.vintage_shape_correlation,
        height_range=tuple(s.height_range), side_range=tuple(s.side_range),
        offset_range=s.offset_range,
    )
    records = synth.generate_footprints(spec)
    artifacts.atomic_write_text(out / SYNTH_GEOJSON, ingest.footprints_geojson_text(records))
    residential = ingest.filter_residential(records)
    gt = synth.synthetic_ground_truth(residential)
    artifacts.atomic_write_text(out / SYNTH_GT, json.dumps(gt) + "\n")
    summary = {
        "n": len(records),
        "by_class": {c: sum(1 for r in records if r.use_class == c)
                     for c in sorted({r.use_class for r in records})},
        "ground_truth_kwh": gt,
        "seed": s.seed,
    }
    _write_summary(out, "synth", summary)
    return summary


def stage_ingest(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    if cfg.paths.data:
        src = Path(cfg.paths.data)
        if not src.exists():
            raise StageDependencyError(f"input dataset {src} does not exist")
    else:
        src = _require(out, SYNTH_GEOJSON)
    records, skipped = ingest.parse_footprint_dataset(src)
    residential = ingest.filter_residential(records)
    pre = cfg.preprocessing
    stacks = np.zeros((len(residential), 3, pre.side_px, pre.side_px), dtype=np.float32)
    for i, rec in enumerate(residential):
        stacks[i] = ingest.preprocess_record(
            rec, pre.base_px, pre.side_px, pre.meters_per_pixel, pre.height_bounds).channels
    artifacts.atomic_write_npy(out / INGEST_IMAGES, stacks)
    artifacts.atomic_write_json(out / INGEST_RECORDS, {
        "source": str(src),
        "skipped": skipped,
        "records": [r.to_dict() for r in residential],
    })
    summary = {"source": str(src), "parsed": len(records), "skipped": skipped,
               "residential": len(residential), "side_px": pre.side_px}
    _write_summary(out, "ingest", summary)
    return summary


def _load_ingest(out: Path) -> tuple[list[ingest.FootprintRecord], np.ndarray]:
    doc = json.loads(_require(out, INGEST_RECORDS).read_text())
    records = [ingest.FootprintRecord.from_dict(d) for d in doc["records"]]
    images = np.load(_require(out, INGEST_IMAGES))
    if images.shape[0] != len(records):
        raise StageDependencyError(
            f"{images.shape[0]} image stacks for {len(records)} records; re-run ingest")
    return records, images


def stage_train(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    records, images = _load_ingest(out)
    m, t = cfg.model, cfg.training
    vq_cfg = vqae.VqConfig(
        side_px=cfg.preprocessing.side_px, channels=tuple(m.channels),
        code_dim=m.code_dim, codebook_size=m.codebook_size, beta=m.beta, seed=m.seed,
    )
    model = vqae.VqModel.build(vq_cfg)
    artifacts.log_event("train", "pretrain_start", epochs=t.epochs, n=len(records))
    history = vqae.pretrain(model, images, t.epochs, seed=m.seed,
                            batch_size=t.batch_size, learning_rate=t.learning_rate,
                            on_epoch=lambda e, row, _m: artifacts.log_event("train", "epoch", **row))

    head_sections: dict[str, list[Parameter]] = {}
    heads_meta = {}
    finetune_row = None
    program_map: dict[str, int] = {}
    if t.finetune:
        program_map = tasks.build_program_map(records)
        labels = tasks.make_task_labels(records, program_map, cfg.preprocessing.height_bounds)
        heads = tasks.build_heads(vq_cfg.latent_side, vq_cfg.code_dim,
                                  max(len(program_map), 1), seed=m.seed + 1)
        finetune_row = tasks.finetune(model, heads, images, labels, dict(t.task_weights),
                                      seed=m.seed + 2, batch_size=t.batch_size,
                                      learning_rate=t.learning_rate)
        artifacts.log_event("train", "finetune", **finetune_row)
        for name, head in heads.items():
            head_sections[f"head_{name}"] = head.parameters()
            heads_meta[name] = head.spec()

    meta = {"epochs": t.epochs, "finetuned": bool(t.finetune), "heads": heads_meta,
            "program_map": program_map, "n_train": len(records)}
    model.save(out / TRAIN_CHECKPOINT, extra_sections=head_sections, meta=meta)
    artifacts.atomic_write_json(out / TRAIN_LABEL_MAP, {
        "program_map": program_map,
        "vintage_edges": list(tasks.VINTAGE_BIN_EDGES),
    })

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "reconstruction", "codebook", "commitment", "total"])
    for row in history:
        writer.writerow([row["epoch"], repr(row["reconstruction"]), repr(row["codebook"]),
                         repr(row["commitment"]), repr(row["total"])])
    if finetune_row is not None:
        writer.writerow([t.epochs, repr(finetune_row["reconstruction"]),
                         repr(finetune_row["codebook"]), repr(finetune_row["commitment"]),
                         repr(finetune_row["weighted_total"])])
    artifacts.atomic_write_text(out / TRAIN_LOSS_CSV, buf.getvalue())

    summary = {
        "epochs": t.epochs,
        "finetuned": bool(t.finetune),
        "first_epoch": history[0] if history else None,
        "last_epoch": history[-1] if history else None,
        "checkpoint": str(out / TRAIN_CHECKPOINT),
    }
    _write_summary(out, "train", summary)
    return summary


def _load_model(out: Path) -> tuple[vqae.VqModel, dict, dict]:
    model, header, sections = vqae.VqModel.load(_require(out, TRAIN_CHECKPOINT))
    return model, header, sections


def stage_embed(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    records, images = _load_ingest(out)
    model, _, _ = _load_model(out)
    c = cfg.clustering
    matrix, _ = clustering.embed_images(
        model, [r.id for r in records], images,
        reduction=c.reduction, components=c.components if c.reduction == "pca" else None,
    )
    artifacts.write_matrix_blob(out / EMBED_LATENTS, {
        "ids": matrix.ids,
        "reduction": matrix.reduction,
        "components": matrix.components,
    }, matrix.vectors)
    summary = {"rows": len(matrix.ids), "dim": int(matrix.vectors.shape[1]),
               "reduction": matrix.reduction}
    _write_summary(out, "embed", summary)
    return summary


def _load_latents(out: Path) -> clustering.LatentMatrix:
    header, matrix = artifacts.read_matrix_blob(_require(out, EMBED_LATENTS))
    return clustering.LatentMatrix(list(header["ids"]), matrix, header["reduction"],
                                   header.get("components"))


def stage_cluster(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    records, _ = _load_ingest(out)
    latents = _load_latents(out)
    c = cfg.clustering
    by_id = {r.id: r for r in records}
    summary: dict = {"classes": {}}
    for cls_index, cls in enumerate(ingest.RESIDENTIAL_CLASSES):
        rows = [i for i, rid in enumerate(latents.ids) if by_id[rid].use_class == cls]
        if not rows:
            continue
        x = latents.vectors[rows].astype(np.float64)
        ids = [latents.ids[i] for i in rows]
        seed = int(np.random.default_rng([c.seed, cls_index]).integers(2**31))
        ks = [k for k in c.k_range if 1 <= k <= len(rows)]
        curve = clustering.wcss_curve(x, ks, seed, restarts=c.restarts) if ks else []
        chosen = c.k_for(cls)
        if chosen is None:
            chosen = clustering.elbow_select(curve, c.elbow_min, c.elbow_max)
        model = clustering.kmeans_best(x, chosen, seed, restarts=c.restarts)
        artifacts.atomic_write_json(out / CLUSTER_MODEL.format(cls=cls), {
            "use_class": cls,
            "k": model.k,
            "seed": seed,
            "wcss": model.wcss,
            "centers": [[float(v) for v in row] for row in model.centers],
            "assignments": {rid: int(a) for rid, a in zip(ids, model.assignments)},
        })
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["k", "wcss"])
        for k, w in curve:
            writer.writerow([k, repr(w)])
        artifacts.atomic_write_text(out / CLUSTER_WCSS.format(cls=cls), buf.getvalue())
        summary["classes"][cls] = {"n": len(rows), "k": model.k, "wcss": model.wcss}
    if not summary["classes"]:
        raise StageDependencyError("no residential records to cluster; check ingest output")
    _write_summary(out, "cluster", summary)
    return summary


def _load_cluster(out: Path, cls: str, latents: clustering.LatentMatrix) \
        -> tuple[clustering.ClusterModel, clustering.LatentMatrix]:
    doc = json.loads(_require(out, CLUSTER_MODEL.format(cls=cls)).read_text())
    ids = list(doc["assignments"].keys())
    pos = {rid: i for i, rid in enumerate(latents.ids)}
    missing = [rid for rid in ids if rid not in pos]
    if missing:
        raise StageDependencyError(f"cluster artifact references unknown ids {missing[:3]}")
    sub = clustering.LatentMatrix(ids, latents.vectors[[pos[r] for r in ids]],
                                  latents.reduction, latents.components)
    model = clustering.ClusterModel(
        k=int(doc["k"]),
        centers=np.asarray(doc["centers"], dtype=np.float64),
        assignments=np.asarray([doc["assignments"][r] for r in ids], dtype=np.int64),
        wcss=float(doc["wcss"]),
        seed=int(doc["seed"]),
    )
    return model, sub


def stage_archetypes(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    records, _ = _load_ingest(out)
    latents = _load_latents(out)
    pre = cfg.preprocessing
    index = []
    warnings = 0
    for cls in ingest.RESIDENTIAL_CLASSES:
        path = out / CLUSTER_MODEL.format(cls=cls)
        if not path.exists():
            continue
        model, sub = _load_cluster(out, cls, latents)
        archetypes, empty = clustering.select_archetypes(model, sub, records)
        warnings += empty
        for arch in archetypes:
            label = f"{cls}-{arch.cluster_index}"
            raster = ingest.rasterize_footprint(arch.representative, pre.base_px,
                                                pre.meters_per_pixel, pre.height_bounds)
            artifacts.write_gray_png(out / f"archetypes/{label}.png", raster.pixels)
            sidecar = {
                "cluster_index": arch.cluster_index,
                "representative_id": arch.representative_id,
                "cluster_total_area_m2": arch.cluster_total_area_m2,
                "member_count": arch.member_count,
                "height_m": arch.representative.height_m,
                "use_class": arch.representative.use_class,
            }
            artifacts.atomic_write_json(out / f"archetypes/{label}.json", sidecar)
            entry = dict(sidecar)
            entry["archetype_id"] = label
            entry["record"] = arch.representative.to_dict()
            index.append(entry)
    if not index:
        raise StageDependencyError("no cluster artifacts found; run the cluster stage first")
    artifacts.atomic_write_json(out / ARCHETYPE_INDEX, {"archetypes": index,
                                                        "empty_clusters": warnings})
    summary = {"archetypes": len(index), "empty_clusters": warnings}
    _write_summary(out, "archetypes", summary)
    return summary


def _read_eui_table(path: Path) -> list[dict]:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "archetype_id" not in reader.fieldnames \
                or "eui_kwh_per_m2" not in reader.fieldnames:
            raise ConfigError(f"{path}: EUI table needs archetype_id,eui_kwh_per_m2 columns")
        return list(reader)


def _baseline_rows(path: Path) -> list[energy.EuiAssignment]:
    rows = []
    for row in _read_eui_table(path):
        if "area_m2" not in row or row["area_m2"] in (None, ""):
            raise ConfigError(f"{path}: baseline table rows need area_m2")
        rows.append(energy.EuiAssignment(row["archetype_id"], float(row["eui_kwh_per_m2"]),
                                         float(row["area_m2"]), "baseline_table"))
    return rows


def stage_evaluate(cfg: RunConfig) -> dict:
    out = cfg.out_dir()
    e = cfg.energy
    gt_path = Path(e.ground_truth) if e.ground_truth else _require(out, SYNTH_GT)
    if not gt_path.exists():
        raise StageDependencyError(f"ground truth {gt_path} does not exist")
    gt = energy.read_ground_truth(gt_path)
    digests = {"ground_truth": artifacts.sha256_file(gt_path)}

    baseline = None
    if e.baseline_table:
        baseline_path = Path(e.baseline_table)
        if not baseline_path.exists():
            raise StageDependencyError(f"baseline table {baseline_path} does not exist")
        baseline = _baseline_rows(baseline_path)
        digests["baseline_table"] = artifacts.sha256_file(baseline_path)

    if e.eui_source == "fixture":
        table_path = Path(e.eui_table)
        if not table_path.exists():
            raise StageDependencyError(f"EUI table {table_path} does not exist")
        digests["eui_table"] = artifacts.sha256_file(table_path)
        rows = []
        for row in _read_eui_table(table_path):
            if "area_m2" not in row or row["area_m2"] in (None, ""):
                raise ConfigError(f"{table_path}: fixture rows need area_m2")
            rows.append(energy.EuiAssignment(row["archetype_id"], float(row["eui_kwh_per_m2"]),
                                             float(row["area_m2"]), "fixture"))
        report = energy.report_from_rows(rows, gt, baseline)
    else:
        index_path = _require(out, ARCHETYPE_INDEX)
        digests["archetypes"] = artifacts.sha256_file(index_path)
        index = json.loads(index_path.read_text())["archetypes"]
        archetypes = []
        labels = []
        for entry in index:
            rec = ingest.FootprintRecord.from_dict(entry["record"])
            archetypes.append(clustering.Archetype(
                cluster_index=int(entry["cluster_index"]),
                representative_id=entry["representative_id"],
                representative=rec,
                cluster_total_area_m2=float(entry["cluster_total_area_m2"]),
                member_count=int(entry["member_count"]),
            ))
            labels.append(entry["archetype_id"])
        if e.eui_source == "surrogate":
            def provider(arch):
                return energy.surrogate_eui_for_record(arch.representative)
            source = "surrogate"
        else:
            table_path = Path(e.eui_table)
            if not table_path.exists():
                raise StageDependencyError(f"EUI table {table_path} does not exist")
            digests["eui_table"] = artifacts.sha256_file(table_path)
            table = {row["archetype_id"]: float(row["eui_kwh_per_m2"])
                     for row in _read_eui_table(table_path)}
            provider = energy.table_provider(table)
            source = "table"
        report = energy.build_report(archetypes, provider, gt, baseline,
                                     labels=labels, source=source)

    report.tool_version = __version__
    report.input_digests = digests
    doc = report.to_dict()
    artifacts.atomic_write_json(out / EVALUATE_REPORT, doc)
    return doc


def stage_plot(cfg: RunConfig) -> dict:
    from . import plots

    out = cfg.out_dir()
    made = []
    loss_csv = out / TRAIN_LOSS_CSV
    if loss_csv.exists():
        with open(loss_csv) as fh:
            rows = list(csv.DictReader(fh))
        history = [{k: (int(r["epoch"]) if k == "epoch" else float(r[k])) for k in r} for r in rows]
        plots.plot_loss_curves(history, out / "plot/loss.png")
        made.append("plot/loss.png")
    for cls in ingest.RESIDENTIAL_CLASSES:
        wcss_csv = out / CLUSTER_WCSS.format(cls=cls)
        if not wcss_csv.exists():
            continue
        with open(wcss_csv) as fh:
            curve = [(int(r["k"]), float(r["wcss"])) for r in csv.DictReader(fh)]
        model_doc = json.loads((out / CLUSTER_MODEL.format(cls=cls)).read_text())
        if curve:
            plots.plot_wcss_curve(curve, model_doc["k"], out / f"plot/wcss_{cls}.png")
            made.append(f"plot/wcss_{cls}.png")
    ckpt = out / TRAIN_CHECKPOINT
    if ckpt.exists() and (out / INGEST_IMAGES).exists():
        _, images = _load_ingest(out)
        model, _, _ = _load_model(out)
        sample = images[: min(8, images.shape[0])]
        recon = model.reconstruct(sample)
        plots.plot_reconstruction_grid(sample, recon, out / "plot/reconstructions.png")
        made.append("plot/reconstructions.png")
    latents_path = out / EMBED_LATENTS
    if latents_path.exists():
        latents = _load_latents(out)
        for cls in ingest.RESIDENTIAL_CLASSES:
            if not (out / CLUSTER_MODEL.format(cls=cls)).exists():
                continue
            model_c, sub = _load_cluster(out, cls, latents)
            plots.plot_latent_scatter(sub.vectors, model_c.assignments,
                                      out / f"plot/latents_{cls}.png", title=f"{cls} latents")
            made.append(f"plot/latents_{cls}.png")
    if not made:
        raise StageDependencyError("nothing to plot; run earlier stages first")
    summary = {"figures": made}
    _write_summary(out, "plot", summary)
    return summary


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "train": stage_train,
    "embed": stage_embed,
    "cluster": stage_cluster,
    "archetypes": stage_archetypes,
    "evaluate": stage_evaluate,
    "plot": stage_plot,
}
