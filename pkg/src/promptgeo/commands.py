"""Run orchestration behind the command line: one function per run mode."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from . import geodata
from .backends import Backend, load_backend
from .backends.mock import SceneSpec
from .errors import ExemplarNotFoundError, ManifestError, PreconditionError
from .geodata import GeoRaster, LabelRaster, load_labels, load_raster, save_raster
from .manifest import ManifestEntry, check_entry_for_mode
from .metrics import (
    METRICS,
    MetricRow,
    ReportRow,
    aggregate,
    confusion,
    evaluate_classes,
    rows_to_csv,
    rows_to_json,
)
from .oneshot import TrainConfig, compare_protocols, trace_to_csv
from .promptseg import LoopConfig, RunLog, run_boxes, run_general, run_points, run_text_loop, save_instances

logger = logging.getLogger(__name__)

PROMPT_LABELS = {
    "general": "General",
    "box": "Box",
    "point": "Point",
    "text": "Text",
    "human_label": "One-shot (human)",
    "text_auto": "One-shot (text)",
}
ZERO_SHOT_LABELS = ("Box", "Point", "Text")


@dataclass
class RunRecord:
    manifest_hash: str
    entry: str
    mode: str
    config: dict
    out_dir: Path
    wall_time_s: float = 0.0
    warnings: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @property
    def degenerate_only(self) -> bool:
        return bool(self.rows) and all(r.metrics.degenerate for r in self.rows)

    def to_json(self) -> dict:
        return {
            "manifest_hash": self.manifest_hash,
            "entry": self.entry,
            "mode": self.mode,
            "config": self.config,
            "wall_time_s": self.wall_time_s,
            "warnings": self.warnings,
            "outputs": self.outputs,
        }


@dataclass
class _Target:
    class_id: Optional[int]
    phrase: str
    gt: np.ndarray
    valid: Optional[np.ndarray]
    subdir: str


def _targets(entry: ManifestEntry, gt: Optional[LabelRaster]) -> list[_Target]:
    if gt is None:
        return [_Target(None, entry.prompt.phrase or entry.target, None, None, "")]
    if not entry.classes:
        return [_Target(None, entry.prompt.phrase or entry.target, gt.data != 0, None, "")]
    valid = gt.data != 0
    return [_Target(c.id, c.name, gt.data == c.id, valid, f"class_{c.id}") for c in entry.classes]


def _score(entry, targets, preds, aggregation, gt: LabelRaster) -> MetricRow:
    if not entry.classes:
        return MetricRow.from_counts(confusion(preds[0], targets[0].gt, targets[0].valid))
    return evaluate_classes({t.class_id: p for t, p in zip(targets, preds)}, gt, mode=aggregation)


def _combine(targets, label_rasters, image: GeoRaster) -> LabelRaster:
    """Single-target runs keep instance ids; multiclass runs write class ids."""
    if len(targets) == 1 and targets[0].class_id is None:
        return label_rasters[0]
    out = np.zeros(image.shape, dtype=np.int64)
    for t, lab in zip(targets, label_rasters):
        out[(lab.data != 0) & (out == 0)] = t.class_id
    return LabelRaster(out, image.transform, image.crs)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Writer:
    def __init__(self, root: Path, image: GeoRaster, vector: bool):
        self.root = root
        self.image = image
        self.vector = vector
        self.paths: list[Path] = []
        root.mkdir(parents=True, exist_ok=True)

    def labels(self, labels: LabelRaster, sub: str = "", instances=None, log: Optional[RunLog] = None):
        d = self.root / sub if sub else self.root
        d.mkdir(parents=True, exist_ok=True)
        save_raster(labels, d / "mosaic.tif")
        self.paths.append(d / "mosaic.tif")
        if instances is not None:
            self.paths.extend(save_instances(instances, self.image, d / "instances"))
        if self.vector:
            geodata.write_geojson(geodata.vectorize(labels), d / "vector.geojson")
            self.paths.append(d / "vector.geojson")
        if log is not None:
            log.write(d / "runlog.jsonl")
            self.paths.append(d / "runlog.jsonl")

    def text(self, name: str, content: str):
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)
        self.paths.append(p)

    def report(self, rows: list[ReportRow]):
        self.text("metrics.csv", rows_to_csv(rows))
        self.text("metrics.json", rows_to_json(rows))

    def hashes(self) -> dict:
        return {str(p.relative_to(self.root)): _sha(p) for p in sorted(set(self.paths))}


def _backend(backend: Union[str, Backend]) -> Backend:
    return load_backend(backend) if isinstance(backend, str) else backend


def _prepare(entry: ManifestEntry, mode: str, exemplar: str = "text_auto"):
    check_entry_for_mode(entry, mode, exemplar)
    image = load_raster(entry.raster_path)
    gt = load_labels(entry.gt_path) if entry.gt_path is not None and mode != "general" else None
    if gt is not None and gt.shape != image.shape:
        raise ManifestError(entry.field("gt_path"), f"ground truth {gt.shape} does not match raster {image.shape}")
    if gt is not None:
        for j, c in enumerate(entry.classes):
            if not np.any(gt.data == c.id):
                raise ManifestError(entry.field(f"classes[{j}].id"), f"class {c.id} absent from ground truth")
    return image, gt


def _thresholds(entry, box_threshold, text_threshold) -> LoopConfig:
    box = entry.box_threshold if box_threshold is None else box_threshold
    text = entry.text_threshold if text_threshold is None else text_threshold
    if not 0.0 <= box <= 1.0:
        raise ManifestError(entry.field("thresholds.box"), f"must lie in [0, 1], got {box}")
    if not 0.0 <= text <= 1.0:
        raise ManifestError(entry.field("thresholds.text"), f"must lie in [0, 1], got {text}")
    return LoopConfig(box_threshold=box, text_threshold=text)


def _finish(record: RunRecord, writer: _Writer, logs: list[RunLog], start: float) -> RunRecord:
    record.warnings = [e for log in logs for e in log.events
                       if e["event"] in ("empty_mask", "termination_guard", "max_iterations",
                                         "exemplar_not_found")]
    record.outputs = writer.hashes()
    record.wall_time_s = round(time.perf_counter() - start, 3)
    (writer.root / "run_record.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    return record


def _report_row(entry, label, row, aggregation="") -> ReportRow:
    return ReportRow(entry.platform, entry.target, entry.resolution_m, label, row, entry.id,
                     aggregation if entry.classes else "")


def cmd_general(entry: ManifestEntry, backend, out_dir, manifest_hash: str = "", vector: bool = True) -> RunRecord:
    """Unprompted segmentation; writes rasters only, no metrics."""
    start = time.perf_counter()
    image, _ = _prepare(entry, "general")
    backend = _backend(backend)
    labels = run_general(image, backend)
    writer = _Writer(Path(out_dir) / entry.id / "general", image, vector)
    log = RunLog()
    log.record(0, "segments", str(len(labels.labels())))
    writer.labels(labels, log=log)
    record = RunRecord(manifest_hash, entry.id, "general", {}, writer.root)
    return _finish(record, writer, [log], start)


def _cmd_prompted(mode, entry, backend, out_dir, manifest_hash, box_threshold, text_threshold,
                  select, aggregation, vector) -> RunRecord:
    start = time.perf_counter()
    image, gt = _prepare(entry, mode)
    cfg = _thresholds(entry, box_threshold, text_threshold)
    backend = _backend(backend)
    targets = _targets(entry, gt)
    writer = _Writer(Path(out_dir) / entry.id / mode, image, vector)
    logs, preds, rasters = [], [], []
    for t in targets:
        log = RunLog()
        if mode == "text":
            instances, labels = run_text_loop(image, t.phrase, cfg, backend, select, log)
        else:
            kind = "boxes" if mode == "box" else "points"
            prompts = geodata.prompts_from_vector(
                entry.prompt.vector_for(mode), image, kind, class_name=t.phrase if t.class_id else "",
                class_field="class" if t.class_id else None, group_points=entry.prompt.group_points)
            run = run_boxes if mode == "box" else run_points
            instances, labels = run(image, prompts, backend, select, log)
        if t.subdir:
            writer.labels(labels, t.subdir, instances, log)
        else:
            writer.labels(labels, "", instances, log)
        logs.append(log)
        preds.append(labels.data != 0)
        rasters.append(labels)
    if entry.classes:
        writer.labels(_combine(targets, rasters, image))
    row = _report_row(entry, PROMPT_LABELS[mode], _score(entry, targets, preds, aggregation, gt), aggregation)
    writer.report([row])
    config = {"box_threshold": cfg.box_threshold, "text_threshold": cfg.text_threshold,
              "fill_mode": cfg.fill_mode, "select": select, "aggregation": aggregation}
    record = RunRecord(manifest_hash, entry.id, mode, config, writer.root, rows=[row])
    return _finish(record, writer, logs, start)


def cmd_box(entry, backend, out_dir, manifest_hash="", select="highest_confidence",
            aggregation="macro", vector=True) -> RunRecord:
    return _cmd_prompted("box", entry, backend, out_dir, manifest_hash, None, None, select, aggregation, vector)


def cmd_point(entry, backend, out_dir, manifest_hash="", select="highest_confidence",
              aggregation="macro", vector=True) -> RunRecord:
    return _cmd_prompted("point", entry, backend, out_dir, manifest_hash, None, None, select, aggregation, vector)


def cmd_text(entry, backend, out_dir, manifest_hash="", box_threshold=None, text_threshold=None,
             select="highest_confidence", aggregation="macro", vector=True) -> RunRecord:
    return _cmd_prompted("text", entry, backend, out_dir, manifest_hash, box_threshold, text_threshold,
                         select, aggregation, vector)


def _gt_instances(target: _Target, gt: LabelRaster, multiclass: bool) -> np.ndarray:
    if not multiclass and len(gt.labels()) > 1:
        return gt.data.astype(np.int64)
    labels, _ = ndimage.label(target.gt)
    return labels


def _write_oneshot(writer: _Writer, run, sub: str, config_hash: str):
    prefix = f"{sub}/" if sub else ""
    writer.labels(run.labels, sub, run.instances, run.log)
    writer.text(prefix + "weights.json",
                json.dumps(run.weights.to_json(config_hash), indent=2, sort_keys=True) + "\n")
    writer.text(prefix + "loss_trace.csv", trace_to_csv(run.trace))


def cmd_oneshot(entry: ManifestEntry, backend, out_dir, exemplar: str = "text_auto", k_samples: int = 5,
                seed: int = 0, manifest_hash: str = "", box_threshold=None, text_threshold=None,
                train_cfg: TrainConfig = TrainConfig(), select: str = "highest_confidence",
                aggregation: str = "macro", stop_eps: int = 2, max_iterations: int = 100,
                vector: bool = True) -> RunRecord:
    """Exemplar selection, scale fine-tuning, iterative one-shot segmentation, metrics.

    ``human_label`` draws ``k_samples`` ground-truth instances with ``seed`` and
    reports mean ± std; ``text_auto`` runs once from the top text detection.
    """
    if exemplar not in ("text_auto", "human_label"):
        raise ManifestError("--exemplar", f"must be text_auto or human_label, got {exemplar!r}")
    if k_samples < 1:
        raise ManifestError("--k-samples", "must be >= 1")
    start = time.perf_counter()
    image, gt = _prepare(entry, "oneshot", exemplar)
    cfg = _thresholds(entry, box_threshold, text_threshold)
    backend = _backend(backend)
    targets = _targets(entry, gt)
    multiclass = bool(entry.classes)
    writer = _Writer(Path(out_dir) / entry.id / "oneshot" / exemplar, image, vector)
    chash = train_cfg.digest()
    human = exemplar == "human_label"
    logs: list[RunLog] = []
    # per_sample[s][target_index] -> OneShotRun (or None when no exemplar was found)
    per_sample = [[None] * len(targets) for _ in range(k_samples if human else 1)]
    for ti, t in enumerate(targets):
        inst = _gt_instances(t, gt, multiclass)
        class_seed = seed if t.class_id is None else seed * 1000 + t.class_id
        try:
            comp = compare_protocols(image, t.phrase, inst, backend, k_samples, class_seed, cfg, train_cfg,
                                     select, valid=t.valid, stop_eps=stop_eps, max_iterations=max_iterations,
                                     run_human=human, run_text=not human)
        except ExemplarNotFoundError as exc:
            log = RunLog()
            log.warn(0, "exemplar_not_found", str(exc))
            logs.append(log)
            continue
        runs = comp.human_runs if human else [comp.text_run]
        for s, run in enumerate(runs):
            per_sample[s][ti] = run
            logs.append(run.log)

    sample_rows = []
    for s, runs in enumerate(per_sample):
        base = f"sample_{s:02d}" if human else ""
        preds, rasters = [], []
        for t, run in zip(targets, runs):
            if run is None:
                empty = LabelRaster(np.zeros(image.shape, dtype=np.uint8), image.transform, image.crs)
                preds.append(np.zeros(image.shape, dtype=bool))
                rasters.append(empty)
                continue
            sub = "/".join(p for p in (base, t.subdir) if p)
            _write_oneshot(writer, run, sub, chash)
            preds.append(run.labels.data != 0)
            rasters.append(run.labels)
        if multiclass:
            writer.labels(_combine(targets, rasters, image), base)
        sample_rows.append(_score(entry, targets, preds, aggregation, gt))

    row = aggregate(sample_rows) if human else sample_rows[0]
    report = _report_row(entry, PROMPT_LABELS[exemplar], row, aggregation)
    writer.report([report])
    if human:
        drawn = {}
        for ti, t in enumerate(targets):
            drawn[str(t.class_id or "all")] = [r[ti].exemplar_id for r in per_sample if r[ti] is not None]
        writer.text("exemplars.json", json.dumps(drawn, indent=2, sort_keys=True) + "\n")
    config = {"exemplar": exemplar, "k_samples": k_samples if human else 1, "seed": seed,
              "box_threshold": cfg.box_threshold, "text_threshold": cfg.text_threshold,
              "train": {"epochs": train_cfg.epochs, "lr0": train_cfg.lr0, "focal_gamma": train_cfg.focal_gamma,
                        "focal_alpha": train_cfg.focal_alpha, "dice_eps": train_cfg.dice_eps,
                        "config_hash": chash},
              "stop_eps": stop_eps, "max_iterations": max_iterations, "aggregation": aggregation}
    record = RunRecord(manifest_hash, entry.id, f"oneshot/{exemplar}", config, writer.root, rows=[report])
    return _finish(record, writer, logs, start)


# -- consolidated report ----------------------------------------------------------

def _load_rows(source) -> list[ReportRow]:
    p = Path(source)
    if p.is_dir():
        p = p / "metrics.json"
    try:
        return [ReportRow.from_json(d) for d in json.loads(p.read_text())]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise PreconditionError(f"{source}: not a run directory or metrics.json ({exc})") from exc


@dataclass
class Report:
    rows: list
    best: list  # per row: set of metric names flagged best in its group

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def to_json(self) -> str:
        docs = []
        for r, b in zip(self.rows, self.best):
            d = r.to_json()
            d["best"] = sorted(b)
            docs.append(d)
        return json.dumps(docs, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = ["#", "Platform", "Target", "Resolution", "Prompt", "Dice", "IoU", "Pixel Acc.", "TPR", "FPR"]
        lines = []
        for r, b in zip(self.rows, self.best):
            c = r.cells()
            lines.append([r.dataset, c["platform"], c["target"], c["resolution"], c["prompt"]]
                         + [c[m] + ("*" if m in b else "") for m in METRICS])
        widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
        fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
        out = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines]
        return "\n".join(out) + "\n* best value for the dataset\n"


def _is_oneshot(row: ReportRow) -> bool:
    return row.prompt.startswith("One-shot")


def cmd_report(sources) -> Report:
    """Merge run outputs, add zero-shot baselines to one-shot groups, flag bests.

    ``sources`` are run directories, ``metrics.json`` files or ReportRow objects.
    Rows are grouped by dataset id (falling back to platform/target/resolution).
    Within a group, the best value of every metric is flagged: highest for all
    but FPR, lowest for FPR.
    """
    rows: list[ReportRow] = []
    for s in sources:
        rows.extend([s] if isinstance(s, ReportRow) else _load_rows(s))
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.dataset or (r.platform, r.target, r.resolution), []).append(r)
    out_rows, out_best = [], []
    for key in groups:
        members = groups[key]
        zero = [r for r in members if r.prompt in ZERO_SHOT_LABELS]
        if zero and any(_is_oneshot(r) for r in members):
            top = max(zero, key=lambda r: r.metrics.dice)
            baseline = ReportRow(top.platform, top.target, top.resolution, "Baseline",
                                 MetricRow(**top.metrics.values()), top.dataset)
            members = members + [baseline]
        members.sort(key=lambda r: _row_order(r.prompt))
        flags = [set() for _ in members]
        scored = [i for i, r in enumerate(members) if r.prompt != "Baseline" or len(members) == 1]
        for m in METRICS:
            vals = [getattr(members[i].metrics, m) for i in scored]
            target = min(vals) if m == "fpr" else max(vals)
            for i in scored:
                if getattr(members[i].metrics, m) == target:
                    flags[i].add(m)
        out_rows.extend(members)
        out_best.extend(flags)
    return Report(out_rows, out_best)


def _row_order(prompt: str) -> int:
    order = ["General", "Box", "Point", "Text", "Baseline", "One-shot (human)", "One-shot (text)"]
    return order.index(prompt) if prompt in order else len(order)


# -- mock fixtures -------------------------------------------------------------------

def write_mock_fixture(scene: SceneSpec, out_dir, entry_id: str = "mock", platform: str = "UAV",
                       target: Optional[str] = None, box_threshold: float = 0.25,
                       text_threshold: float = 0.25) -> Path:
    """Render a scene into image, ground truth, prompt vectors and a manifest.

    Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")
    image = scene.render()
    geodata.save_image(image, out / "image.tif")
    save_raster(scene.instance_labels(), out / "gt.tif")
    t = scene.transform
    polys, pts, props = [], [], []
    from shapely.geometry import Point, box as shp_box

    for obj, m in zip(scene.objects, scene.masks()):
        ys, xs = np.nonzero(m)
        corners = [t.to_map(xs.min(), ys.min()), t.to_map(xs.max() + 1, ys.max() + 1)]
        (ax, ay), (bx, by) = corners
        polys.append(shp_box(min(ax, bx), min(ay, by), max(ax, bx), max(ay, by)))
        if obj.shape == "rect":
            cx, cy = obj.params[0] + obj.params[2] // 2, obj.params[1] + obj.params[3] // 2
        else:
            cx, cy = obj.params[0], obj.params[1]
        pts.append(Point(*t.to_map(cx + 0.5, cy + 0.5)))
        props.append({"class": obj.class_name})
    geodata.write_geojson(geodata.polygons_to_geojson(polys, props), out / "boxes.geojson")
    geodata.write_geojson(geodata.polygons_to_geojson(pts, props), out / "points.geojson")
    names = sorted({o.class_name for o in scene.objects})
    target = target or (names[0] if names else "object")
    manifest = {
        "entries": [{
            "id": entry_id,
            "platform": platform,
            "target": target,
            "resolution_m": abs(t.pixel_w),
            "raster_path": "image.tif",
            "gt_path": "gt.tif",
            "prompt": {"mode": "text", "phrase": target, "boxes_path": "boxes.geojson",
                       "points_path": "points.geojson", "group_points": False},
            "thresholds": {"box": box_threshold, "text": text_threshold},
        }]
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
