"""Pixelwise confusion counts, the five segmentation metrics and report rows."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyClassError, ShapeError

METRICS = ("dice", "iou", "pixel_acc", "tpr", "fpr")
HEADERS = {"dice": "Dice", "iou": "IoU", "pixel_acc": "Pixel Acc.", "tpr": "TPR", "fpr": "FPR"}
REPORT_COLUMNS = ("platform", "target", "resolution", "prompt") + METRICS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt, valid=None) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != gt.shape:
            raise ShapeError("valid mask shape differs from ground truth")
    tp = int(np.count_nonzero(pred & gt & valid))
    fp = int(np.count_nonzero(pred & ~gt & valid))
    fn = int(np.count_nonzero(~pred & gt & valid))
    tn = int(np.count_nonzero(~pred & ~gt & valid))
    return ConfusionCounts(tp, fp, fn, tn)


# Zero denominators only arise when both masks are empty over the evaluated
# pixels; such results are reported as perfect and flagged via is_degenerate().

def iou(c: ConfusionCounts) -> float:
    d = c.tp + c.fp + c.fn
    return c.tp / d if d else 1.0


def dice(c: ConfusionCounts) -> float:
    d = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / d if d else 1.0


def pixel_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("no evaluated pixels")
    return (c.tp + c.tn) / c.total


def tpr(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 1.0


def fpr(c: ConfusionCounts) -> float:
    d = c.fp + c.tn
    return c.fp / d if d else 0.0


def is_degenerate(c: ConfusionCounts) -> bool:
    return (c.tp + c.fp + c.fn) == 0 or (c.tp + c.fn) == 0 or (c.fp + c.tn) == 0


@dataclass(frozen=True)
class MetricRow:
    dice: float
    iou: float
    pixel_acc: float
    tpr: float
    fpr: float
    std: Optional[dict] = None
    degenerate: bool = False
    n: int = 1

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricRow":
        return cls(dice(c), iou(c), pixel_accuracy(c), tpr(c), fpr(c), degenerate=is_degenerate(c))

    def values(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def cell(self, metric: str, digits: int = 3) -> str:
        return format_cell(getattr(self, metric), None if self.std is None else self.std[metric], digits)


def format_cell(mean: float, std: Optional[float] = None, digits: int = 3) -> str:
    """``0.945`` or ``0.945 ± 0.042``."""
    if std is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def aggregate(rows: Sequence[MetricRow]) -> MetricRow:
    """Per-metric mean and population standard deviation."""
    if not rows:
        raise ValueError("nothing to aggregate")
    table = np.array([[getattr(r, m) for m in METRICS] for r in rows], dtype=np.float64)
    mean = table.mean(axis=0)
    std = table.std(axis=0)  # population (ddof=0)
    return MetricRow(*mean.tolist(), std=dict(zip(METRICS, std.tolist())),
                     degenerate=all(r.degenerate for r in rows), n=len(rows))


def one_against_all(gt_multiclass, class_id: int, nodata: Optional[int] = 0):
    """Binary ``class_id`` vs. rest, plus the mask of labeled pixels.

    Pixels equal to ``nodata`` are excluded from ``valid``; pass ``None`` to
    treat every pixel as labeled.
    """
    data = np.asarray(getattr(gt_multiclass, "data", gt_multiclass))
    if class_id == nodata:
        raise EmptyClassError(f"class {class_id} is the nodata value")
    gt_binary = data == class_id
    if not gt_binary.any():
        raise EmptyClassError(f"class {class_id} does not occur in the label raster")
    valid = np.ones(data.shape, dtype=bool) if nodata is None else data != nodata
    return gt_binary, valid


def evaluate_classes(preds: dict, gt_multiclass, mode: str = "macro", nodata: Optional[int] = 0) -> MetricRow:
    """Score per-class predictions with one-against-all.

    ``macro`` averages per-class rows (with their spread); ``pooled`` sums the
    confusion counts first.
    """
    if mode not in ("macro", "pooled"):
        raise ValueError("mode must be 'macro' or 'pooled'")
    counts = []
    for class_id, pred in sorted(preds.items()):
        gt_bin, valid = one_against_all(gt_multiclass, class_id, nodata)
        counts.append(confusion(pred, gt_bin, valid))
    if mode == "pooled":
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        return MetricRow.from_counts(total)
    return aggregate([MetricRow.from_counts(c) for c in counts])


@dataclass(frozen=True)
class ReportRow:
    platform: str
    target: str
    resolution: float
    prompt: str
    metrics: MetricRow
    dataset: str = ""
    aggregation: str = ""

    def cells(self) -> dict:
        out = {"platform": self.platform, "target": self.target,
               "resolution": f"{self.resolution:g} m", "prompt": self.prompt}
        out.update({m: self.metrics.cell(m) for m in METRICS})
        return out

    def to_json(self) -> dict:
        d = {"dataset": self.dataset, "platform": self.platform, "target": self.target,
             "resolution": self.resolution, "prompt": self.prompt}
        d.update(self.metrics.values())
        if self.metrics.std is not None:
            d.update({f"{m}_std": self.metrics.std[m] for m in METRICS})
        d.update(degenerate=self.metrics.degenerate, n=self.metrics.n,
                 std_kind="population", aggregation=self.aggregation)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ReportRow":
        std = None
        if "dice_std" in d:
            std = {m: d[f"{m}_std"] for m in METRICS}
        row = MetricRow(*(d[m] for m in METRICS), std=std, degenerate=d.get("degenerate", False),
                        n=d.get("n", 1))
        return cls(d["platform"], d["target"], float(d["resolution"]), d["prompt"], row,
                   d.get("dataset", ""), d.get("aggregation", ""))


def rows_to_csv(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r.cells())
    return buf.getvalue()


def rows_to_json(rows: Iterable[ReportRow]) -> str:
    return json.dumps([r.to_json() for r in rows], indent=2, sort_keys=True) + "\n"
