"""Classification and localization metrics.

Classification: per-class precision/recall/F1 from a confusion matrix and
the support-weighted macro F1. Localization: IoU of square boxes and a
threshold-count average precision, where a sample is a true positive at
threshold T iff IoU > T (strictly), averaged over the fixed threshold set.
Box extraction from heatmaps follows resize, normalize to [0, 255], keep
the [60, 180] band, and cover every remaining pixel with one square box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelError, UsageError
from .tensor import Tensor
from .warp import BBoxParams, WarpParams, params_to_bbox, resize_bilinear

LOC_THRESHOLDS = (0.1, 0.25, 0.5, 0.75, 0.9)
HEATMAP_BAND = (60.0, 180.0)


@dataclass
class ConfusionMatrix:
    """Class-by-class counts; rows index the truth, columns the prediction."""

    labels: list[str]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    """Everything one evaluation run reports.

    The classification block (per-class F1 and friends) and the
    localization block (per-threshold AP, mAP, raw IoUs) are each optional
    so box-only and label-only models share the same container.
    """

    name: str = ""
    class_names: list[str] = field(default_factory=list)
    support: np.ndarray | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f1: np.ndarray | None = None
    weighted_f1: float | None = None
    confusion: ConfusionMatrix | None = None
    n_samples: int = 0
    ap_per_threshold: dict[float, float] | None = None
    map_value: float | None = None
    ious: list[float] | None = None
    degenerate_heatmaps: int = 0

    def to_json_dict(self) -> dict:
        out: dict = {"name": self.name, "n_samples": self.n_samples}
        if self.f1 is not None:
            out["classes"] = list(self.class_names)
            out["support"] = [int(v) for v in self.support]
            out["precision"] = [float(v) for v in self.precision]
            out["recall"] = [float(v) for v in self.recall]
            out["f1"] = [float(v) for v in self.f1]
            out["weighted_f1"] = float(self.weighted_f1)
            out["confusion"] = [[int(v) for v in row] for row in self.confusion.counts]
        if self.ap_per_threshold is not None:
            out["ap"] = {repr(t): float(v) for t, v in sorted(self.ap_per_threshold.items())}
            out["map"] = float(self.map_value)
            out["ious"] = [float(v) for v in self.ious]
            out["degenerate_heatmaps"] = int(self.degenerate_heatmaps)
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "MetricsReport":
        rep = cls(name=obj.get("name", ""), n_samples=int(obj.get("n_samples", 0)))
        if "f1" in obj:
            rep.class_names = list(obj["classes"])
            rep.support = np.asarray(obj["support"], dtype=np.int64)
            rep.precision = np.asarray(obj["precision"])
            rep.recall = np.asarray(obj["recall"])
            rep.f1 = np.asarray(obj["f1"])
            rep.weighted_f1 = float(obj["weighted_f1"])
            rep.confusion = ConfusionMatrix(rep.class_names, np.asarray(obj["confusion"], dtype=np.int64))
        if "ap" in obj:
            rep.ap_per_threshold = {float(t): float(v) for t, v in obj["ap"].items()}
            rep.map_value = float(obj["map"])
            rep.ious = [float(v) for v in obj.get("ious", [])]
            rep.degenerate_heatmaps = int(obj.get("degenerate_heatmaps", 0))
        return rep

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_table(self) -> str:
        return render_comparison_table([self])


def render_comparison_table(reports: list["MetricsReport"]) -> str:
    """Fixed-width grid: one row per report, classes as columns, weighted average last."""
    classed = [r for r in reports if r.f1 is not None]
    classes: list[str] = []
    for r in classed:
        for c in r.class_names:
            if c not in classes:
                classes.append(c)
    headers = ["model"] + [f"F1:{c}" for c in classes] + ["F1:avg"]
    any_map = any(r.map_value is not None for r in reports)
    if any_map:
        headers.append("mAP")
    rows = [headers]
    for r in reports:
        row = [r.name or "(unnamed)"]
        for c in classes:
            if r.f1 is not None and c in r.class_names:
                row.append(f"{r.f1[r.class_names.index(c)]:.3f}")
            else:
                row.append("-")
        row.append(f"{r.weighted_f1:.3f}" if r.weighted_f1 is not None else "-")
        if any_map:
            row.append(f"{r.map_value:.3f}" if r.map_value is not None else "-")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for irow, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if irow == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# classification


def confusion_matrix(truth, pred, labels: list[str]) -> ConfusionMatrix:
    index = {label: i for i, label in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(truth, pred):
        if t not in index:
            raise LabelError(f"true label {t!r} is not in the class list {labels}")
        if p not in index:
            raise LabelError(f"predicted label {p!r} is not in the class list {labels}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(list(labels), counts)


def f1_report(truth, pred, labels=None, name: str = "") -> MetricsReport:
    """Per-class precision/recall/F1 plus the support-weighted macro F1.

    All 0/0 ratios (empty class, empty prediction) are defined as 0; a
    class absent from both truth and predictions has zero support and does
    not move the weighted average.
    """
    truth = list(truth)
    pred = list(pred)
    if len(truth) == 0:
        raise UsageError("f1_report: empty input")
    if len(truth) != len(pred):
        raise UsageError(f"f1_report: {len(truth)} true labels vs {len(pred)} predictions")
    if labels is None:
        labels = sorted(set(truth) | set(pred))
    cm = confusion_matrix(truth, pred, list(labels))
    c = len(cm.labels)
    support = cm.counts.sum(axis=1)
    predicted = cm.counts.sum(axis=0)
    precision = np.zeros(c)
    recall = np.zeros(c)
    f1 = np.zeros(c)
    for i in range(c):
        tp = float(cm.counts[i, i])
        precision[i] = tp / predicted[i] if predicted[i] > 0 else 0.0
        recall[i] = tp / support[i] if support[i] > 0 else 0.0
        denom = precision[i] + recall[i]
        f1[i] = (2.0 * precision[i] * recall[i]) / denom if denom > 0 else 0.0
    weighted = float(np.sum(support * f1) / np.sum(support))
    return MetricsReport(
        name=name,
        class_names=cm.labels,
        support=support,
        precision=precision,
        recall=recall,
        f1=f1,
        weighted_f1=weighted,
        confusion=cm,
        n_samples=len(truth),
    )


# ---------------------------------------------------------------------------
# localization


def iou(a: BBoxParams, b: BBoxParams) -> float:
    """Intersection over union of two axis-aligned square boxes."""
    r_lo = max(a.t_r - a.s, b.t_r - b.s)
    r_hi = min(a.t_r + a.s, b.t_r + b.s)
    c_lo = max(a.t_c - a.s, b.t_c - b.s)
    c_hi = min(a.t_c + a.s, b.t_c + b.s)
    inter = max(0.0, r_hi - r_lo) * max(0.0, c_hi - c_lo)
    union = (2.0 * a.s) * (2.0 * a.s) + (2.0 * b.s) * (2.0 * b.s) - inter
    if union <= 0.0:
        # both boxes degenerate to points
        return 1.0 if (a.t_r, a.t_c) == (b.t_r, b.t_c) else 0.0
    return inter / union


def map_score(ious) -> tuple[dict[float, float], float]:
    """Per-threshold average precision and its mean.

    AP(T) is the fraction of samples with IoU strictly above T; a sample
    sitting exactly on a threshold counts as a false positive there.
    """
    ious = list(ious)
    if not ious:
        raise UsageError("map_score: empty IoU list")
    arr = np.asarray(ious, dtype=np.float64)
    ap = {t: float(np.count_nonzero(arr > t)) / arr.size for t in LOC_THRESHOLDS}
    mean = sum(ap[t] for t in LOC_THRESHOLDS) / len(LOC_THRESHOLDS)
    return ap, mean


def heatmap_to_bbox(heatmap, target_h: int, target_w: int) -> tuple[BBoxParams, bool]:
    """Extract one square box from a single-channel activation map.

    The map is bilinearly resized to (target_h, target_w), min-max
    normalized to [0, 255], thresholded to the inclusive [60, 180] band,
    and the tight square hull of every remaining pixel is returned in
    normalized coordinates. A constant map (or an empty band) cannot be
    localized; those return the full-image box with the degenerate flag
    set.
    """
    arr = np.asarray(heatmap.data if isinstance(heatmap, Tensor) else heatmap, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise UsageError(f"heatmap_to_bbox: expected a non-empty 2-d map, got shape {tuple(arr.shape)}")
    if target_h < 2 or target_w < 2:
        raise ConfigError(f"heatmap_to_bbox: target must be at least 2x2, got {target_h}x{target_w}")
    if arr.shape[0] == 1 and arr.shape[1] == 1:
        resized = np.full((target_h, target_w), float(arr[0, 0]))
    else:
        if arr.shape[0] == 1 or arr.shape[1] == 1:
            arr = np.broadcast_to(arr, (max(arr.shape[0], 2), max(arr.shape[1], 2)))
        resized = resize_bilinear(arr, target_h, target_w)
    lo, hi = float(resized.min()), float(resized.max())
    if hi == lo:
        return BBoxParams(0.0, 0.0, 1.0), True
    norm = (resized - lo) / (hi - lo) * 255.0
    mask = (norm >= HEATMAP_BAND[0]) & (norm <= HEATMAP_BAND[1])
    if not mask.any():
        return BBoxParams(0.0, 0.0, 1.0), True
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    half_r = (target_h - 1) / 2.0
    half_c = (target_w - 1) / 2.0
    r0 = rows[0] / half_r - 1.0
    r1 = rows[-1] / half_r - 1.0
    c0 = cols[0] / half_c - 1.0
    c1 = cols[-1] / half_c - 1.0
    side = max(r1 - r0, c1 - c0)
    return BBoxParams((r0 + r1) / 2.0, (c0 + c1) / 2.0, side / 2.0), False


def ustn_bbox(params: WarpParams) -> BBoxParams:
    """Predicted box of a spatial-transformer warp; see :func:`params_to_bbox`."""
    return params_to_bbox(params)
