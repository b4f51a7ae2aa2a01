"""Dice similarity coefficient and 95th-percentile Hausdorff distance."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError


def _check(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred, gt) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _check(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image border."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def nearest_rank(values: np.ndarray, q: int = 95) -> float:
    """Value at 1-based rank ceil(q/100 * n) of the sorted values."""
    n = len(values)
    rank = (q * n + 99) // 100
    return float(np.sort(values)[max(rank, 1) - 1])


def hd95(pred, gt) -> float | None:
    """Max of the two directed 95th-percentile boundary distances; None if a mask is empty."""
    a, b = _check(pred, gt)
    if not a.any() or not b.any():
        return None
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pb = np.argwhere(boundary(b)).astype(np.float64)
    return max(nearest_rank(kernels.min_distances(pa, pb)), nearest_rank(kernels.min_distances(pb, pa)))


@dataclass
class ClassMetric:
    class_id: int
    dsc: float
    hd95: float | None


@dataclass
class MetricReport:
    per_class: list = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([c.dsc for c in self.per_class])) if self.per_class else math.nan

    @property
    def mean_hd95(self) -> float | None:
        vals = [c.hd95 for c in self.per_class if c.hd95 is not None]
        return float(np.mean(vals)) if vals else None

    def to_text(self) -> str:
        lines = []
        for c in self.per_class:
            lines.append(f"class_{c.class_id}_dsc: {c.dsc:.6f}")
            lines.append(f"class_{c.class_id}_hd95: {_fmt(c.hd95)}")
        lines.append(f"mean_dsc: {self.mean_dsc:.6f}")
        lines.append(f"mean_hd95: {_fmt(self.mean_hd95)}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "dsc", "hd95"])
        for c in self.per_class:
            w.writerow([c.class_id, repr(c.dsc), "" if c.hd95 is None else repr(c.hd95)])
        return buf.getvalue()


def _fmt(v) -> str:
    return "missing" if v is None else f"{v:.6f}"


def sample_report(pred_labels, gt_labels, classes) -> MetricReport:
    return MetricReport([ClassMetric(k, dice_score(pred_labels == k, gt_labels == k),
                                     hd95(pred_labels == k, gt_labels == k)) for k in classes])


def evaluate(pred_labels, gt_labels, num_classes: int):
    """Per-sample reports over foreground classes and their dataset aggregate.

    Aggregate DSC per class is the mean over samples; aggregate HD95 per class
    is the mean over samples where it is defined.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DimensionError(f"prediction {pred_labels.shape} and label {gt_labels.shape} shapes differ")
    classes = range(1, num_classes)
    samples = [sample_report(p, g, classes) for p, g in zip(pred_labels, gt_labels)]
    agg = MetricReport()
    for i, k in enumerate(classes):
        dscs = [s.per_class[i].dsc for s in samples]
        hds = [s.per_class[i].hd95 for s in samples if s.per_class[i].hd95 is not None]
        agg.per_class.append(ClassMetric(k, float(np.mean(dscs)) if dscs else math.nan,
                                         float(np.mean(hds)) if hds else None))
    return samples, agg
