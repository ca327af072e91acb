"""Semantic and completion metrics over unknown-masked voxels."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import ConfigError, DimensionError
from .model import LMSCNet, parse_scales
from .voxel import UNKNOWN, grid_to_input, majority_pool

IOU_ABSENT_MODES = ("exclude", "zero")


class ConfusionMatrix:
    """Counts indexed [prediction, truth]; voxels with unknown truth are skipped."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> None:
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        known = truth != UNKNOWN
        p = pred[known].astype(np.int64)
        t = truth[known].astype(np.int64)
        k = self.num_classes
        if p.size and (p.max() >= k or t.max() >= k):
            raise DimensionError(f"label id outside [0, {k - 1}]")
        self.counts += np.bincount(p * k + t, minlength=k * k).reshape(k, k)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_iou(self) -> list[float | None]:
        """IoU per class id; None where TP + FP + FN = 0."""
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=1) - tp
        fn = self.counts.sum(axis=0) - tp
        denom = tp + fp + fn
        return [float(tp[c] / denom[c]) if denom[c] else None for c in range(self.num_classes)]

    def completion(self) -> tuple[float, float, float]:
        """(IoU, precision, recall) of occupied = any non-free class; empty denominators give 0."""
        tp = int(self.counts[1:, 1:].sum())
        fp = int(self.counts[1:, 0].sum())
        fn = int(self.counts[0, 1:].sum())

        def ratio(a, b):
            return a / b if b else 0.0

        return ratio(tp, tp + fp + fn), ratio(tp, tp + fp), ratio(tp, tp + fn)


@dataclass
class ScaleMetrics:
    scale: int
    class_names: list[str]
    class_iou: list[float | None]
    miou: float
    completion_iou: float
    precision: float
    recall: float
    voxels: int

    @classmethod
    def from_confusion(cls, scale: int, cm: ConfusionMatrix, class_names: Iterable[str],
                       iou_absent: str = "exclude") -> ScaleMetrics:
        if iou_absent not in IOU_ABSENT_MODES:
            raise ConfigError(f"iou_absent must be one of {IOU_ABSENT_MODES}, got {iou_absent!r}")
        names = list(class_names)
        semantic = cm.class_iou()[1:]
        if len(names) != len(semantic):
            raise DimensionError(f"{len(names)} class names for {len(semantic)} semantic classes")
        if iou_absent == "zero":
            pool = [v or 0.0 for v in semantic]
        else:
            pool = [v for v in semantic if v is not None]
        miou = float(np.mean(pool)) if pool else 0.0
        iou, p, r = cm.completion()
        return cls(scale, names, semantic, miou, iou, p, r, cm.total)


@dataclass
class MetricsReport:
    scales: dict[int, ScaleMetrics] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({str(s): asdict(m) for s, m in sorted(self.scales.items())}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        doc = json.loads(text)
        return cls({int(s): ScaleMetrics(**m) for s, m in doc.items()})


def evaluate(model: LMSCNet, dataset, scales=(0,), iou_absent: str = "exclude") -> MetricsReport:
    """Confusion counts of argmax predictions against majority-pooled ground truth."""
    scales = parse_scales(scales)
    k = model.config.n_logits
    cms = {l: ConfusionMatrix(k) for l in scales}
    for sample in dataset:
        pred = model.predict(grid_to_input(sample.occupancy), scales)
        for l in scales:
            cms[l].update(pred[l][0], majority_pool(sample.labels, 2**l).labels)
    names = dataset.classes.names
    return MetricsReport({l: ScaleMetrics.from_confusion(l, cms[l], names, iou_absent) for l in scales})


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def format_report(report: MetricsReport, class_names: Iterable[str] | None = None) -> str:
    """Percentages with two decimals; one row per scale, '-' for undefined IoU."""
    if class_names is None:
        first = next(iter(report.scales.values()), None)
        class_names = first.class_names if first else []
    names = list(class_names)
    header = ["scale", "IoU", "Prec", "Recall"] + names + ["mIoU"]
    rows = []
    for s, m in sorted(report.scales.items()):
        rows.append([f"1:{2**s}", _pct(m.completion_iou), _pct(m.precision), _pct(m.recall)]
                    + [_pct(v) for v in m.class_iou] + [_pct(m.miou)])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in [header] + rows]
    return "\n".join(lines) + "\n"


def report_metrics(report: MetricsReport, sink: TextIO, json_sink: TextIO | None = None) -> str:
    """Write the table to ``sink`` and the JSON twin to ``json_sink``; returns the table."""
    table = format_report(report)
    sink.write(table)
    if json_sink is not None:
        json_sink.write(report.to_json())
    return table
