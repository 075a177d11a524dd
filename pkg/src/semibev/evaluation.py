"""IoU evaluation over a dataset, ignoring cells the camera cannot see."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelParams, forward
from .synthworld import CLASS_NAMES, Sample


@dataclass
class EvalReport:
    intersection: np.ndarray
    union: np.ndarray
    n_samples: int = 0
    class_names: tuple = field(default=CLASS_NAMES)

    @classmethod
    def empty(cls, num_classes: int = len(CLASS_NAMES), class_names=None) -> "EvalReport":
        names = tuple(class_names) if class_names else CLASS_NAMES[:num_classes]
        return cls(np.zeros(num_classes, dtype=np.int64), np.zeros(num_classes, dtype=np.int64), 0, names)

    @property
    def iou(self) -> list[float | None]:
        """Per-class IoU; None where the class never appeared (zero union)."""
        return [None if u == 0 else float(i) / float(u) for i, u in zip(self.intersection, self.union)]

    @property
    def miou(self) -> float | None:
        vals = [v for v in self.iou if v is not None]
        return float(np.mean(vals)) if vals else None

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.intersection + other.intersection, self.union + other.union,
                          self.n_samples + other.n_samples, self.class_names)

    def to_tsv(self) -> str:
        lines = ["class\tintersection\tunion\tiou"]
        for name, i, u, v in zip(self.class_names, self.intersection, self.union, self.iou):
            lines.append(f"{name}\t{i}\t{u}\t{format_metric(v)}")
        lines.append(f"mIoU\t\t\t{format_metric(self.miou)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max(len(n) for n in self.class_names + ("mIoU",))
        rows = [f"{'class':<{width}}  {'IoU':>8}"]
        for name, v in zip(self.class_names, self.iou):
            rows.append(f"{name:<{width}}  {format_metric(v):>8}")
        rows.append(f"{'mIoU':<{width}}  {format_metric(self.miou):>8}")
        rows.append(f"({self.n_samples} samples)")
        return "\n".join(rows)


def format_metric(v: float | None) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    arr = pred.data if isinstance(pred, T.Tensor) else np.asarray(pred)
    return arr >= threshold


def accumulate_iou(pred, gt, mask, report: EvalReport) -> EvalReport:
    """Add one sample's counts (C×Z×X pred/gt, Z×X mask) to ``report``."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape[-2:] != mask.shape:
        raise ValueError(f"accumulate_iou: shapes {pred.shape}, {gt.shape}, mask {mask.shape}")
    inter = (pred & gt & mask).sum(axis=(-2, -1))
    union = ((pred | gt) & mask).sum(axis=(-2, -1))
    report.intersection = report.intersection + inter
    report.union = report.union + union
    report.n_samples += 1
    return report


def evaluate(params: ModelParams, dataset: list[Sample], threshold: float = 0.5,
             batch_size: int = 16) -> EvalReport:
    """Teacher-style evaluation: forward each labeled sample, threshold, count."""
    if any(s.gt_bev is None for s in dataset):
        raise ValueError("evaluation needs ground truth for every sample")
    binarize(np.zeros(1), threshold)  # validates threshold before any work
    report = EvalReport.empty(params.config.num_classes)
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            images = np.stack([s.image for s in chunk])
            out = forward(params, images, [s.intrinsics for s in chunk])
            preds = binarize(out.segmentation, threshold)
            for s, p in zip(chunk, preds):
                accumulate_iou(p, s.gt_bev.values, s.visibility, report)
    return report
