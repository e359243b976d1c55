"""Confusion-matrix IoU/mIoU evaluation with per-condition grouping."""
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import confusion_matrix

from app.exceptions import EvaluationError
from app.scene_synth import SegSample

logger = logging.getLogger(__name__)

ALL_GROUP = "All"


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; ignored pixels are only counted."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise EvaluationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        valid = gt != ignore_index
        self.ignored += int((~valid).sum())
        gt, pred = gt[valid], pred[valid]
        if gt.size == 0:
            return self
        for name, values in (("ground truth", gt), ("prediction", pred)):
            if values.min() < 0 or values.max() >= self.num_classes:
                raise EvaluationError(f"{name} holds class ids outside [0, {self.num_classes})")
        self.counts += confusion_matrix(gt, pred, labels=np.arange(self.num_classes)).astype(np.int64)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise EvaluationError("cannot add confusion matrices of different class counts")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        merged.ignored = self.ignored + other.ignored
        return merged

    @classmethod
    def from_counts(cls, counts, ignored: int = 0) -> "ConfusionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or (counts < 0).any():
            raise EvaluationError("counts must be a square non-negative matrix")
        cm = cls(counts.shape[0])
        cm.counts = counts.copy()
        cm.ignored = ignored
        return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where a class is neither present nor predicted."""
    intersection = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - intersection
    iou = np.full(cm.num_classes, np.nan)
    defined = union > 0
    iou[defined] = intersection[defined] / union[defined]
    return iou


def miou(cm: ConfusionMatrix) -> float:
    iou = iou_per_class(cm)
    if np.isnan(iou).all():
        raise EvaluationError("no class is defined in the confusion matrix")
    return float(np.nanmean(iou) * 100.0)


def grouped_report(cms: Sequence[ConfusionMatrix], groups: Sequence[str]) -> Dict[str, float]:
    if len(cms) != len(groups):
        raise EvaluationError("every confusion matrix needs a group label")
    if not cms:
        raise EvaluationError("nothing to report")
    summed: Dict[str, ConfusionMatrix] = OrderedDict()
    for cm, group in zip(cms, groups):
        summed[group] = summed[group] + cm if group in summed else cm + ConfusionMatrix(cm.num_classes)

    report = OrderedDict()
    for group in sorted(summed):
        if not summed[group].counts.any():
            logger.warning("Group '%s' has no evaluated pixels and is omitted", group)
            continue
        report[group] = miou(summed[group])
    overall = ConfusionMatrix(cms[0].num_classes)
    for cm in cms:
        overall = overall + cm
    report[ALL_GROUP] = miou(overall)
    return report


def upsample_nearest(pred: np.ndarray, shape) -> np.ndarray:
    if pred.shape == tuple(shape):
        return pred
    rows = (np.arange(shape[0]) * pred.shape[0] // shape[0]).astype(int)
    cols = (np.arange(shape[1]) * pred.shape[1] // shape[1]).astype(int)
    return pred[np.ix_(rows, cols)]


def predict(network: torch.nn.Module, images: np.ndarray, dtype: torch.dtype = torch.float32,
            batch_size: int = 16) -> np.ndarray:
    was_training = network.training
    network.eval()
    preds = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                batch = torch.as_tensor(np.stack(images[start:start + batch_size]), dtype=dtype)
                logits, _ = network(batch)
                preds.append(logits.argmax(dim=1).cpu().numpy())
    finally:
        network.train(was_training)
    return np.concatenate(preds)


@dataclass
class EvalReport:
    class_set: List[str]
    iou: List[Optional[float]]
    miou: float
    groups: Dict[str, float] = field(default_factory=dict)
    ignored: int = 0

    def to_dict(self) -> dict:
        return {
            "per_class_iou": dict(zip(self.class_set, self.iou)),
            "miou": self.miou,
            "groups": self.groups,
            "ignored_pixels": self.ignored,
        }

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    def render_table(self, method: str = "student") -> str:
        return render_table({method: self}, self.class_set)


def render_table(rows: Mapping[str, EvalReport], class_set: Sequence[str]) -> str:
    """Per-class IoU table, one row per method, percentages with one decimal."""
    names = [name[:10] for name in class_set]
    width = max(10, max(len(m) for m in rows) if rows else 10)
    header = f"{'Method':<{width}} | " + " | ".join(f"{n:>10}" for n in names) + f" | {'mIoU':>6}"
    lines = [header, "-" * len(header)]
    for method, report in rows.items():
        cells = ["{:>10}".format("-" if v is None else f"{v * 100:.1f}") for v in report.iou]
        lines.append(f"{method:<{width}} | " + " | ".join(cells) + f" | {report.miou:6.1f}")
    return "\n".join(lines)


def evaluate(network: torch.nn.Module, samples: Sequence[SegSample], masks: Mapping[str, np.ndarray],
             class_set: Sequence[str], dtype: torch.dtype = torch.float32) -> EvalReport:
    """Evaluate ``network`` on ``samples`` against ``masks`` keyed by sample id."""
    missing = [s.id for s in samples if s.id not in masks]
    if missing:
        raise EvaluationError(f"no ground truth for '{missing[0]}'")
    if not samples:
        raise EvaluationError("no samples to evaluate")
    num_classes, ignore_index = len(class_set), len(class_set)
    preds = predict(network, [s.image for s in samples], dtype=dtype)
    cms, groups = [], []
    for sample, pred in zip(samples, preds):
        gt = masks[sample.id]
        cms.append(ConfusionMatrix(num_classes).accumulate(upsample_nearest(pred, gt.shape), gt, ignore_index))
        groups.append(sample.group or ALL_GROUP)

    overall = ConfusionMatrix(num_classes)
    for cm in cms:
        overall = overall + cm
    iou = [None if np.isnan(v) else float(v) for v in iou_per_class(overall)]
    group_table = grouped_report(cms, groups)
    return EvalReport(class_set=list(class_set), iou=iou, miou=miou(overall), groups=group_table,
                      ignored=overall.ignored)
