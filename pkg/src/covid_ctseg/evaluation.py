"""
Thresholding, confusion counts, segmentation metrics and annotation QA.
"""

import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .config import F1Formula, QaIssueKind, Roi
from .errors import InvalidArgument, IoError, ShapeError
from .preprocess import SlideSample, build_sample, resize_nearest
from .unet import ModelState, predict
from .volume_io import CtVolume

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class SlideMetrics:
    volume_id: str
    slide_index: int
    counts: ConfusionCounts
    metrics: Metrics


@dataclass
class MetricsReport:
    """Per-slide metrics plus macro (mean of slides) and micro (pooled counts) aggregates."""
    per_slide: List[SlideMetrics]
    macro: Metrics
    micro: Metrics
    micro_counts: ConfusionCounts
    threshold: float = DEFAULT_THRESHOLD
    f1_formula: F1Formula = F1Formula.STANDARD
    roi: Roi = Roi.SLIDE

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "volume_id": s.volume_id,
                    "slide": s.slide_index,
                    "tp": s.counts.tp,
                    "fp": s.counts.fp,
                    "fn": s.counts.fn,
                    "tn": s.counts.tn,
                    "acc": s.metrics.accuracy,
                    "pre": s.metrics.precision,
                    "rec": s.metrics.recall,
                    "f1": s.metrics.f1,
                }
                for s in self.per_slide
            ],
            columns=REPORT_COLUMNS,
        )


REPORT_COLUMNS = ["volume_id", "slide", "tp", "fp", "fn", "tn", "acc", "pre", "rec", "f1"]


@dataclass(frozen=True)
class QaIssue:
    """An annotation defect found on one slide."""
    kind: QaIssueKind
    volume_id: str
    slide_index: int
    offending_pixel_count: int


def threshold(pred: np.ndarray, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binarize probabilities; a value equal to ``t`` maps to 1."""
    if not 0.0 < t < 1.0:
        raise InvalidArgument(f"threshold must lie in (0, 1), got {t}")
    return (np.asarray(pred) >= t).astype(np.uint8)


def confusion(
    pred_bin: np.ndarray,
    truth_bin: np.ndarray,
    roi: Optional[np.ndarray] = None,
) -> ConfusionCounts:
    """Pixelwise confusion counts, optionally restricted to ``roi``."""
    pred = np.asarray(pred_bin).astype(bool)
    truth = np.asarray(truth_bin).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    if roi is None:
        region = np.ones(pred.shape, dtype=bool)
    else:
        region = np.asarray(roi).astype(bool)
        if region.shape != pred.shape:
            raise ShapeError(f"roi shape {region.shape} differs from maps {pred.shape}")

    tp = int(np.count_nonzero(pred & truth & region))
    fp = int(np.count_nonzero(pred & ~truth & region))
    fn = int(np.count_nonzero(~pred & truth & region))
    tn = int(np.count_nonzero(region)) - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metrics(c: ConfusionCounts, f1_formula: F1Formula = F1Formula.STANDARD) -> Metrics:
    """Accuracy, precision, recall and F1 with fixed zero-division conventions.

    A slide with no positives in either map scores precision = recall = 1.
    Otherwise an empty denominator scores 0, and F1 is 0 when P + R = 0.
    """
    accuracy = (c.tp + c.tn) / c.total if c.total else 1.0
    if c.tp + c.fp + c.fn == 0:
        precision = recall = 1.0
    else:
        precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
        recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0

    # count forms of 2PR/(P+R) and PR/(P+R), exact when P == R
    if c.tp + c.fp + c.fn == 0:
        f1 = 1.0 if F1Formula(f1_formula) == F1Formula.STANDARD else 0.5
    elif F1Formula(f1_formula) == F1Formula.PAPER:
        f1 = c.tp / (2 * c.tp + c.fp + c.fn)
    else:
        f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    return Metrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def _mean_metrics(items: Sequence[Metrics]) -> Metrics:
    # statistics.mean sums exactly, so identical rows average to themselves
    return Metrics(
        accuracy=statistics.mean(m.accuracy for m in items),
        precision=statistics.mean(m.precision for m in items),
        recall=statistics.mean(m.recall for m in items),
        f1=statistics.mean(m.f1 for m in items),
    )


def score_predictions(
    samples: Sequence[SlideSample],
    probabilities: np.ndarray,
    t: float = DEFAULT_THRESHOLD,
    f1_formula: F1Formula = F1Formula.STANDARD,
    roi: Roi = Roi.SLIDE,
) -> MetricsReport:
    """Build a report from already-computed N x S x S x 1 probabilities."""
    if not samples:
        raise InvalidArgument("cannot evaluate zero samples")
    probabilities = np.asarray(probabilities)
    if len(probabilities) != len(samples):
        raise ShapeError(f"{len(probabilities)} predictions for {len(samples)} samples")
    binary = threshold(probabilities, t)

    per_slide = []
    for sample, pred in zip(samples, binary):
        region = sample.input[..., 1:2] > 0.5 if Roi(roi) == Roi.LUNG else None
        counts = confusion(pred, sample.target, region)
        per_slide.append(
            SlideMetrics(sample.volume_id, sample.slide_index, counts, metrics(counts, f1_formula))
        )
    per_slide.sort(key=lambda s: (s.volume_id, s.slide_index))

    pooled = ConfusionCounts(0, 0, 0, 0)
    for slide in per_slide:
        pooled = pooled + slide.counts
    return MetricsReport(
        per_slide=per_slide,
        macro=_mean_metrics([s.metrics for s in per_slide]),
        micro=metrics(pooled, f1_formula),
        micro_counts=pooled,
        threshold=t,
        f1_formula=F1Formula(f1_formula),
        roi=Roi(roi),
    )


def evaluate(
    model: Union[ModelState, Predictor],
    samples: Sequence[SlideSample],
    t: float = DEFAULT_THRESHOLD,
    f1_formula: F1Formula = F1Formula.STANDARD,
    roi: Roi = Roi.SLIDE,
    batch_size: int = 8,
) -> MetricsReport:
    """Run ``model`` over ``samples`` and score every full slide.

    ``model`` is a ModelState or any callable mapping an input batch to
    probabilities of the same layout.
    """
    if not samples:
        raise InvalidArgument("cannot evaluate zero samples")
    batch = np.stack([s.input for s in samples])
    if isinstance(model, ModelState):
        probabilities = predict(model, batch, batch_size=batch_size)
    else:
        probabilities = np.asarray(model(batch))
    report = score_predictions(samples, probabilities, t, f1_formula, roi)
    logger.info(
        "evaluated %d slides: macro f1=%.4f micro f1=%.4f",
        len(samples), report.macro.f1, report.micro.f1,
    )
    return report


def predict_masks(
    model: ModelState,
    volume: CtVolume,
    t: float = DEFAULT_THRESHOLD,
    batch_size: int = 8,
) -> np.ndarray:
    """Binary predictions for every slide, mapped back to the volume's resolution."""
    size = model.config.input_size
    masks = np.zeros(volume.slices.shape, dtype=np.uint8)
    for start in range(0, volume.slide_count, batch_size):
        indices = range(start, min(start + batch_size, volume.slide_count))
        batch = np.stack([
            build_sample(
                volume.slices[i], volume.lung_masks[i], volume.covid_masks[i],
                volume.volume_id, i, size=size,
            ).input
            for i in indices
        ])
        binary = threshold(predict(model, batch, batch_size=batch_size), t)
        for i, pred in zip(indices, binary):
            masks[i] = resize_nearest(pred[..., 0], volume.slice_height, volume.slice_width)
    return masks


def worst_slides(report: MetricsReport, k: int = 5) -> List[SlideMetrics]:
    """The ``k`` slides with the lowest F1, ties broken by slide order."""
    return sorted(report.per_slide, key=lambda s: (s.metrics.f1, s.volume_id, s.slide_index))[:k]


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_report(report: MetricsReport, path: Union[str, Path]) -> None:
    """Write one row per slide followed by MACRO and MICRO aggregate rows."""
    rows = []
    for s in report.per_slide:
        m = s.metrics
        rows.append([
            s.volume_id, str(s.slide_index),
            str(s.counts.tp), str(s.counts.fp), str(s.counts.fn), str(s.counts.tn),
            _fmt(m.accuracy), _fmt(m.precision), _fmt(m.recall), _fmt(m.f1),
        ])
    macro, micro, pooled = report.macro, report.micro, report.micro_counts
    rows.append([
        "MACRO", "", "", "", "", "",
        _fmt(macro.accuracy), _fmt(macro.precision), _fmt(macro.recall), _fmt(macro.f1),
    ])
    rows.append([
        "MICRO", "", str(pooled.tp), str(pooled.fp), str(pooled.fn), str(pooled.tn),
        _fmt(micro.accuracy), _fmt(micro.precision), _fmt(micro.recall), _fmt(micro.f1),
    ])
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoError(f"cannot write report {path}: {e}") from e


def qa_annotations(volume: CtVolume) -> List[QaIssue]:
    """Find COVID marks outside the lung and on slides with no lung at all."""
    issues: List[QaIssue] = []
    for index in range(volume.slide_count):
        lung = np.asarray(volume.lung_masks[index]).astype(bool)
        covid = np.asarray(volume.covid_masks[index]).astype(bool)
        if not covid.any():
            continue
        if not lung.any():
            issues.append(QaIssue(
                QaIssueKind.COVID_WITHOUT_LUNG_SLIDE, volume.volume_id, index, int(covid.sum())
            ))
            continue
        outside = int(np.count_nonzero(covid & ~lung))
        if outside:
            issues.append(QaIssue(QaIssueKind.COVID_OUTSIDE_LUNG, volume.volume_id, index, outside))
    return issues


def summarize_issues(issues: Sequence[QaIssue]) -> Dict[str, Any]:
    """Counts of QA findings by kind."""
    stats: Dict[str, Any] = {
        "total_issues": len(issues),
        "by_kind": {},
        "offending_pixels": 0,
        "issues": [
            {
                "kind": QaIssueKind(issue.kind).value,
                "volume_id": issue.volume_id,
                "slide_index": issue.slide_index,
                "offending_pixel_count": issue.offending_pixel_count,
            }
            for issue in issues
        ],
    }
    for issue in issues:
        kind = QaIssueKind(issue.kind).value
        stats["by_kind"][kind] = stats["by_kind"].get(kind, 0) + 1
        stats["offending_pixels"] += issue.offending_pixel_count
    return stats
