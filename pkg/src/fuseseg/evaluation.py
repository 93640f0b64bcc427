"""Confusion matrices, IoU metrics, modality ablation, report emission.

mIoU averages the per-class IoU over classes whose union is non-empty;
classes absent from both prediction and ground truth are excluded. A
missing modality at inference time means its input channel is zeroed,
matching the training-time masking semantics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataio import CLASS_NAMES, IGNORE, NUM_CLASSES, FrameBundle
from .model import Params, predict

RADAR_AXES = ("val_miou", "test_miou") + tuple(f"test_iou_{n}" for n in CLASS_NAMES)


class EvalError(ValueError):
    pass


@dataclass(eq=False)
class ConfusionMatrix:
    """counts[gt, pred] over non-ignored pixels."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(eq=False)
class MetricsReport:
    """Per-class IoU (nan where undefined), their mean, and gt pixel counts."""

    per_class_iou: np.ndarray
    miou: float
    per_class_pixels: np.ndarray

    def defined(self) -> np.ndarray:
        return np.isfinite(self.per_class_iou)


@dataclass(eq=False)
class AblationReport:
    """MetricsReport per non-empty modality subset, keyed by subset tuple."""

    modalities: tuple[str, ...]
    reports: dict[tuple[str, ...], MetricsReport]

    def monotonic(self) -> bool:
        """Diagnostic: does mIoU never decrease when a modality is added?"""
        for subset, report in self.reports.items():
            for larger, other in self.reports.items():
                if set(subset) < set(larger) and other.miou < report.miou - 1e-12:
                    return False
        return True


def confusion(pred: np.ndarray, gt: np.ndarray,
              num_classes: int = NUM_CLASSES,
              ignore_id: int = IGNORE) -> ConfusionMatrix:
    """Count (gt, pred) pairs over pixels whose ground truth is not ignored."""
    if pred.shape != gt.shape:
        raise EvalError(f"prediction {pred.shape} does not match labels {gt.shape}")
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes):
        raise EvalError("class id outside the confusion matrix range")
    counts = np.bincount(g * num_classes + p,
                         minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def iou(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class intersection over union from a confusion matrix.

    Classes with an empty union are undefined (nan) and excluded from the
    mean; with no defined class the mIoU itself is nan.
    """
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.nan)
    defined = np.isfinite(per_class)
    miou = float(per_class[defined].mean()) if defined.any() else float("nan")
    return MetricsReport(per_class_iou=per_class, miou=miou,
                         per_class_pixels=cm.counts.sum(axis=1))


def evaluate(params: Params, bundles: list[FrameBundle],
             mask: frozenset = frozenset()) -> MetricsReport:
    """Aggregate metrics of the joint prediction over a list of frames."""
    cm = ConfusionMatrix.zeros(params.config.classes)
    for bundle in bundles:
        cm.add(confusion(predict(params, bundle, mask), bundle.labels,
                         num_classes=params.config.classes))
    return iou(cm)


def ablation_sweep(params: Params, bundles: list[FrameBundle],
                   modalities: tuple[str, ...] = ("rgb", "thermal", "lidar"),
                   ) -> AblationReport:
    """Evaluate every non-empty modality subset, zeroing the complement.

    Subsets are enumerated by ascending bitmask over the given modality
    order, so the full set comes last and equals a plain evaluation.
    """
    if not bundles:
        raise EvalError("ablation sweep needs a non-empty dataset")
    reports: dict[tuple[str, ...], MetricsReport] = {}
    m = len(modalities)
    for bits in range(1, 2 ** m):
        subset = tuple(mod for i, mod in enumerate(modalities) if bits >> i & 1)
        masked = frozenset(mod for mod in modalities if mod not in subset)
        reports[subset] = evaluate(params, bundles, masked)
    return AblationReport(modalities=tuple(modalities), reports=reports)


# ---------------------------------------------------------------------------
# Report emission


def subset_label(subset: tuple[str, ...]) -> str:
    return "+".join(subset)


def emit_report(reports: Mapping[str, MetricsReport], directory: Path,
                csv_name: str = "metrics.csv", md_name: str = "report.md",
                title: str = "Evaluation") -> None:
    """Write a long-format CSV at full precision and a 2-decimal markdown table."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / csv_name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "metric", "value"])
            for label, report in reports.items():
                writer.writerow([label, "miou", repr(report.miou)])
                for name, val in zip(CLASS_NAMES, report.per_class_iou):
                    writer.writerow([label, f"iou_{name}", repr(float(val))])
                for name, px in zip(CLASS_NAMES, report.per_class_pixels):
                    writer.writerow([label, f"pixels_{name}", repr(int(px))])

        def fmt(x: float) -> str:
            return "-" if not np.isfinite(x) else f"{x:.2f}"

        lines = [f"# {title}", "",
                 "| label | mIoU | " + " | ".join(CLASS_NAMES) + " |",
                 "|" + "---|" * (2 + len(CLASS_NAMES))]
        for label, report in reports.items():
            cells = [label, fmt(report.miou)] + [fmt(v) for v in report.per_class_iou]
            lines.append("| " + " | ".join(cells) + " |")
        (directory / md_name).write_text("\n".join(lines) + "\n")
    except OSError as err:
        raise EvalError(f"cannot write report under {directory}: {err}") from err


def parse_metrics_csv(path: Path) -> dict[str, dict[str, float]]:
    """Inverse of the emit_report CSV: label -> metric -> value."""
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["label"], {})[row["metric"]] = float(row["value"])
    return out


def write_radar_csv(val_report: MetricsReport, test_report: MetricsReport,
                    path: Path) -> None:
    """Axis/value rows: validation mIoU, test mIoU, per-class test IoU."""
    values = [val_report.miou, test_report.miou, *test_report.per_class_iou]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value"])
        for axis, val in zip(RADAR_AXES, values):
            writer.writerow([axis, repr(float(val))])


def read_radar_csv(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["axis"]: float(row["value"]) for row in csv.DictReader(fh)}


def ablation_rows(report: AblationReport) -> dict[str, MetricsReport]:
    return {subset_label(s): r for s, r in report.reports.items()}
