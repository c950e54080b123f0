"""Voxelwise evaluation metrics and report emission.

Precision/recall are voxel counts for one organ label. ROC sweeps a
threshold over a probability map against a binary ground truth (positive
means probability >= threshold) and integrates with the trapezoid rule,
which equals the pairwise-comparison (Mann-Whitney) estimator with ties
counted one half. Reports are emitted deterministically: organ rows follow
the fixed order RightKidney, LeftKidney, Liver, Spleen, Prostate.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParameterError, ShapeError
from .geometry import GeoMeasurements
from .grid import LabelMask, OrganId, same_geometry
from .rpn import MeasurementOutput

REPORT_ORGAN_ORDER = (
    OrganId.RIGHT_KIDNEY,
    OrganId.LEFT_KIDNEY,
    OrganId.LIVER,
    OrganId.SPLEEN,
    OrganId.PROSTATE,
)

REPORT_ORGAN_NAMES = {
    OrganId.RIGHT_KIDNEY: "RightKidney",
    OrganId.LEFT_KIDNEY: "LeftKidney",
    OrganId.LIVER: "Liver",
    OrganId.SPLEEN: "Spleen",
    OrganId.PROSTATE: "Prostate",
}


@dataclass(frozen=True)
class OrganMetrics:
    precision: Optional[float]
    recall: Optional[float]
    auc: Optional[float]
    mse: Optional[float]
    mse_raw_units: Optional[float] = None


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass(frozen=True, eq=False)
class OrganReport:
    organ: OrganId
    geometric: GeoMeasurements
    learned: Optional[MeasurementOutput]
    metrics: OrganMetrics
    roc: tuple[RocPoint, ...]


@dataclass(frozen=True, eq=False)
class MeasurementReport:
    organs: tuple[OrganReport, ...]
    config_digest: str
    seed: int
    timestamps: dict


def precision_recall(pred: LabelMask, truth: LabelMask, organ: OrganId):
    """(precision, recall) for one organ; absent (None) on zero denominators."""
    if not same_geometry(pred, truth):
        raise ShapeError("prediction and ground truth geometries differ")
    p = pred.labels == int(organ)
    t = truth.labels == int(organ)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def roc_auc(probabilities: np.ndarray, truth: np.ndarray, max_points: int = 256):
    """(auc, [RocPoint]) over a probability map and a boolean ground truth.

    Thresholds are the unique scores plus +/-inf sentinels; a voxel is
    predicted positive when its probability is >= the threshold. Returns
    (None, []) when the ground truth has only one class.
    """
    scores = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    gt = np.asarray(truth).reshape(-1).astype(bool)
    if scores.shape != gt.shape:
        raise ShapeError("probability map and ground truth sizes differ")
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None, []
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    g_sorted = gt[order]
    tp_cum = np.cumsum(g_sorted)
    fp_cum = np.cumsum(~g_sorted)
    # keep the last row of each tied-score group (all ties flip together)
    last_of_group = np.ones(scores.size, dtype=bool)
    last_of_group[:-1] = s_sorted[:-1] != s_sorted[1:]
    thr = s_sorted[last_of_group]
    tpr = tp_cum[last_of_group] / n_pos
    fpr = fp_cum[last_of_group] / n_neg
    thresholds = np.concatenate([[np.inf], thr, [-np.inf]])
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    auc = float(np.trapezoid(tpr, fpr))
    points = [RocPoint(float(t), float(f), float(p)) for t, f, p in zip(thresholds, fpr, tpr)]
    if len(points) > max_points:
        idx = np.unique(np.linspace(0, len(points) - 1, max_points).round().astype(int))
        points = [points[i] for i in idx]
    return auc, points


def measurement_mse(pred_values, gt_values, scales=None) -> float:
    """MSE between paired lists after normalization by the fixed scales."""
    pred = np.asarray(pred_values, dtype=np.float64)
    gt = np.asarray(gt_values, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("paired lists must have equal length")
    if scales is not None:
        s = np.asarray(scales, dtype=np.float64)
        pred = pred / s
        gt = gt / s
    return float(np.mean((pred - gt) ** 2))


def _round_float(v, ndigits=None):
    if v is None:
        return None
    f = float(v)
    if np.isnan(f):
        return None
    return f


def report_to_dict(report: MeasurementReport) -> dict:
    seen = set()
    organs = []
    by_organ = {r.organ: r for r in report.organs}
    for r in report.organs:
        if r.organ in seen:
            raise ParameterError(f"organ {r.organ.name} appears twice in the report")
        seen.add(r.organ)
    for organ in REPORT_ORGAN_ORDER:
        if organ not in by_organ:
            continue
        r = by_organ[organ]
        organs.append(
            {
                "organ": REPORT_ORGAN_NAMES[organ],
                "precision": _round_float(r.metrics.precision),
                "recall": _round_float(r.metrics.recall),
                "auc": _round_float(r.metrics.auc),
                "mse": _round_float(r.metrics.mse),
                "mse_raw_units": _round_float(r.metrics.mse_raw_units),
                "measurements_geometric": r.geometric.to_dict(),
                "measurements_learned": None if r.learned is None else r.learned.to_dict(),
            }
        )
    return {
        "config_digest": report.config_digest,
        "seed": report.seed,
        "timestamps": report.timestamps,
        "organs": organs,
    }


def emit_report(report: MeasurementReport, out_dir) -> tuple[Path, Path]:
    """Write report.json and roc.csv; byte-deterministic for equal inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    roc_path = out_dir / "roc.csv"
    doc = report_to_dict(report)
    report_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    by_organ = {r.organ: r for r in report.organs}
    with roc_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["organ", "threshold", "fpr", "tpr"])
        for organ in REPORT_ORGAN_ORDER:
            if organ not in by_organ:
                continue
            for pt in by_organ[organ].roc:
                writer.writerow(
                    [REPORT_ORGAN_NAMES[organ], repr(pt.threshold), repr(pt.fpr), repr(pt.tpr)]
                )
    return report_path, roc_path


def read_roc_csv(path) -> dict:
    """Parse roc.csv back into {organ: [RocPoint]} (exact round trip)."""
    out: dict[OrganId, list[RocPoint]] = {}
    names = {v: k for k, v in REPORT_ORGAN_NAMES.items()}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["organ", "threshold", "fpr", "tpr"]:
            raise ParameterError(f"unexpected roc.csv header {header}")
        for organ_name, thr, fpr, tpr in reader:
            out.setdefault(names[organ_name], []).append(
                RocPoint(float(thr), float(fpr), float(tpr))
            )
    return out
