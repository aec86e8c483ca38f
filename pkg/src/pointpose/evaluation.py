"""Detection and pose scoring: 3D box overlap, true-positive rule, PR curves, timing."""
import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .cloud import Aabb, bounding_box
from .exceptions import DegenerateBox, EmptyCrop, EmptyProjection, InvalidParameter, UndefinedRecall
from .ingestion import crop_by_bbox

IOU_THRESHOLD = 0.25
MIR_THRESHOLD = 0.90
MIN_CORRESPONDENCES = 3
STAGES = ("classify", "coarse", "icp")


def _intersection_volume(a, b):
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    return float(np.prod(np.clip(hi - lo, 0.0, None)))


def iou_3d(gt, est):
    """Intersection volume over union volume; 0 for disjoint or zero-volume pairs."""
    inter = _intersection_volume(gt, est)
    union = gt.volume + est.volume - inter
    return inter / union if union > 0 else 0.0


def mir(gt, est):
    """Intersection volume over the estimated box's volume."""
    if est.volume <= 0:
        raise DegenerateBox("estimated box has zero volume")
    return _intersection_volume(gt, est) / est.volume


def is_true_positive(iou, mir_value):
    if not (0.0 <= iou <= 1.0 and 0.0 <= mir_value <= 1.0):
        raise InvalidParameter(f"iou/mir must lie in [0, 1], got {iou}, {mir_value}")
    return iou >= IOU_THRESHOLD or mir_value >= MIR_THRESHOLD


def project_gt_box(bbox2d, depth, K):
    """Aabb of every valid-depth pixel inside a 2D box, back-projected."""
    try:
        cloud = crop_by_bbox(depth, None, K, bbox2d)
    except EmptyCrop:
        raise EmptyProjection(f"no valid depth inside bbox {tuple(bbox2d)}") from None
    return bounding_box(cloud)


@dataclass
class DetectionRecord:
    """One object hypothesis for one annotated box.

    ``iou``/``mir``/``est_box`` stay ``None`` when the pose stages did not
    run or failed; ``error`` names the failure (``"NoMatch"``, ...).
    """

    frame_id: str
    instance_label: str
    predicted_label: Optional[str] = None
    correspondence_count: int = 0
    est_box: Optional[Aabb] = None
    gt_box: Optional[Aabb] = None
    iou: Optional[float] = None
    mir: Optional[float] = None
    stage_timings: Dict[str, float] = field(default_factory=dict)
    is_true_positive: bool = False
    mode: str = "Full"
    method: Optional[str] = None
    view_id: Optional[str] = None
    transform: Optional[dict] = None
    inlier_ratio: Optional[float] = None
    inlier_rmse: Optional[float] = None
    icp_fitness: Optional[float] = None
    icp_rmse: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self):
        d = asdict(self)
        d["est_box"] = None if self.est_box is None else self.est_box.to_dict()
        d["gt_box"] = None if self.gt_box is None else self.gt_box.to_dict()
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("est_box", "gt_box"):
            if data.get(key) is not None:
                data[key] = Aabb.from_dict(data[key])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class PrCurve:
    thresholds: List[int]
    precision: List[float]
    recall: List[float]
    auc: float

    @property
    def points(self):
        return list(zip(self.thresholds, self.precision, self.recall))

    def to_dict(self):
        return {
            "points": [{"threshold": t, "precision": p, "recall": r} for t, p, r in self.points],
            "auc": self.auc,
            "convention": ("thresholds 3..max correspondence count; points ordered by "
                           "recall ascending then threshold descending; anchor at "
                           "(recall 0, precision at the highest threshold); trapezoid rule"),
        }


def prc_auc(records, gt_count):
    """Precision-recall over the minimum-correspondence threshold.

    For every integer threshold from 3 to the largest correspondence count,
    detections with at least that many correspondences are kept;
    precision is TP / kept and recall is TP / ``gt_count``. ``gt_count``
    is the total number of ground-truth objects, or a mapping of per-frame
    counts.
    """
    total = sum(gt_count.values()) if isinstance(gt_count, dict) else int(gt_count)
    if total <= 0:
        raise UndefinedRecall("no ground-truth objects")
    counts = np.array([r.correspondence_count for r in records], dtype=np.int64)
    tp = np.array([bool(r.is_true_positive) for r in records], dtype=bool)
    top = int(counts.max()) if len(counts) else 0
    thresholds, precision, recall = [], [], []
    for tau in range(MIN_CORRESPONDENCES, top + 1):
        kept = counts >= tau
        n_kept = int(kept.sum())
        if n_kept == 0:
            continue
        n_tp = int((kept & tp).sum())
        thresholds.append(tau)
        precision.append(n_tp / n_kept)
        recall.append(n_tp / total)
    if not thresholds:
        return PrCurve([], [], [], 0.0)
    order = sorted(range(len(thresholds)), key=lambda i: (recall[i], -thresholds[i]))
    r = np.array([0.0] + [recall[i] for i in order])
    p = np.array([precision[int(np.argmax(thresholds))]] + [precision[i] for i in order])
    auc = float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))
    return PrCurve(thresholds, precision, recall, auc)


def _column(values):
    if not values:
        return None
    mean = float(np.mean(values))
    return {"mean_seconds": mean, "fps": (1.0 / mean) if mean > 0 else None, "count": len(values)}


def aggregate_timings(records):
    """Mean seconds and FPS for classify-only, classify+coarse and the full
    chain. Records contribute only to columns whose stages they ran."""
    cols = {"classify": [], "classify+coarse": [], "classify+coarse+icp": []}
    for r in records:
        t = r.stage_timings or {}
        if "classify" not in t:
            continue
        cols["classify"].append(t["classify"])
        if "coarse" in t:
            cols["classify+coarse"].append(t["classify"] + t["coarse"])
            if "icp" in t:
                cols["classify+coarse+icp"].append(t["classify"] + t["coarse"] + t["icp"])
    return {k: _column(v) for k, v in cols.items() if v}


def timing_table(records):
    """Timing columns per coarse method, e.g. ``{"RANSAC": {...}, "FGR": {...}}``."""
    by_method = {}
    for r in records:
        by_method.setdefault(r.method or "none", []).append(r)
    return {m: aggregate_timings(rs) for m, rs in sorted(by_method.items())}


def evaluation_report(records, gt_count):
    curve = prc_auc(records, gt_count) if (sum(gt_count.values()) if isinstance(gt_count, dict) else gt_count) else PrCurve([], [], [], 0.0)
    return {
        "records": [r.to_dict() for r in records],
        "prc": curve.to_dict(),
        "auc": curve.auc,
        "timing": timing_table(records),
        "counts": {
            "records": len(records),
            "true_positives": int(sum(r.is_true_positive for r in records)),
            "ground_truth": int(sum(gt_count.values()) if isinstance(gt_count, dict) else gt_count),
        },
    }


def write_report(report, json_path, csv_path=None):
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for pt in report["prc"]["points"]:
                w.writerow([pt["threshold"], pt["precision"], pt["recall"]])
