"""Three-stage recognition and pose pipeline over annotated RGB-D frames.

Stage 1 classifies each annotated box from a color embedding. Stage 2
registers sampled database views of the predicted instance against the
box's point cloud and keeps the best view. Stage 3 refines that pose with
point-to-plane ICP. ``execution_mode`` decides how many stages run.
"""
import dataclasses
import json
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cloud import apply_transform, bounding_box
from .evaluation import DetectionRecord, evaluation_report, is_true_positive, iou_3d, mir, project_gt_box
from .exceptions import InvalidParameter, PointPoseError
from .fpfh import describe
from .icp import PointToPlaneICP
from .ingestion import crop_by_bbox, crop_rgb, load_depth, load_manifest, load_rgb
from .ply import read_ply
from .recognition import (
    ModelDatabase,
    build_view,
    extract_baseline_embedding,
    load_external_embedding,
    select_best_view,
    select_views,
)
from .validation import check_positive, check_positive_int

MODES = ("ClassifyOnly", "Coarse", "Full")
METHODS = ("RANSAC", "FGR")

# nested JSON sections -> flat field names
_NESTED = {
    "ransac": {"max_iterations": "ransac_max_iterations", "validation": "ransac_validation"},
    "fgr": {"iterations": "fgr_iterations", "tuple_ratio": "fgr_tuple_ratio"},
    "icp": {"max_dist_m": "icp_max_dist_m", "max_iterations": "icp_max_iterations",
            "rel_tol": "icp_rel_tol"},
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline. Distances are in meters.

    ``view_viewpoint`` orients normals of database views: ``"origin"`` for
    views captured in camera coordinates, ``"centroid"`` for complete
    object models. Scene crops always orient toward the camera.
    ``mutual_matching`` left as None means one-way matching for RANSAC and
    mutual matching for FGR.
    """

    leaf_m: float = 0.01
    normal_radius_m: float = 0.03
    fpfh_radius_m: float = 0.05
    inlier_threshold_m: float = 0.01
    coarse_method: str = "RANSAC"
    ransac_max_iterations: int = 4_000_000
    ransac_validation: int = 500
    fgr_iterations: int = 100
    fgr_tuple_ratio: float = 0.9
    mutual_matching: Optional[bool] = None
    icp_max_dist_m: float = 0.01
    icp_max_iterations: int = 30
    icp_rel_tol: float = 1e-6
    views_per_instance: int = 10
    min_correspondences: int = 3
    seed: int = 0
    execution_mode: str = "Full"
    n_workers: int = 1
    view_viewpoint: str = "origin"

    def __post_init__(self):
        for name in ("leaf_m", "normal_radius_m", "fpfh_radius_m", "inlier_threshold_m",
                     "icp_max_dist_m"):
            check_positive(getattr(self, name), name)
        for name in ("ransac_max_iterations", "ransac_validation", "fgr_iterations",
                     "views_per_instance", "n_workers"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.icp_max_iterations, "icp_max_iterations", minimum=0)
        check_positive_int(self.min_correspondences, "min_correspondences", minimum=3)
        if not 0 < self.fgr_tuple_ratio < 1:
            raise InvalidParameter("fgr_tuple_ratio must lie in (0, 1)")
        if self.mutual_matching not in (None, True, False):
            raise InvalidParameter("mutual_matching must be true, false or null")
        if self.icp_rel_tol < 0:
            raise InvalidParameter("icp_rel_tol must be non-negative")
        if self.coarse_method not in METHODS:
            raise InvalidParameter(f"coarse_method must be one of {METHODS}")
        if self.execution_mode not in MODES:
            raise InvalidParameter(f"execution_mode must be one of {MODES}")
        if self.view_viewpoint not in ("origin", "centroid"):
            raise InvalidParameter("view_viewpoint must be 'origin' or 'centroid'")

    @classmethod
    def from_dict(cls, data):
        """Accept flat field names and the nested ``ransac``/``fgr``/``icp`` sections."""
        flat = {}
        fields = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key in _NESTED and isinstance(value, dict):
                for sub, sub_value in value.items():
                    if sub not in _NESTED[key]:
                        raise InvalidParameter(f"unknown config key {key}.{sub}")
                    flat[_NESTED[key][sub]] = sub_value
            elif key in fields:
                flat[key] = value
            else:
                raise InvalidParameter(f"unknown config key {key!r}")
        return cls(**flat)

    @classmethod
    def load(cls, path, **overrides):
        with open(path) as fh:
            data = json.load(fh)
        cfg = cls.from_dict(data)
        return cfg.replace(**overrides) if overrides else cfg

    def replace(self, **changes):
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self):
        out = dataclasses.asdict(self)
        for section, keys in _NESTED.items():
            out[section] = {sub: out.pop(flat) for sub, flat in keys.items()}
        return out

    def coarse_params(self):
        if self.coarse_method == "RANSAC":
            params = {"max_iterations": self.ransac_max_iterations,
                      "validation_steps": self.ransac_validation,
                      "inlier_threshold": self.inlier_threshold_m, "seed": self.seed}
        else:
            params = {"iterations": self.fgr_iterations, "inlier_threshold": self.inlier_threshold_m,
                      "tuple_ratio": self.fgr_tuple_ratio, "seed": self.seed}
        if self.mutual_matching is not None:
            params["mutual"] = self.mutual_matching
        return params

    def view_viewpoint_value(self):
        return "centroid" if self.view_viewpoint == "centroid" else (0.0, 0.0, 0.0)


class DistanceTrigger:
    """Mode policy: run the pose stages only for nearby objects.

    A frame gets ``near_mode`` when the median valid depth inside its
    annotated boxes is at most ``max_depth_m``, otherwise ``far_mode``.
    """

    def __init__(self, max_depth_m=1.5, near_mode="Full", far_mode="ClassifyOnly", depth_scale=1000.0):
        self.max_depth_m = check_positive(max_depth_m, "max_depth_m")
        if near_mode not in MODES or far_mode not in MODES:
            raise InvalidParameter(f"modes must be among {MODES}")
        self.near_mode = near_mode
        self.far_mode = far_mode
        self.depth_scale = depth_scale

    def __call__(self, frame, depth, cfg):
        values = []
        for a in frame.annotations:
            x, y, w, h = (int(round(v)) for v in a.bbox)
            patch = depth[max(y, 0):max(y + h, 0), max(x, 0):max(x + w, 0)]
            values.append(patch[patch > 0])
        values = np.concatenate(values) if values else np.zeros(0)
        if len(values) == 0:
            return self.far_mode
        near = np.median(values) / self.depth_scale <= self.max_depth_m
        return self.near_mode if near else self.far_mode


def _static_mode(frame, depth, cfg):
    return cfg.execution_mode


def _annotation_seed(cfg, frame_id, index):
    ss = np.random.SeedSequence([cfg.seed, zlib.crc32(str(frame_id).encode()), index])
    return int(ss.generate_state(1)[0])


def _classify(rgb, ann, model, embedding):
    if embedding is None:
        embedding = extract_baseline_embedding(crop_rgb(rgb, ann.bbox), model.dim)
    label, _ = model.predict(embedding)
    return label


def process_annotation(frame_id, ann, index, rgb, depth, K, db, model, cfg, mode, embedding=None):
    """Run the enabled stages for one annotated box; never raises pipeline errors."""
    rec = DetectionRecord(frame_id, ann.label, mode=mode,
                          method=None if mode == "ClassifyOnly" else cfg.coarse_method)
    timings = rec.stage_timings
    try:
        t0 = time.perf_counter()
        rec.predicted_label = _classify(rgb, ann, model, embedding)
        timings["classify"] = time.perf_counter() - t0
        if mode == "ClassifyOnly":
            return rec

        t0 = time.perf_counter()
        crop = crop_by_bbox(depth, rgb, K, ann.bbox)
        scene, scene_features = describe(crop, cfg.leaf_m, cfg.normal_radius_m, cfg.fpfh_radius_m)
        views = select_views(db, rec.predicted_label, cfg.views_per_instance,
                             _annotation_seed(cfg, frame_id, index))
        view, coarse = select_best_view(scene, scene_features, views, cfg.coarse_method,
                                        cfg.coarse_params(), min_inliers=cfg.min_correspondences)
        timings["coarse"] = time.perf_counter() - t0
        rec.view_id = view.view_id
        rec.correspondence_count = coarse.inlier_count
        rec.inlier_ratio = coarse.inlier_ratio
        rec.inlier_rmse = coarse.inlier_rmse
        T = coarse.transform

        if mode == "Full":
            t0 = time.perf_counter()
            icp = PointToPlaneICP(cfg.icp_max_dist_m, cfg.icp_max_iterations, cfg.icp_rel_tol)
            fine = icp.fit(view.cloud, scene, init=T).result_
            timings["icp"] = time.perf_counter() - t0
            T = fine.transform
            rec.icp_fitness = fine.fitness
            rec.icp_rmse = fine.inlier_rmse

        rec.transform = T.to_dict()
        rec.est_box = bounding_box(apply_transform(view.cloud, T))
        rec.gt_box = project_gt_box(ann.bbox, depth, K)
        rec.iou = iou_3d(rec.gt_box, rec.est_box)
        rec.mir = mir(rec.gt_box, rec.est_box) if rec.est_box.volume > 0 else 0.0
        rec.is_true_positive = (rec.predicted_label == ann.label
                                and is_true_positive(rec.iou, rec.mir))
    except (PointPoseError, ValueError, np.linalg.LinAlgError) as exc:
        # a failed stage never stores its timing, so the record only
        # contributes to timing columns it actually completed
        rec.error = type(exc).__name__
    return rec


def run_frame(frame, db, model, cfg, K, mode_policy: Optional[Callable] = None):
    """Detection records for every annotation of one frame.

    Images and external embeddings are read before any stage timer
    starts. Load failures become error records for every annotation.
    """
    try:
        rgb = load_rgb(frame.rgb)
        depth = load_depth(frame.depth)
        embeddings = [None if a.embedding is None else load_external_embedding(a.embedding, model.dim)
                      for a in frame.annotations]
    except (OSError, PointPoseError) as exc:
        return [DetectionRecord(frame.frame_id, a.label, mode=cfg.execution_mode,
                                error=type(exc).__name__) for a in frame.annotations]
    mode = (mode_policy or _static_mode)(frame, depth, cfg)
    if mode not in MODES:
        raise InvalidParameter(f"mode policy returned {mode!r}")
    return [process_annotation(frame.frame_id, a, i, rgb, depth, K, db, model, cfg, mode, e)
            for i, (a, e) in enumerate(zip(frame.annotations, embeddings))]


def check_compatible(db, cfg):
    db.check_compatible(cfg.leaf_m, cfg.fpfh_radius_m, cfg.normal_radius_m)


def run(frames, db, model, cfg, K, mode_policy=None):
    """Records for all frames, in frame order, using ``cfg.n_workers`` threads."""
    check_compatible(db, cfg)
    if cfg.n_workers > 1:
        with ThreadPoolExecutor(cfg.n_workers) as pool:
            per_frame = list(pool.map(lambda f: run_frame(f, db, model, cfg, K, mode_policy), frames))
    else:
        per_frame = [run_frame(f, db, model, cfg, K, mode_policy) for f in frames]
    return [r for recs in per_frame for r in recs]


def ground_truth_count(frames):
    return {f.frame_id: len(f.annotations) for f in frames}


def records_document(records, cfg):
    return {"config": cfg.to_dict(), "records": [r.to_dict() for r in records]}


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_records(path):
    with open(path) as fh:
        data = json.load(fh)
    rows = data["records"] if isinstance(data, dict) else data
    return [DetectionRecord.from_dict(r) for r in rows]


def build_database(views_dir, cfg, out_dir, log=None):
    """Build and save a model database from ``views_dir/<instance>/<view>.ply``.

    Unreadable views are reported through ``log`` and skipped; an instance
    left without any view is a hard error.
    """
    log = log or (lambda msg: None)
    views = {}
    labels = sorted(d for d in os.listdir(views_dir) if os.path.isdir(os.path.join(views_dir, d)))
    if not labels:
        raise InvalidParameter(f"{views_dir} holds no instance directories")
    for label in labels:
        built = []
        for name in sorted(os.listdir(os.path.join(views_dir, label))):
            if not name.endswith(".ply"):
                continue
            path = os.path.join(views_dir, label, name)
            try:
                cloud = read_ply(path)
                built.append(build_view(label, name[:-4], cloud, cfg.leaf_m, cfg.normal_radius_m,
                                        cfg.fpfh_radius_m, cfg.view_viewpoint_value()))
            except (OSError, PointPoseError) as exc:
                log(f"skipping {path}: {type(exc).__name__}: {exc}")
        if not built:
            raise InvalidParameter(f"instance {label!r} has no usable views")
        views[label] = built
    db = ModelDatabase(views, cfg.leaf_m, cfg.fpfh_radius_m, cfg.normal_radius_m)
    db.save(out_dir)
    return db


def evaluate(records, frames):
    """Evaluation report for records against the annotations of ``frames``."""
    report = evaluation_report(records, ground_truth_count(frames))
    labelled = [r for r in records if r.predicted_label is not None]
    report["counts"]["classification_accuracy"] = (
        sum(r.predicted_label == r.instance_label for r in labelled) / len(labelled)
        if labelled else None)
    return report


def load_frames(manifest_paths):
    frames, K = [], None
    for path in manifest_paths:
        fs, k = load_manifest(path)
        if K is not None and k != K:
            raise InvalidParameter(f"{path}: intrinsics differ from earlier manifests")
        frames.extend(fs)
        K = k
    return frames, K
