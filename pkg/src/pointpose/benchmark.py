"""Synthetic benchmarks: pose recovery and RANSAC-vs-FGR coarse registration."""
import time
from dataclasses import dataclass

import numpy as np

from .cloud import apply_transform, rotation_error
from .fpfh import describe
from .icp import PointToPlaneICP
from .recognition import make_coarse_registration
from .synthetic import add_noise, make_object_cloud, random_rigid_transform


@dataclass
class PosePair:
    source: object
    target: object
    truth: object


def make_pose_pair(seed, n_points=2000, max_angle_deg=30.0, max_translation=0.3, noise=0.005):
    """A random object and a rigidly moved copy with Gaussian noise on the copy."""
    rng = np.random.default_rng(seed)
    source = make_object_cloud(n_points, seed=int(rng.integers(1 << 31)))
    truth = random_rigid_transform(rng, np.deg2rad(max_angle_deg), max_translation)
    target = add_noise(apply_transform(source, truth), noise, rng)
    return PosePair(source, target, truth)


def _prepare(cloud, cfg):
    return describe(cloud, cfg.leaf_m, cfg.normal_radius_m, cfg.fpfh_radius_m, "centroid")


def recover_pose(source, target, cfg):
    """Coarse registration then point-to-plane ICP between two complete clouds.

    Returns ``(coarse result, icp result)``.
    """
    src, fs = _prepare(source, cfg)
    tgt, ft = _prepare(target, cfg)
    coarse = make_coarse_registration(cfg.coarse_method, cfg.coarse_params())
    coarse = coarse.fit(src, tgt, fs, ft).result_
    icp = PointToPlaneICP(cfg.icp_max_dist_m, cfg.icp_max_iterations, cfg.icp_rel_tol)
    return coarse, icp.fit(src, tgt, init=coarse.transform).result_


def pose_errors(estimate, truth):
    """Rotation error in degrees and translation error in meters."""
    rot = np.rad2deg(rotation_error(estimate, truth))
    return float(rot), float(np.linalg.norm(estimate.translation - truth.translation))


def coarse_comparison(cfg, seed=0, n_views=10, n_points=2000, max_angle_deg=30.0,
                      max_translation=0.3, noise=0.005):
    """Register one object against ``n_views`` noisy posed copies with RANSAC and FGR.

    Feature extraction is shared; only the coarse registration calls are
    timed. Returns per-method total seconds, mean inlier ratio and mean
    rotation error in degrees.
    """
    rng = np.random.default_rng(seed)
    source = make_object_cloud(n_points, seed=int(rng.integers(1 << 31)))
    src, fs = _prepare(source, cfg)
    views = []
    for _ in range(n_views):
        truth = random_rigid_transform(rng, np.deg2rad(max_angle_deg), max_translation)
        target = add_noise(apply_transform(source, truth), noise, rng)
        views.append((_prepare(target, cfg), truth))
    out = {}
    for method in ("RANSAC", "FGR"):
        mcfg = cfg.replace(coarse_method=method)
        seconds, ratios, errors = 0.0, [], []
        for (tgt, ft), truth in views:
            est = make_coarse_registration(method, mcfg.coarse_params())
            t0 = time.perf_counter()
            result = est.fit(src, tgt, fs, ft).result_
            seconds += time.perf_counter() - t0
            ratios.append(result.inlier_ratio)
            errors.append(pose_errors(result.transform, truth)[0])
        out[method] = {"total_seconds": seconds, "mean_inlier_ratio": float(np.mean(ratios)),
                       "mean_rotation_error_deg": float(np.mean(errors))}
    return out


def run_benchmark(cfg, seeds=range(5), n_views=10):
    """Coarse comparison over several seeds plus summary ratios."""
    runs = [coarse_comparison(cfg, s, n_views) for s in seeds]
    summary = {}
    for method in ("RANSAC", "FGR"):
        summary[method] = {
            "total_seconds": float(sum(r[method]["total_seconds"] for r in runs)),
            "median_inlier_ratio": float(np.median([r[method]["mean_inlier_ratio"] for r in runs])),
            "median_rotation_error_deg": float(np.median([r[method]["mean_rotation_error_deg"] for r in runs])),
        }
    summary["speed_ratio_ransac_over_fgr"] = (summary["RANSAC"]["total_seconds"]
                                              / max(summary["FGR"]["total_seconds"], 1e-12))
    return {"seeds": list(seeds), "n_views": n_views, "runs": runs, "summary": summary}
