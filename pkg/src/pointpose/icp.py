"""Point-to-plane ICP refinement and dense registration scoring."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator

from .cloud import RigidTransform, SpatialIndex, apply_transform, project_to_so3
from .exceptions import InvalidParameter
from .validation import check_is_fitted, check_positive, check_positive_int


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_run: int
    converged: bool
    no_overlap: bool = False
    objective_history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "transform": self.transform.to_dict(),
            "fitness": self.fitness,
            "inlier_rmse": self.inlier_rmse,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "no_overlap": self.no_overlap,
        }


def point_to_plane_system(source_points, target_points, target_normals):
    """Normal equations ``(A, b)`` of the linearized point-to-plane objective.

    With residuals ``r_i = n_i . (p_i - q_i)`` and Jacobian rows
    ``J_i = [p_i x n_i, n_i]`` for the twist ``(omega, tau)``,
    ``A = sum J_i J_i^T`` and ``b = sum J_i r_i``; the objective's gradient
    at the current pose is ``2 b``.
    """
    r = np.einsum("ij,ij->i", target_normals, source_points - target_points)
    J = np.hstack([np.cross(source_points, target_normals), target_normals])
    return J.T @ J, J.T @ r


def twist_to_transform(xi):
    """Left-multiplied increment for the twist ``xi = (omega, tau)``."""
    Rd = Rotation.from_rotvec(np.asarray(xi[:3], dtype=np.float64)).as_matrix()
    return RigidTransform(project_to_so3(Rd), np.asarray(xi[3:], dtype=np.float64))


def _plane_error(P, Qp, Nq):
    r = np.einsum("ij,ij->i", Nq, P - Qp)
    return float(r @ r)


def _rel_change(prev, cur):
    return abs(cur - prev) / max(abs(prev), abs(cur), 1e-12)


def _correspondences(index, X, max_dist):
    idx, dist = index.nearest_many(X)
    ok = dist <= max_dist
    return ok, idx, dist


class PointToPlaneICP(BaseEstimator):
    """ICP minimizing squared distances along target normals.

    Every iteration pairs each transformed source point with its nearest
    target point within ``max_dist``, solves the 6x6 linearized system and
    applies the increment (halved while the point-to-plane error over the
    current pairs would increase). Stops when the relative change of both
    fitness and RMSE drops below ``rel_tol`` or after ``max_iterations``.
    """

    def __init__(self, max_dist=0.01, max_iterations=30, rel_tol=1e-6):
        self.max_dist = max_dist
        self.max_iterations = max_iterations
        self.rel_tol = rel_tol

    def fit(self, source, target, init=None):
        max_dist = check_positive(self.max_dist, "max_dist")
        max_it = check_positive_int(self.max_iterations, "max_iterations", minimum=0)
        rel_tol = float(self.rel_tol)
        if target.normals is None:
            raise InvalidParameter("point-to-plane ICP needs target normals")
        T = init if init is not None else RigidTransform.identity()

        valid = target.valid_normal_mask()
        tgt_pts = target.points[valid]
        tgt_nrm = target.normals[valid]
        P = source.points
        if len(P) == 0 or len(tgt_pts) == 0:
            self.result_ = IcpResult(T, 0.0, 0.0, 0, False, True)
            self.transformation_ = T
            return self
        index = SpatialIndex(tgt_pts)

        history = []
        prev = None
        iterations = 0
        converged = False
        while True:
            X = P @ T.rotation.T + T.translation
            ok, idx, dist = _correspondences(index, X, max_dist)
            count = int(ok.sum())
            fitness = count / len(P)
            rmse = float(np.sqrt(np.mean(dist[ok] ** 2))) if count else 0.0
            if count == 0:
                break
            if prev is not None and _rel_change(prev[0], fitness) < rel_tol and _rel_change(prev[1], rmse) < rel_tol:
                converged = True
                break
            if iterations >= max_it:
                break
            prev = (fitness, rmse)

            Xs, Qs, Ns = X[ok], tgt_pts[idx[ok]], tgt_nrm[idx[ok]]
            A, b = point_to_plane_system(Xs, Qs, Ns)
            before = _plane_error(Xs, Qs, Ns)
            xi = -np.linalg.lstsq(A, b, rcond=None)[0]
            after = before
            for _ in range(30):
                step = twist_to_transform(xi)
                moved = Xs @ step.rotation.T + step.translation
                value = _plane_error(moved, Qs, Ns)
                if value <= before:
                    T, after = step @ T, value
                    break
                xi = xi * 0.5
            history.append((before, after))
            iterations += 1

        no_overlap = iterations == 0 and count == 0
        if no_overlap:
            fitness, rmse, T = 0.0, 0.0, init if init is not None else RigidTransform.identity()
        self.result_ = IcpResult(T, fitness, rmse, iterations, converged, no_overlap, history)
        self.transformation_ = T
        return self

    def transform(self, cloud):
        check_is_fitted(self, "transformation_")
        return apply_transform(cloud, self.transformation_)


def icp_point_to_plane(source, target, init=None, max_dist=0.01, max_iterations=30, rel_tol=1e-6):
    """Functional form of :class:`PointToPlaneICP`."""
    return PointToPlaneICP(max_dist, max_iterations, rel_tol).fit(source, target, init).result_


def compute_registration_rmse(source, target, T, max_dist):
    """RMSE of nearest-neighbor pairs within ``max_dist`` after mapping the
    source by ``T``, and the inlier count over the target's point count.

    Returns ``(rmse, inlier_ratio, flagged)``; ``flagged`` is True when no
    pair was found, in which case both values are 0.
    """
    max_dist = check_positive(max_dist, "max_dist")
    if len(source) == 0 or len(target) == 0:
        return 0.0, 0.0, True
    X = T.apply(source.points)
    ok, _, dist = _correspondences(SpatialIndex(target.points), X, max_dist)
    count = int(ok.sum())
    if count == 0:
        return 0.0, 0.0, True
    return float(np.sqrt(np.mean(dist[ok] ** 2))), min(1.0, count / len(target)), False
