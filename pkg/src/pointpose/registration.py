"""Feature-based coarse registration: matching, RANSAC and Fast Global Registration.

Both estimators align a *source* cloud (a model view) onto a *target*
cloud (the scene) and return the transform mapping source into target
coordinates.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .cloud import RigidTransform, SpatialIndex, apply_transform, brute_force_nearest, cloud_diameter, project_to_so3
from .exceptions import DegenerateConfiguration, EmptyFeatureSet, TooFewCorrespondences
from .validation import check_is_fitted, check_points, check_positive, check_positive_int


class Correspondence(NamedTuple):
    source_index: int
    target_index: int
    feature_distance: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Columnar list of correspondences; indices refer to FeatureSet rows."""

    source_index: np.ndarray
    target_index: np.ndarray
    feature_distance: np.ndarray

    def __post_init__(self):
        for name in ("source_index", "target_index"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "feature_distance",
                           np.asarray(self.feature_distance, dtype=np.float64).reshape(-1))

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.source_index)

    def __iter__(self) -> Iterator[Correspondence]:
        for s, t, d in zip(self.source_index, self.target_index, self.feature_distance):
            yield Correspondence(int(s), int(t), float(d))

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            return Correspondence(int(self.source_index[item]), int(self.target_index[item]),
                                  float(self.feature_distance[item]))
        return Correspondences(self.source_index[item], self.target_index[item], self.feature_distance[item])

    def to_list(self) -> List[Correspondence]:
        return list(self)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    inlier_ratio: float
    inlier_rmse: float
    correspondence_set: Correspondences
    candidate_count: int = 0
    iterations: int = 0
    validations: int = 0
    objective_history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "transform": self.transform.to_dict(),
            "inlier_count": self.inlier_count,
            "inlier_ratio": self.inlier_ratio,
            "inlier_rmse": self.inlier_rmse,
            "candidate_count": self.candidate_count,
            "iterations": self.iterations,
            "validations": self.validations,
        }


def match_features(source, target, mutual=False):
    """Nearest target descriptor (33-d Euclidean) for every source descriptor.

    With ``mutual`` only pairs that are each other's nearest neighbor survive.
    """
    if len(source) == 0 or len(target) == 0:
        raise EmptyFeatureSet("cannot match an empty feature set")
    src = source.descriptors.astype(np.float64)
    tgt = target.descriptors.astype(np.float64)
    s_idx = np.arange(len(src))
    if not mutual:
        t_idx, dist = brute_force_nearest(src, tgt)
    else:
        t_idx, dist, back = brute_force_nearest(src, tgt, mutual=True)
        keep = back[t_idx] == s_idx
        s_idx, t_idx, dist = s_idx[keep], t_idx[keep], dist[keep]
    return Correspondences(s_idx, t_idx, dist)


def _is_degenerate(points):
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[0] == 0 or sv[1] <= 1e-9 * sv[0]


def estimate_rigid(source_points, target_points):
    """Least-squares rigid transform with ``R @ s + t ~ q`` (Kabsch with reflection fix)."""
    S = check_points(source_points, "source_points")
    Q = check_points(target_points, "target_points")
    if len(S) != len(Q):
        raise DegenerateConfiguration(f"{len(S)} source vs {len(Q)} target points")
    if len(S) < 3:
        raise DegenerateConfiguration(f"need >= 3 pairs, got {len(S)}")
    if _is_degenerate(S) or _is_degenerate(Q):
        raise DegenerateConfiguration("correspondences are collinear or coincident")
    cs, cq = S.mean(axis=0), Q.mean(axis=0)
    H = (S - cs).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = project_to_so3(Vt.T @ D @ U.T)
    return RigidTransform(R, cq - R @ cs)


def _kabsch_batch(S, Q):
    """Rigid fits for a batch of 3-point samples, shapes (B, 3, 3)."""
    cs = S.mean(axis=1, keepdims=True)
    cq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", S - cs, Q - cq)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = cq[:, 0, :] - np.einsum("bij,bj->bi", R, cs[:, 0, :])
    return R, t


def _score(R, t, S, Q, threshold):
    """Inlier mask, count and RMSE of correspondences under one transform."""
    res = S @ R.T + t - Q
    d2 = np.einsum("ij,ij->i", res, res)
    inl = d2 < threshold * threshold
    count = int(inl.sum())
    rmse = float(np.sqrt(d2[inl].mean())) if count else 0.0
    return inl, count, rmse


def _corr_points(source, target, source_features, target_features, corr):
    S = source.points[source_features.keypoint_indices[corr.source_index]]
    Q = target.points[target_features.keypoint_indices[corr.target_index]]
    return S, Q


def _finish(T, S, Q, corr, threshold, target, **extra):
    inl, count, rmse = _score(T.rotation, T.translation, S, Q, threshold)
    ratio = min(1.0, count / len(target)) if len(target) else 0.0
    return RegistrationResult(T, count, ratio, rmse, corr[inl], candidate_count=len(corr), **extra)


class RANSACRegistration(BaseEstimator):
    """RANSAC over feature correspondences.

    Hypotheses come from 3 distinct correspondences, pruned by an
    edge-length similarity check, fitted in closed form and validated by
    counting correspondences closer than ``inlier_threshold`` after
    transformation. The best model is the one with most inliers, then
    lowest RMSE, then earliest. Search stops after ``max_iterations``
    samples or once ``validation_steps`` consecutive validations fail to
    improve the best model; the winner is refitted on its inliers.

    Hypotheses are generated in fixed-size chunks, each from its own
    ``(seed, chunk)``-derived stream, so results do not depend on
    ``n_jobs``.
    """

    chunk_size = 256

    def __init__(self, max_iterations=4_000_000, validation_steps=500, inlier_threshold=0.01,
                 mutual=False, edge_length_ratio=0.9, seed=0, n_jobs=1):
        self.max_iterations = max_iterations
        self.validation_steps = validation_steps
        self.inlier_threshold = inlier_threshold
        self.mutual = mutual
        self.edge_length_ratio = edge_length_ratio
        self.seed = seed
        self.n_jobs = n_jobs

    def _chunk(self, chunk_id, S, Q):
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), int(chunk_id)]))
        n, B = len(S), self.chunk_size
        i0 = rng.integers(n, size=B)
        i1 = rng.integers(n - 1, size=B)
        i1 += i1 >= i0
        lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
        i2 = rng.integers(n - 2, size=B) if n > 2 else np.zeros(B, dtype=np.int64)
        i2 += i2 >= lo
        i2 += i2 >= hi
        idx = np.stack([i0, i1, i2], axis=1)
        S3, Q3 = S[idx], Q[idx]

        ok = np.ones(B, dtype=bool)
        r = self.edge_length_ratio
        for a, b in ((0, 1), (0, 2), (1, 2)):
            ls = np.linalg.norm(S3[:, a] - S3[:, b], axis=1)
            lq = np.linalg.norm(Q3[:, a] - Q3[:, b], axis=1)
            ok &= (ls >= r * lq) & (lq >= r * ls) & (ls > 0)
        area_s = np.linalg.norm(np.cross(S3[:, 1] - S3[:, 0], S3[:, 2] - S3[:, 0]), axis=1)
        area_q = np.linalg.norm(np.cross(Q3[:, 1] - Q3[:, 0], Q3[:, 2] - Q3[:, 0]), axis=1)
        scale = np.maximum(np.linalg.norm(S3[:, 1] - S3[:, 0], axis=1), 1e-300) ** 2
        ok &= (area_s > 1e-9 * scale) & (area_q > 1e-9 * scale)

        counts = np.zeros(B, dtype=np.int64)
        rmses = np.zeros(B)
        R = np.zeros((B, 3, 3))
        t = np.zeros((B, 3))
        sel = np.flatnonzero(ok)
        if len(sel):
            R[sel], t[sel] = _kabsch_batch(S3[sel], Q3[sel])
            res = np.einsum("bij,nj->bni", R[sel], S) + t[sel][:, None, :] - Q[None]
            d2 = np.einsum("bni,bni->bn", res, res)
            inl = d2 < self.inlier_threshold ** 2
            counts[sel] = inl.sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                ms = np.where(inl, d2, 0.0).sum(axis=1) / counts[sel]
            rmses[sel] = np.sqrt(np.where(counts[sel] > 0, ms, 0.0))
        return ok, counts, rmses, R, t

    def fit(self, source, target, source_features, target_features):
        max_it = check_positive_int(self.max_iterations, "max_iterations")
        patience = check_positive_int(self.validation_steps, "validation_steps")
        thr = check_positive(self.inlier_threshold, "inlier_threshold")
        n_jobs = check_positive_int(self.n_jobs, "n_jobs")

        corr = match_features(source_features, target_features, mutual=self.mutual)
        if len(corr) < 3:
            raise TooFewCorrespondences(f"{len(corr)} correspondences, need at least 3")
        S, Q = _corr_points(source, target, source_features, target_features, corr)

        best = (-1, np.inf)
        best_T = None
        iterations = validations = since = 0
        chunk_id = 0
        done = False
        pool = ThreadPoolExecutor(n_jobs) if n_jobs > 1 else None
        try:
            while not done:
                ids = range(chunk_id, chunk_id + n_jobs)
                chunk_id += n_jobs
                if pool is None:
                    batches = [self._chunk(c, S, Q) for c in ids]
                else:
                    batches = list(pool.map(lambda c: self._chunk(c, S, Q), ids))
                for ok, counts, rmses, R, t in batches:
                    for h in range(len(ok)):
                        if iterations >= max_it:
                            done = True
                            break
                        iterations += 1
                        if not ok[h]:
                            continue
                        validations += 1
                        c, e = int(counts[h]), float(rmses[h])
                        if c > best[0] or (c == best[0] and e < best[1]):
                            best, best_T, since = (c, e), (R[h], t[h]), 0
                        else:
                            since += 1
                            if since >= patience:
                                done = True
                                break
                    if done:
                        break
        finally:
            if pool is not None:
                pool.shutdown()

        if best_T is None:
            T = RigidTransform.identity()
        else:
            T = RigidTransform(project_to_so3(best_T[0]), best_T[1])
            inl, count, _ = _score(T.rotation, T.translation, S, Q, thr)
            if count >= 3:
                try:
                    refined = estimate_rigid(S[inl], Q[inl])
                    if _score(refined.rotation, refined.translation, S, Q, thr)[1] >= count:
                        T = refined
                except DegenerateConfiguration:
                    pass
        self.result_ = _finish(T, S, Q, corr, thr, target,
                               iterations=iterations, validations=validations)
        self.transformation_ = self.result_.transform
        return self

    def transform(self, cloud):
        check_is_fitted(self, "transformation_")
        return apply_transform(cloud, self.transformation_)


def tuple_filter(source_points, target_points, corr, ratio=0.9, max_tuples=1000, seed=0):
    """Keep correspondences that take part in a length-consistent random triple.

    Up to ``100 * len(corr)`` triples are drawn; a triple passes when every
    edge length ratio between the two sides lies in ``[ratio, 1/ratio]``.
    Drawing stops after ``max_tuples`` accepted triples. Surviving
    correspondences are returned once each, in their original order.
    """
    n = len(corr)
    if n < 3:
        return corr
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7475706C]))
    S = source_points
    Q = target_points
    keep = np.zeros(n, dtype=bool)
    accepted = 0
    trials = 100 * n
    batch = 4096
    drawn = 0
    while drawn < trials and accepted < max_tuples:
        m = min(batch, trials - drawn)
        drawn += m
        idx = rng.integers(n, size=(m, 3))
        ok = np.ones(m, dtype=bool)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ls = np.linalg.norm(S[idx[:, a]] - S[idx[:, b]], axis=1)
            lq = np.linalg.norm(Q[idx[:, a]] - Q[idx[:, b]], axis=1)
            ok &= (ls * ratio < lq) & (lq < ls / ratio)
        hits = np.flatnonzero(ok)[: max_tuples - accepted]
        accepted += len(hits)
        keep[idx[hits].reshape(-1)] = True
    return corr[keep]


def _gm_objective(r2, mu):
    return float(np.sum(mu * r2 / (mu + r2)))


def _rodrigues(omega):
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        K = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
        return np.eye(3) + K
    k = omega / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


class FastGlobalRegistration(BaseEstimator):
    """Robust alignment of feature correspondences with a scaled Geman-McClure
    loss, optimized by alternating line-process weights and Gauss-Newton.

    Correspondences are mutual nearest neighbors passed through a tuple
    test. The scale ``mu`` starts at the squared cloud diameter and is
    divided by ``annealing_factor`` every 4 iterations, never dropping
    below ``inlier_threshold ** 2``. Each Gauss-Newton step is halved until
    the objective at the current ``mu`` does not increase. The final
    inlier statistics cover all matched pairs, not just the tuple survivors.
    """

    def __init__(self, iterations=100, inlier_threshold=0.01, mutual=True, tuple_test=True,
                 tuple_ratio=0.9, max_tuples=1000, annealing_factor=1.4, seed=0):
        self.iterations = iterations
        self.inlier_threshold = inlier_threshold
        self.mutual = mutual
        self.tuple_test = tuple_test
        self.tuple_ratio = tuple_ratio
        self.max_tuples = max_tuples
        self.annealing_factor = annealing_factor
        self.seed = seed

    def fit(self, source, target, source_features, target_features):
        iterations = check_positive_int(self.iterations, "iterations")
        thr = check_positive(self.inlier_threshold, "inlier_threshold")

        corr = match_features(source_features, target_features, mutual=self.mutual)
        matched = corr
        S_all, Q_all = S, Q = _corr_points(source, target, source_features, target_features, corr)
        if self.tuple_test:
            corr = tuple_filter(S, Q, corr, self.tuple_ratio, self.max_tuples, self.seed)
            S, Q = _corr_points(source, target, source_features, target_features, corr)
        if len(corr) < 3:
            raise TooFewCorrespondences(f"{len(corr)} correspondences after filtering, need at least 3")

        diameter = max(cloud_diameter(source.points), cloud_diameter(target.points))
        mu = max(diameter ** 2, thr ** 2)
        R, t = np.eye(3), np.zeros(3)
        n = len(S)
        J = np.zeros((n, 3, 6))
        J[:, 0, 3] = J[:, 1, 4] = J[:, 2, 5] = 1.0
        history = []
        r = S - Q
        r2 = np.einsum("ij,ij->i", r, r)
        for it in range(iterations):
            if it > 0 and it % 4 == 0:
                mu = max(mu / self.annealing_factor, thr ** 2)
            X = r + Q
            w = (mu / (mu + r2)) ** 2
            # d(residual)/d(omega) = -[X]_x for a left-multiplied rotation
            J[:, 0, 1], J[:, 0, 2] = X[:, 2], -X[:, 1]
            J[:, 1, 0], J[:, 1, 2] = -X[:, 2], X[:, 0]
            J[:, 2, 0], J[:, 2, 1] = X[:, 1], -X[:, 0]
            Jf = J.reshape(3 * n, 6)
            Jw = Jf * np.repeat(w, 3)[:, None]
            A = Jw.T @ Jf
            b = Jw.T @ r.reshape(-1)
            before = _gm_objective(r2, mu)
            try:
                xi = -np.linalg.solve(A, b)
            except np.linalg.LinAlgError:
                xi = -np.linalg.lstsq(A, b, rcond=None)[0]
            after = before
            for _ in range(30):
                Rd = _rodrigues(xi[:3])
                Rc, tc = Rd @ R, Rd @ t + xi[3:]
                rc = S @ Rc.T + tc - Q
                rc2 = np.einsum("ij,ij->i", rc, rc)
                value = _gm_objective(rc2, mu)
                if value <= before:
                    R, t, r, r2, after = Rc, tc, rc, rc2, value
                    break
                xi = xi * 0.5
            history.append((mu, before, after))
        T = RigidTransform(project_to_so3(R), t)

        # scored against every matched pair, like RANSAC; the tuple test
        # only prunes what the optimizer sees
        self.result_ = _finish(T, S_all, Q_all, matched, thr, target, iterations=iterations,
                               objective_history=history)
        self.transformation_ = self.result_.transform
        return self

    def transform(self, cloud):
        check_is_fitted(self, "transformation_")
        return apply_transform(cloud, self.transformation_)


def ransac_registration(source, target, source_features, target_features, params=None, **kwargs):
    """Functional form of :class:`RANSACRegistration`; returns its result."""
    params = dict(params or {}, **kwargs)
    return RANSACRegistration(**params).fit(source, target, source_features, target_features).result_


def fgr_registration(source, target, source_features, target_features, params=None, **kwargs):
    """Functional form of :class:`FastGlobalRegistration`; returns its result."""
    params = dict(params or {}, **kwargs)
    return FastGlobalRegistration(**params).fit(source, target, source_features, target_features).result_
