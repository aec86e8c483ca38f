"""Point clouds, rigid transforms, bounding boxes and exact spatial search.

Everything here is immutable after construction: arrays held by
:class:`PointCloud`, :class:`RigidTransform` and :class:`Aabb` are marked
read-only, so instances can be shared across threads freely.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import (
    DimensionMismatch,
    EmptyCloud,
    EmptyIndex,
    InvalidParameter,
    TooFewPoints,
)
from .validation import check_points, check_positive, check_vector

_UNIT_TOL = 1e-6
_RIGID_TOL = 1e-9


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions in meters, with optional unit normals and RGB colors in [0, 1].

    ``normal_valid`` marks which normals came from a well-conditioned
    neighborhood; it is ``None`` when every normal is trusted.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None

    def __post_init__(self):
        points = check_points(self.points, "points")
        n = len(points)
        object.__setattr__(self, "points", _frozen(points))
        if self.normals is not None:
            normals = check_points(self.normals, "normals")
            if len(normals) != n:
                raise DimensionMismatch(f"{len(normals)} normals for {n} points")
            if n and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > _UNIT_TOL:
                raise InvalidParameter("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(normals))
        if self.colors is not None:
            colors = check_points(self.colors, "colors")
            if len(colors) != n:
                raise DimensionMismatch(f"{len(colors)} colors for {n} points")
            if n and (colors.min() < 0.0 or colors.max() > 1.0):
                raise InvalidParameter("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(colors))
        if self.normal_valid is not None:
            if self.normals is None:
                raise InvalidParameter("normal_valid given without normals")
            mask = np.asarray(self.normal_valid, dtype=bool).reshape(-1)
            if len(mask) != n:
                raise DimensionMismatch(f"{len(mask)} normal flags for {n} points")
            object.__setattr__(self, "normal_valid", _frozen(mask))

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    @property
    def has_colors(self):
        return self.colors is not None

    def valid_normal_mask(self):
        """Boolean mask of points whose normal may be used downstream."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        if self.normal_valid is None:
            return np.ones(len(self), dtype=bool)
        return np.array(self.normal_valid)

    def select(self, indices):
        """Sub-cloud with the given point indices (or boolean mask)."""
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normal_valid is None else self.normal_valid[idx],
        )

    def with_valid_normals_only(self):
        """Drop points flagged with an invalid normal; the result has no flags."""
        cloud = self.select(self.valid_normal_mask())
        return PointCloud(cloud.points, cloud.normals, cloud.colors)

    def equals(self, other):
        """Bitwise comparison of every stored array."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.points, other.points)
            and same(self.normals, other.normals)
            and same(self.colors, other.colors)
            and same(self.normal_valid, other.normal_valid)
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rigid motion ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise DimensionMismatch(f"rotation must be 3x3, got {R.shape}")
        t = check_vector(self.translation, "translation")
        if not np.all(np.isfinite(R)):
            raise InvalidParameter("rotation contains NaN or Inf")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _RIGID_TOL or abs(np.linalg.det(R) - 1.0) > _RIGID_TOL:
            raise InvalidParameter("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, orthonormalize=False):
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape != (4, 4):
            raise DimensionMismatch(f"expected a 4x4 matrix, got {M.shape}")
        R = project_to_so3(M[:3, :3]) if orthonormalize else M[:3, :3]
        return cls(R, M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        """Axis-angle rotation (radians) plus translation."""
        R = Rotation.from_rotvec(check_vector(rotvec, "rotvec")).as_matrix()
        return cls(project_to_so3(R), translation)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        """``(a @ b)`` applies ``b`` first, then ``a``."""
        if not isinstance(other, RigidTransform):
            return NotImplemented
        R = project_to_so3(self.rotation @ other.rotation)
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def apply(self, points):
        pts = check_points(points)
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self):
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["rotation"]), np.asarray(data["translation"]))


def project_to_so3(matrix):
    """Closest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def rotation_error(a, b):
    """Angle in radians of the relative rotation between two transforms."""
    c = (np.trace(a.rotation.T @ b.rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box; ``min <= max`` componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = check_vector(self.min, "min")
        hi = check_vector(self.max, "max")
        if np.any(lo > hi):
            raise InvalidParameter(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", _frozen(lo))
        object.__setattr__(self, "max", _frozen(hi))

    @property
    def extent(self):
        return self.max - self.min

    @property
    def volume(self):
        return float(np.prod(self.max - self.min))

    def contains(self, points, tol=0.0):
        pts = check_points(points)
        return np.all((pts >= self.min - tol) & (pts <= self.max + tol), axis=1)

    def to_dict(self):
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["min"]), np.asarray(data["max"]))


class SpatialIndex:
    """Exact kd-tree over ``k``-dimensional points.

    Distances are always recomputed here as ``sqrt(sum((p - q) ** 2))`` so
    that membership and ordering are defined by one formula regardless of
    the tree's internal arithmetic. Ties break toward the lower index.
    """

    # slack when asking the tree for candidates; exact filtering follows
    _SLACK = 1e-9

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if pts.size else pts.reshape(0, 3)
        if pts.ndim != 2:
            raise DimensionMismatch(f"points must be 2-D, got shape {pts.shape}")
        if pts.size and not np.all(np.isfinite(pts)):
            raise InvalidParameter("points contain NaN or Inf")
        self._points = _frozen(np.ascontiguousarray(pts))
        self.dim = pts.shape[1]
        # widest-spread axis, median split
        self._tree = cKDTree(self._points, balanced_tree=True) if len(pts) else None

    def __len__(self):
        return len(self._points)

    @property
    def points(self):
        return self._points

    def _query_vec(self, query):
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query has dimension {q.shape[0]}, index has {self.dim}")
        return q

    def _exact_dist(self, idx, q):
        diff = self._points[idx] - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def radius_search(self, query, radius) -> List[Tuple[int, float]]:
        """All ``(index, distance)`` with distance <= radius, nearest first."""
        idx, dist = self.radius_search_arrays(query, radius)
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def radius_search_arrays(self, query, radius):
        radius = check_positive(radius, "radius")
        q = self._query_vec(query)
        if self._tree is None:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + self._SLACK) + 1e-300), dtype=np.intp)
        dist = self._exact_dist(cand, q)
        keep = dist <= radius
        cand, dist = cand[keep], dist[keep]
        order = np.lexsort((cand, dist))
        return cand[order], dist[order]

    def radius_search_many(self, queries, radius):
        """Neighbor lists for many queries as CSR-style ``(offsets, indices, distances)``.

        Neighbors of query ``i`` are ``indices[offsets[i]:offsets[i + 1]]``,
        sorted by distance then index.
        """
        radius = check_positive(radius, "radius")
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, self.dim)
        m = len(Q)
        if self._tree is None or m == 0:
            return np.zeros(m + 1, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0)
        lists = self._tree.query_ball_point(Q, radius * (1 + self._SLACK) + 1e-300)
        counts = np.fromiter((len(l) for l in lists), dtype=np.intp, count=m)
        owner = np.repeat(np.arange(m), counts)
        cand = np.fromiter((j for l in lists for j in l), dtype=np.intp, count=int(counts.sum()))
        diff = self._points[cand] - Q[owner]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        keep = dist <= radius
        owner, cand, dist = owner[keep], cand[keep], dist[keep]
        order = np.lexsort((cand, dist, owner))
        owner, cand, dist = owner[order], cand[order], dist[order]
        offsets = np.zeros(m + 1, dtype=np.intp)
        np.cumsum(np.bincount(owner, minlength=m), out=offsets[1:])
        return offsets, cand, dist

    def nearest_neighbor(self, query) -> Tuple[int, float]:
        q = self._query_vec(query)
        idx, dist = self.nearest_many(q[None, :])
        return int(idx[0]), float(dist[0])

    def nearest_many(self, queries):
        """Nearest stored point for every query row: ``(indices, distances)``."""
        if self._tree is None:
            raise EmptyIndex("nearest-neighbor query on an empty index")
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, self.dim)
        if len(Q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        k = min(2, len(self))
        _, cand = self._tree.query(Q, k=k)
        cand = np.asarray(cand).reshape(len(Q), k)
        d = np.sqrt(np.einsum("ijk,ijk->ij", self._points[cand] - Q[:, None, :],
                              self._points[cand] - Q[:, None, :]))
        best = cand[:, 0].copy()
        best_d = d[:, 0].copy()
        if k == 2:
            # possible tie or tree/exact disagreement: resolve by exact scan of the ball
            unsure = d[:, 1] <= d[:, 0] * (1 + 1e-7) + 1e-300
            for i in np.flatnonzero(unsure):
                r = min(d[i, 0], d[i, 1]) * (1 + 1e-7) + 1e-300
                ball = np.asarray(self._tree.query_ball_point(Q[i], r), dtype=np.intp)
                bd = self._exact_dist(ball, Q[i])
                j = np.lexsort((ball, bd))[0]
                best[i], best_d[i] = ball[j], bd[j]
        return best, best_d


def _nearest_rows(Q, P, q2, p2, Q32, P32):
    d2 = Q32 @ P32.T
    d2 *= -2.0
    d2 += p2.astype(np.float32)
    d2 += q2.astype(np.float32)[:, None]
    rows = np.arange(len(Q))
    idx = np.argmin(d2, axis=1)
    lo = d2[rows, idx].astype(np.float64)
    if len(P) > 1:
        # single precision leaves ~1e-7 relative error; anything within a wide
        # margin of the best is re-ranked with exact double differences
        d2[rows, idx] = np.inf
        slack = 1e-5 * (q2 + p2[idx]) + 1e-30
        for i in np.flatnonzero(d2.min(axis=1) <= lo + slack):
            d2[i, idx[i]] = lo[i]
            cand = np.flatnonzero(d2[i] <= lo[i] + slack[i])
            exact = np.sqrt(((P[cand] - Q[i]) ** 2).sum(axis=1))
            idx[i] = cand[np.lexsort((cand, exact))[0]]
    return idx


def brute_force_nearest(queries, points, mutual=False):
    """Exact nearest row of ``points`` for every row of ``queries``.

    Candidates come from a single-precision BLAS distance matrix; rows
    whose runner-up is within rounding of the best are re-ranked with
    exact double-precision differences, ties going to the lowest index.
    With ``mutual`` the reverse assignment (nearest query for every
    point) is returned too. Faster than a tree for a few thousand
    high-dimensional rows.
    """
    Q = np.asarray(queries, dtype=np.float64)
    P = np.asarray(points, dtype=np.float64)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyIndex("nearest-neighbor query on an empty point set")
    q2 = np.einsum("ij,ij->i", Q, Q)
    p2 = np.einsum("ij,ij->i", P, P)
    Q32, P32 = Q.astype(np.float32), P.astype(np.float32)
    idx = _nearest_rows(Q, P, q2, p2, Q32, P32)
    diff = P[idx] - Q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if not mutual:
        return idx, dist
    return idx, dist, _nearest_rows(P, Q, p2, q2, P32, Q32)


def radius_search(index, query, radius):
    """Module-level alias of :meth:`SpatialIndex.radius_search`."""
    return index.radius_search(query, radius)


def nearest_neighbor(index, query):
    """Module-level alias of :meth:`SpatialIndex.nearest_neighbor`."""
    return index.nearest_neighbor(query)


def voxel_keys(points, leaf):
    """Integer voxel coordinates on a grid of side ``leaf`` whose cells are
    centered on integer multiples of ``leaf``; boundary points go up."""
    return np.floor(points / leaf + 0.5).astype(np.int64)


def voxel_downsample(cloud, leaf):
    """Replace every occupied voxel by the centroid of its points.

    Normals are averaged and renormalized, colors averaged and clamped.
    Output is ordered by voxel key.
    """
    leaf = check_positive(leaf, "leaf")
    n = len(cloud)
    if n == 0:
        return PointCloud(np.zeros((0, 3)),
                          None if cloud.normals is None else np.zeros((0, 3)),
                          None if cloud.colors is None else np.zeros((0, 3)))
    keys = voxel_keys(cloud.points, leaf)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def mean_of(values):
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    points = mean_of(cloud.points)
    normals = None
    valid = None
    if cloud.normals is not None:
        ok = cloud.valid_normal_mask()
        summed = np.zeros((m, 3))
        np.add.at(summed, inverse[ok], cloud.normals[ok])
        norm = np.linalg.norm(summed, axis=1)
        good = norm > 1e-12
        normals = np.tile([0.0, 0.0, 1.0], (m, 1))
        normals[good] = summed[good] / norm[good, None]
        valid = good if not good.all() else None
    colors = None
    if cloud.colors is not None:
        colors = np.clip(mean_of(cloud.colors), 0.0, 1.0)
    return PointCloud(points, normals, colors, valid)


def estimate_normals(cloud, radius, viewpoint=(0.0, 0.0, 0.0), index=None):
    """PCA normals over radius neighborhoods, oriented toward ``viewpoint``.

    A point gets an invalid flag when fewer than 3 points (itself included)
    fall inside the radius, or when its neighborhood is rank-deficient
    (collinear/coincident). Flagged points carry a placeholder unit normal
    pointing at the viewpoint.

    ``viewpoint="centroid"`` orients toward the cloud's own centroid, which
    suits complete object models where no camera position exists; the
    result then moves rigidly with the cloud.
    """
    radius = check_positive(radius, "radius")
    n = len(cloud)
    if n < 3:
        raise TooFewPoints(f"normal estimation needs >= 3 points, got {n}")
    P = cloud.points
    if isinstance(viewpoint, str):
        if viewpoint != "centroid":
            raise InvalidParameter(f"unknown viewpoint {viewpoint!r}")
        vp = P.mean(axis=0)
    else:
        vp = check_vector(viewpoint, "viewpoint")
    index = index or SpatialIndex(P)
    offsets, nbr, _ = index.radius_search_many(P, radius)
    counts = np.diff(offsets)
    owner = np.repeat(np.arange(n), counts)

    sums = np.zeros((n, 3))
    np.add.at(sums, owner, P[nbr])
    means = sums / np.maximum(counts, 1)[:, None]
    diff = P[nbr] - means[owner]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, owner, diff[:, :, None] * diff[:, None, :])
    cov /= np.maximum(counts, 1)[:, None, None]

    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = (counts >= 3) & (evals[:, 1] > 1e-12 * scale) & (evals[:, 2] > 0)

    to_view = vp - P
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if not valid.all():
        placeholder = to_view[~valid]
        pn = np.linalg.norm(placeholder, axis=1, keepdims=True)
        placeholder = np.where(pn > 0, placeholder / np.where(pn > 0, pn, 1.0), [0.0, 0.0, 1.0])
        normals[~valid] = placeholder
    return PointCloud(P, normals, cloud.colors, None if valid.all() else valid)


def apply_transform(cloud, T):
    """Map points by ``R p + t`` and normals by ``R n``; colors are untouched."""
    if len(cloud) == 0:
        return cloud
    points = cloud.points @ T.rotation.T + T.translation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ T.rotation.T
    return PointCloud(points, normals, cloud.colors, cloud.normal_valid)


def bounding_box(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    if len(pts) == 0:
        raise EmptyCloud("bounding box of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def cloud_diameter(points):
    """Length of the bounding-box diagonal."""
    pts = np.asarray(points)
    if len(pts) == 0:
        return 0.0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`voxel_downsample`."""

    def __init__(self, leaf=0.01):
        self.leaf = leaf

    def fit(self, X=None, y=None):
        check_positive(self.leaf, "leaf")
        return self

    def transform(self, X):
        return voxel_downsample(X, self.leaf)


class NormalEstimator(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`estimate_normals`.

    ``radius=None`` means three times ``leaf``.
    """

    def __init__(self, radius=None, leaf=0.01, viewpoint=(0.0, 0.0, 0.0)):
        self.radius = radius
        self.leaf = leaf
        self.viewpoint = viewpoint

    def fit(self, X=None, y=None):
        self.radius_ = check_positive(self.radius if self.radius is not None else 3 * self.leaf, "radius")
        return self

    def transform(self, X):
        radius = self.radius_ if hasattr(self, "radius_") else self.fit().radius_
        return estimate_normals(X, radius, self.viewpoint)
