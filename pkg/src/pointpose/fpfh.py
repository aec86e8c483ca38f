"""Fast Point Feature Histograms (33 bins: 11 each for alpha, phi, theta)."""
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, TransformerMixin

from .cloud import SpatialIndex, estimate_normals, voxel_downsample
from .exceptions import DimensionMismatch, InvalidParameter, ParseError
from .validation import check_positive

N_BINS = 11
DIM = 3 * N_BINS
_MAGIC = b"FPFH"
_VERSION = 1
# |cos| differences below this count as a tie and keep the given order;
# without it near-equal normals swap on rounding noise and flip phi's sign
_SWAP_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Descriptors aligned with the cloud indices they describe."""

    keypoint_indices: np.ndarray
    descriptors: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = np.asarray(self.keypoint_indices, dtype=np.int64).reshape(-1)
        desc = np.asarray(self.descriptors, dtype=np.float32)
        if desc.size == 0:
            desc = desc.reshape(0, DIM)
        if desc.ndim != 2 or desc.shape[1] != DIM:
            raise DimensionMismatch(f"descriptors must be (n, {DIM}), got {desc.shape}")
        if len(idx) != len(desc):
            raise DimensionMismatch(f"{len(idx)} indices for {len(desc)} descriptors")
        if len(np.unique(idx)) != len(idx) or (len(idx) and idx.min() < 0):
            raise InvalidParameter("keypoint indices must be unique and non-negative")
        idx.setflags(write=False)
        desc = np.array(desc)
        desc.setflags(write=False)
        object.__setattr__(self, "keypoint_indices", idx)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self):
        return len(self.keypoint_indices)

    def equals(self, other):
        return (np.array_equal(self.keypoint_indices, other.keypoint_indices)
                and self.descriptors.shape == other.descriptors.shape
                and np.array_equal(self.descriptors, other.descriptors))


def _bin(values, lo, hi):
    b = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def pair_features(ps, ns, pt, nt):
    """Darboux-frame angles ``(alpha, phi, theta)`` for arrays of point pairs.

    The endpoint whose normal makes the smaller angle with the connecting
    line acts as source; near ties keep the given order. Pairs whose frame is undefined (normal parallel to
    the connecting line) yield zeros.
    """
    ps, ns, pt, nt = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (ps, ns, pt, nt))
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    dhat = d / safe[:, None]
    cos_s = np.einsum("ij,ij->i", ns, dhat)
    cos_t = np.einsum("ij,ij->i", nt, dhat)
    swap = np.abs(cos_t) - np.abs(cos_s) > _SWAP_TIE
    u = np.where(swap[:, None], nt, ns)
    n_tgt = np.where(swap[:, None], ns, nt)
    dhat = np.where(swap[:, None], -dhat, dhat)

    v = np.cross(u, dhat)
    v_norm = np.linalg.norm(v, axis=1)
    ok = (v_norm > 0) & (dist > 0)
    v = v / np.where(ok, v_norm, 1.0)[:, None]
    w = np.cross(u, v)

    alpha = np.einsum("ij,ij->i", v, n_tgt)
    phi = np.einsum("ij,ij->i", u, dhat)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n_tgt), np.einsum("ij,ij->i", u, n_tgt))
    alpha[~ok] = 0.0
    phi[~ok] = 0.0
    theta[~ok] = 0.0
    return alpha, phi, theta


def _feature_bins(alpha, phi, theta):
    return (_bin(alpha, -1.0, 1.0),
            N_BINS + _bin(phi, -1.0, 1.0),
            2 * N_BINS + _bin(theta, -np.pi, np.pi))


def compute_spfh(cloud, point_index, neighbor_indices):
    """Simplified point feature histogram of one point against its neighbors.

    The point itself and neighbors coincident with it are skipped. Each
    11-bin group is scaled to sum to 100; no usable neighbor gives zeros.
    """
    if cloud.normals is None:
        raise InvalidParameter("SPFH requires normals")
    nbr = np.asarray(neighbor_indices, dtype=np.int64).reshape(-1)
    P, N = cloud.points, cloud.normals
    nbr = nbr[(nbr != point_index)]
    nbr = nbr[np.linalg.norm(P[nbr] - P[point_index], axis=1) > 0]
    hist = np.zeros(DIM)
    if len(nbr) == 0:
        return hist
    k = len(nbr)
    a, f, t = pair_features(np.repeat(P[[point_index]], k, 0), np.repeat(N[[point_index]], k, 0),
                            P[nbr], N[nbr])
    for bins in _feature_bins(a, f, t):
        np.add.at(hist, bins, 100.0 / k)
    return hist


def _spfh_all(P, N, offsets, nbr, dist):
    """SPFH for every point given CSR neighbor lists (self/coincident excluded by caller)."""
    n = len(P)
    counts = np.diff(offsets)
    owner = np.repeat(np.arange(n), counts)
    hist = np.zeros((n, DIM))
    if len(nbr):
        a, f, t = pair_features(P[owner], N[owner], P[nbr], N[nbr])
        flat = hist.reshape(-1)
        for bins in _feature_bins(a, f, t):
            flat += np.bincount(owner * DIM + bins, minlength=n * DIM)
    scale = np.where(counts > 0, 100.0 / np.maximum(counts, 1), 0.0)
    return hist * scale[:, None]


def _drop_self(offsets, nbr, dist):
    m = len(offsets) - 1
    owner = np.repeat(np.arange(m), np.diff(offsets))
    keep = dist > 0
    counts = np.bincount(owner[keep], minlength=m)
    new_off = np.zeros_like(offsets)
    np.cumsum(counts, out=new_off[1:])
    return new_off, nbr[keep], dist[keep]


def compute_fpfh(cloud, keypoint_indices=None, radius=0.05, index=None):
    """FPFH descriptors for ``keypoint_indices`` (all points when ``None``).

    ``FPFH(p) = SPFH(p) + (1/k) * sum_i SPFH(p_i) / ||p - p_i||`` over the k
    neighbors within ``radius``, after which each 11-bin group is rescaled
    to sum to 100. Neighborhoods only include points with valid normals.
    Keypoints with an invalid normal or without neighbors are dropped and
    counted in ``diagnostics``.
    """
    radius = check_positive(radius, "radius")
    if cloud.normals is None:
        raise InvalidParameter("FPFH requires a cloud with normals")
    n = len(cloud)
    if keypoint_indices is None:
        keypoint_indices = np.arange(n)
    kp = np.asarray(keypoint_indices, dtype=np.int64).reshape(-1)
    if len(kp) and (kp.min() < 0 or kp.max() >= n):
        raise InvalidParameter("keypoint index out of range")
    if len(np.unique(kp)) != len(kp):
        raise InvalidParameter("keypoint indices must be unique")

    valid = cloud.valid_normal_mask()
    valid_idx = np.flatnonzero(valid)
    sub_of = np.full(n, -1, dtype=np.int64)
    sub_of[valid_idx] = np.arange(len(valid_idx))
    kp_ok = kp[valid[kp]] if len(kp) else kp
    diagnostics = {"invalid_normal": int(len(kp) - len(kp_ok)), "no_neighbors": 0}
    if len(kp_ok) == 0 or len(valid_idx) == 0:
        return FeatureSet(np.zeros(0, np.int64), np.zeros((0, DIM), np.float32), diagnostics)

    P = cloud.points[valid_idx]
    N = cloud.normals[valid_idx]
    if index is None or len(index) != len(P):
        index = SpatialIndex(P)
    offsets, nbr, dist = _drop_self(*index.radius_search_many(P, radius))
    spfh = _spfh_all(P, N, offsets, nbr, dist)

    counts = np.diff(offsets)
    owner = np.repeat(np.arange(len(P)), counts)
    weights = 1.0 / dist / np.maximum(counts, 1)[owner]
    W = sparse.csr_matrix((weights, (owner, nbr)), shape=(len(P), len(P)))

    rows = sub_of[kp_ok]
    has_nbr = counts[rows] > 0
    diagnostics["no_neighbors"] = int((~has_nbr).sum())
    rows = rows[has_nbr]
    fpfh = spfh[rows] + W[rows] @ spfh
    groups = fpfh.reshape(-1, 3, N_BINS)
    sums = groups.sum(axis=2, keepdims=True)
    groups = np.where(sums > 0, groups * (100.0 / np.where(sums > 0, sums, 1.0)), 0.0)
    return FeatureSet(kp_ok[has_nbr], groups.reshape(-1, DIM).astype(np.float32), diagnostics)


class FPFHExtractor(TransformerMixin, BaseEstimator):
    """Describe every valid-normal point of a cloud with FPFH."""

    def __init__(self, radius=0.05):
        self.radius = radius

    def fit(self, X=None, y=None):
        check_positive(self.radius, "radius")
        return self

    def transform(self, X):
        return compute_fpfh(X, None, self.radius)


def describe(cloud, leaf=0.01, normal_radius=0.03, fpfh_radius=0.05, viewpoint=(0.0, 0.0, 0.0)):
    """Downsample, estimate normals and compute FPFH in one call.

    Returns ``(downsampled cloud with normals, FeatureSet)``; feature
    indices refer to the downsampled cloud.
    """
    down = voxel_downsample(cloud, leaf)
    down = estimate_normals(down, normal_radius, viewpoint)
    return down, compute_fpfh(down, None, fpfh_radius)


def write_features(path, features):
    """Binary layout: b"FPFH", u32 version, u32 count, u32 dim, then per
    keypoint a u32 index followed by 33 float32 (all little-endian)."""
    rec = np.empty(len(features), dtype=[("index", "<u4"), ("desc", "<f4", (DIM,))])
    rec["index"] = features.keypoint_indices
    rec["desc"] = features.descriptors
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", _VERSION, len(features), DIM))
        fh.write(rec.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise ParseError(f"{path}: not an FPFH feature file")
    version, count, dim = struct.unpack("<III", raw[4:16])
    if version != _VERSION or dim != DIM:
        raise ParseError(f"{path}: unsupported version {version} / dim {dim}")
    dtype = np.dtype([("index", "<u4"), ("desc", "<f4", (DIM,))])
    if len(raw) - 16 != dtype.itemsize * count:
        raise ParseError(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=16)
    return FeatureSet(rec["index"].astype(np.int64), rec["desc"].astype(np.float32))
