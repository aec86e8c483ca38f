"""Instance recognition: color-embedding classifier and model-database views.

The classifier turns a fixed-length color embedding into an instance
label. The database stores several partial views per instance, each with
its downsampled cloud and FPFH descriptors, and picks the view that
registers best against a scene crop.
"""
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .cloud import PointCloud, RigidTransform, estimate_normals, voxel_downsample
from .exceptions import (
    CompatibilityError,
    DegenerateConfiguration,
    DimensionMismatch,
    EmptyFeatureSet,
    EmptyImage,
    InvalidParameter,
    NoMatch,
    ParseError,
    SingleClass,
    TooFewCorrespondences,
    UnknownInstance,
)
from .fpfh import FeatureSet, compute_fpfh, read_features, write_features
from .ply import read_ply, write_ply
from .registration import FastGlobalRegistration, RANSACRegistration
from .validation import check_is_fitted, check_positive, check_positive_int

EMBEDDING_DIM = 1000
_EMB_MAGIC = b"EMB1"
_MIN_INLIERS = 3


# --------------------------------------------------------------------------
# classifier

def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_matrix(X, dim=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionMismatch(f"embeddings must be 2-d, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise DimensionMismatch(f"embedding length {X.shape[1]} != model dimension {dim}")
    if not np.all(np.isfinite(X)):
        raise InvalidParameter("embeddings contain non-finite values")
    return X


class LogisticRegressionClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by full-batch gradient descent.

    The objective is mean softmax cross-entropy plus ``l2 / 2 * ||W||^2``
    (biases are not penalized). Each epoch backtracks the step size until
    the Armijo condition holds, so the loss never increases. Training
    starts from zeros and stops when the gradient norm drops below
    ``tol`` or after ``max_epochs`` epochs.
    """

    def __init__(self, l2=1e-4, max_epochs=500, tol=1e-5, learning_rate=1.0):
        self.l2 = l2
        self.max_epochs = max_epochs
        self.tol = tol
        self.learning_rate = learning_rate

    def _loss_grad(self, W, b, X, Y):
        P = _softmax(X @ W.T + b)
        n = len(X)
        loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / n + 0.5 * self.l2 * np.sum(W * W)
        G = (P - Y) / n
        return loss, G.T @ X + self.l2 * W, G.sum(axis=0)

    def fit(self, X, y):
        X = _check_matrix(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise DimensionMismatch(f"{len(X)} embeddings but {len(y)} labels")
        if self.l2 < 0:
            raise InvalidParameter("l2 must be non-negative")
        epochs = check_positive_int(self.max_epochs, "max_epochs", minimum=0)
        step0 = check_positive(self.learning_rate, "learning_rate")
        classes, y_idx = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise SingleClass(f"need at least 2 classes, got {len(classes)}")
        K, d = len(classes), X.shape[1]
        Y = np.eye(K)[y_idx]
        W, b = np.zeros((K, d)), np.zeros(K)
        loss, gW, gb = self._loss_grad(W, b, X, Y)
        history = [loss]
        step = step0
        self.n_epochs_ = 0
        for _ in range(epochs):
            g2 = float(np.sum(gW * gW) + np.sum(gb * gb))
            if np.sqrt(g2) < self.tol:
                break
            while True:
                W_new, b_new = W - step * gW, b - step * gb
                new_loss, nW, nb = self._loss_grad(W_new, b_new, X, Y)
                if new_loss <= loss - 1e-4 * step * g2:
                    break
                step *= 0.5
                if step < 1e-30:
                    W_new, b_new, new_loss, nW, nb = W, b, loss, gW, gb
                    break
            if step < 1e-30:
                break
            W, b, loss, gW, gb = W_new, b_new, new_loss, nW, nb
            history.append(loss)
            self.n_epochs_ += 1
            step = min(step * 2.0, step0)
        self.classes_ = classes
        self.coef_ = W
        self.intercept_ = b
        self.loss_history_ = history
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = _check_matrix(X, self.n_features_in_)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        # argmax takes the first maximum, i.e. the lowest class index on ties
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def to_model(self):
        check_is_fitted(self, "coef_")
        return LogisticModel(self.coef_, self.intercept_, [str(c) for c in self.classes_])


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """Trained classifier parameters; immutable and safe to share."""

    weights: np.ndarray
    biases: np.ndarray
    class_labels: List[str]

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        b = np.array(self.biases, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or W.shape[0] != len(b) or len(b) != len(self.class_labels):
            raise DimensionMismatch("weights rows, biases and class labels must agree in count")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InvalidParameter("model parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "class_labels", [str(c) for c in self.class_labels])

    @property
    def dim(self):
        return self.weights.shape[1]

    def predict(self, embedding):
        """``(label, probabilities)`` for one embedding."""
        e = _check_matrix(embedding, self.dim)
        if len(e) != 1:
            raise DimensionMismatch("predict takes a single embedding")
        probs = _softmax(e @ self.weights.T + self.biases)[0]
        return self.class_labels[int(np.argmax(probs))], probs

    def save(self, path):
        """One JSON header line, then float32 weights (row-major) and biases."""
        header = {"format": "logistic-model", "labels": self.class_labels, "dim": self.dim}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(self.weights.astype("<f4").tobytes())
            fh.write(self.biases.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        nl = raw.find(b"\n")
        try:
            header = json.loads(raw[:nl].decode("utf-8"))
            labels, dim = list(header["labels"]), int(header["dim"])
        except (ValueError, KeyError, TypeError):
            raise ParseError(f"{path}: bad model header") from None
        K = len(labels)
        body = raw[nl + 1:]
        if nl < 0 or len(body) != 4 * K * (dim + 1):
            raise ParseError(f"{path}: expected {K}x{dim} weights and {K} biases")
        values = np.frombuffer(body, dtype="<f4").astype(np.float64)
        return cls(values[:K * dim].reshape(K, dim), values[K * dim:], labels)


def train_classifier(embeddings, labels, l2=1e-4, max_epochs=500, tol=1e-5):
    """Fit :class:`LogisticRegressionClassifier` and return its :class:`LogisticModel`."""
    clf = LogisticRegressionClassifier(l2=l2, max_epochs=max_epochs, tol=tol)
    return clf.fit(np.asarray(embeddings), labels).to_model()


def predict(model, embedding):
    return model.predict(embedding)


# --------------------------------------------------------------------------
# embeddings

def extract_baseline_embedding(rgb_crop, dim=EMBEDDING_DIM):
    """Joint RGB histogram of a crop resized to 224x224 (nearest neighbor).

    ``dim`` must be a cube ``b**3``; channel value ``v`` falls in bin
    ``floor(v * b / 256)``. The histogram is L1-normalized.
    """
    img = np.asarray(rgb_crop)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise EmptyImage(f"crop of shape {img.shape} has no pixels")
    b = int(round(dim ** (1.0 / 3.0)))
    if b ** 3 != dim:
        raise InvalidParameter(f"dim must be a perfect cube, got {dim}")
    img = np.asarray(Image.fromarray(img[:, :, :3].astype(np.uint8)).resize((224, 224), Image.NEAREST))
    bins = (img.astype(np.int64) * b) // 256
    flat = (bins[..., 0] * b + bins[..., 1]) * b + bins[..., 2]
    hist = np.bincount(flat.reshape(-1), minlength=dim).astype(np.float64)
    return (hist / hist.sum()).astype(np.float32)


class BaselineColorEmbedder(TransformerMixin, BaseEstimator):
    """Map a list of RGB crops to an ``(n, dim)`` array of histogram embeddings."""

    def __init__(self, dim=EMBEDDING_DIM):
        self.dim = dim

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return np.stack([extract_baseline_embedding(img, self.dim) for img in X])


def write_embedding(path, values):
    v = np.asarray(values, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC + struct.pack("<I", len(v)) + v.tobytes())


def load_external_embedding(path, dim=None):
    """Read an embedding file: b"EMB1", u32 length, float32 values (little-endian)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _EMB_MAGIC:
        raise ParseError(f"{path}: not an embedding file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 4 * n:
        raise ParseError(f"{path}: header says {n} values, file holds {(len(raw) - 8) / 4}")
    values = np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise ParseError(f"{path}: non-finite values")
    if dim is not None and n != dim:
        raise DimensionMismatch(f"{path}: embedding length {n} != expected {dim}")
    return values


# --------------------------------------------------------------------------
# model database

@dataclass(frozen=True, eq=False)
class ObjectView:
    instance_label: str
    view_id: str
    cloud: PointCloud
    features: FeatureSet
    source_pose_hint: Optional[RigidTransform] = None

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise InvalidParameter(f"view {self.view_id} has an empty cloud")


def _storable(cloud):
    """Round a cloud to what PLY storage keeps: float32 geometry, 8-bit color."""
    points = cloud.points.astype(np.float32).astype(np.float64)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals.astype(np.float32).astype(np.float64)
    colors = None
    if cloud.colors is not None:
        colors = np.round(cloud.colors * 255.0) / 255.0
    return PointCloud(points, normals, colors)


def build_view(label, view_id, cloud, leaf=0.01, normal_radius=0.03, fpfh_radius=0.05,
               viewpoint=(0.0, 0.0, 0.0), pose_hint=None):
    """Preprocess one raw partial view into a storable :class:`ObjectView`.

    Points with unreliable normals are dropped, and the cloud is rounded to
    its on-disk precision before descriptors are computed, so a saved and
    reloaded database compares equal bit for bit.
    """
    down = estimate_normals(voxel_downsample(cloud, leaf), normal_radius, viewpoint)
    down = _storable(down.with_valid_normals_only())
    return ObjectView(str(label), str(view_id), down, compute_fpfh(down, None, fpfh_radius),
                      pose_hint)


class ModelDatabase:
    """Views per instance label plus the parameters they were built with."""

    MANIFEST = "manifest.json"

    def __init__(self, views: Dict[str, List[ObjectView]], leaf=0.01, fpfh_radius=0.05,
                 normal_radius=0.03):
        for label, vs in views.items():
            if not vs:
                raise InvalidParameter(f"instance {label!r} has no views")
        self._views = {str(k): list(v) for k, v in views.items()}
        self.leaf = float(leaf)
        self.fpfh_radius = float(fpfh_radius)
        self.normal_radius = float(normal_radius)

    @property
    def labels(self):
        return sorted(self._views)

    def views(self, label):
        try:
            return list(self._views[label])
        except KeyError:
            raise UnknownInstance(label) from None

    def __len__(self):
        return len(self._views)

    @property
    def params(self):
        return {"leaf_m": self.leaf, "fpfh_radius_m": self.fpfh_radius,
                "normal_radius_m": self.normal_radius}

    def check_compatible(self, leaf, fpfh_radius, normal_radius=None):
        wanted = {"leaf_m": leaf, "fpfh_radius_m": fpfh_radius}
        if normal_radius is not None:
            wanted["normal_radius_m"] = normal_radius
        for key, value in wanted.items():
            if not np.isclose(self.params[key], value, rtol=1e-9, atol=0.0):
                raise CompatibilityError(
                    f"database built with {key}={self.params[key]}, pipeline uses {value}")

    def save(self, root):
        os.makedirs(root, exist_ok=True)
        manifest = {"params": self.params, "instances": {}}
        for label in self.labels:
            if os.sep in label or label in (".", ".."):
                raise InvalidParameter(f"instance label {label!r} cannot name a directory")
            os.makedirs(os.path.join(root, label), exist_ok=True)
            entries = []
            for v in self._views[label]:
                ply = os.path.join(label, f"{v.view_id}.ply")
                feat = os.path.join(label, f"{v.view_id}.fpfh")
                write_ply(os.path.join(root, ply), v.cloud)
                write_features(os.path.join(root, feat), v.features)
                entry = {"view_id": v.view_id, "cloud": ply, "features": feat}
                if v.source_pose_hint is not None:
                    entry["pose_hint"] = v.source_pose_hint.to_dict()
                entries.append(entry)
            manifest["instances"][label] = entries
        with open(os.path.join(root, self.MANIFEST), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, root):
        path = os.path.join(root, cls.MANIFEST)
        try:
            with open(path) as fh:
                manifest = json.load(fh)
            params = manifest["params"]
            views = {}
            for label, entries in manifest["instances"].items():
                views[label] = []
                for e in entries:
                    cloud = read_ply(os.path.join(root, e["cloud"]))
                    feats = read_features(os.path.join(root, e["features"]))
                    hint = RigidTransform.from_dict(e["pose_hint"]) if "pose_hint" in e else None
                    views[label].append(ObjectView(label, str(e["view_id"]), cloud, feats, hint))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{root}: cannot load model database ({exc})") from None
        return cls(views, params["leaf_m"], params["fpfh_radius_m"],
                   params.get("normal_radius_m", 3 * params["leaf_m"]))


def select_views(db, label, count=10, seed=0):
    """Up to ``count`` views of ``label`` drawn without replacement."""
    views = db.views(label)
    count = check_positive_int(count, "count")
    if len(views) <= count:
        return views
    rng = np.random.default_rng(seed)
    return [views[i] for i in rng.choice(len(views), size=count, replace=False)]


def make_coarse_registration(method, params=None):
    """RANSAC or FGR estimator from a method name and a parameter dict."""
    params = dict(params or {})
    if method == "RANSAC":
        return RANSACRegistration(**params)
    if method == "FGR":
        return FastGlobalRegistration(**params)
    raise InvalidParameter(f"unknown coarse method {method!r}; expected RANSAC or FGR")


def _register_view(view, scene, scene_features, method, params):
    try:
        est = make_coarse_registration(method, params)
        return est.fit(view.cloud, scene, view.features, scene_features).result_
    except (TooFewCorrespondences, EmptyFeatureSet, DegenerateConfiguration):
        return None


def select_best_view(scene, scene_features, views, method="RANSAC", params=None, n_workers=1,
                     min_inliers=_MIN_INLIERS):
    """Register every view against the scene crop and keep the best.

    Each view is the registration source, so the returned transform maps
    the view into the scene. Views with fewer than ``min_inliers`` (at
    least 3) inliers are rejected;
    among the rest the most inliers win, then the lower RMSE, then the
    lower ``view_id``. Returns ``(view, RegistrationResult)``.
    """
    if len(scene) == 0:
        raise InvalidParameter("scene crop is empty")
    if not views:
        raise InvalidParameter("no candidate views")
    n_workers = check_positive_int(n_workers, "n_workers")
    min_inliers = check_positive_int(min_inliers, "min_inliers", minimum=_MIN_INLIERS)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(
                lambda v: _register_view(v, scene, scene_features, method, params), views))
    else:
        results = [_register_view(v, scene, scene_features, method, params) for v in views]
    ranked = [(-r.inlier_count, r.inlier_rmse, v.view_id, i)
              for i, (v, r) in enumerate(zip(views, results))
              if r is not None and r.inlier_count >= min_inliers]
    if not ranked:
        raise NoMatch(f"no view reached {min_inliers} inlier correspondences")
    i = min(ranked)[3]
    return views[i], results[i]
