"""RGB-D frame ingestion: pinhole back-projection, bbox crops, frame manifests."""
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from PIL import Image

from .cloud import PointCloud
from .exceptions import DimensionMismatch, EmptyCrop, InvalidParameter, ParseError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; ``depth_scale`` is depth units per meter.

    The defaults are conventional values for a 640x480 Kinect-class sensor.
    """

    fx: float = 570.3
    fy: float = 570.3
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    depth_scale: float = 1000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameter("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidParameter("image size must be positive")
        if not self.depth_scale > 0:
            raise InvalidParameter("depth_scale must be positive")

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def project(self, points):
        """Pixel coordinates ``(u, v)`` of camera-frame points."""
        P = np.asarray(points, dtype=np.float64)
        return np.stack([self.fx * P[:, 0] / P[:, 2] + self.cx,
                         self.fy * P[:, 1] / P[:, 2] + self.cy], axis=1)


@dataclass(frozen=True)
class Annotation:
    label: str
    bbox: tuple  # (x, y, w, h) in pixels
    embedding: Optional[str] = None


@dataclass(frozen=True)
class FrameManifest:
    frame_id: str
    rgb: str
    depth: str
    annotations: List[Annotation] = field(default_factory=list)


def _check_image_shape(depth, K):
    if depth.ndim != 2 or depth.shape != (K.height, K.width):
        raise DimensionMismatch(f"depth image {depth.shape} does not match intrinsics "
                                f"({K.height}, {K.width})")


def _clip_bbox(bbox, K):
    x, y, w, h = (int(round(v)) for v in bbox)
    if w <= 0 or h <= 0:
        raise InvalidParameter(f"bbox {bbox} has non-positive size")
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, K.width), min(y + h, K.height)
    if x0 >= x1 or y0 >= y1:
        raise InvalidParameter(f"bbox {bbox} lies outside the {K.width}x{K.height} image")
    return x0, y0, x1, y1


def _back_project(depth, rgb, K, x0, y0, x1, y1):
    d = np.asarray(depth)[y0:y1, x0:x1].astype(np.float64)
    v, u = np.nonzero(d > 0)
    z = d[v, u] / K.depth_scale
    u = u + x0
    v = v + y0
    pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    colors = None
    if rgb is not None:
        colors = np.asarray(rgb)[v, u, :3].astype(np.float64) / 255.0
    return PointCloud(pts, None, colors)


def depth_to_cloud(depth, rgb, K):
    """Back-project every pixel with positive depth: ``z = d / depth_scale``,
    ``x = (u - cx) z / fx``, ``y = (v - cy) z / fy``. Points are in row-major
    pixel order."""
    depth = np.asarray(depth)
    _check_image_shape(depth, K)
    if rgb is not None and np.asarray(rgb).shape[:2] != depth.shape:
        raise DimensionMismatch("rgb and depth images differ in size")
    return _back_project(depth, rgb, K, 0, 0, K.width, K.height)


def crop_by_bbox(depth, rgb, K, bbox):
    """Cloud from the pixels inside ``bbox = (x, y, w, h)`` only."""
    depth = np.asarray(depth)
    _check_image_shape(depth, K)
    x0, y0, x1, y1 = _clip_bbox(bbox, K)
    cloud = _back_project(depth, rgb, K, x0, y0, x1, y1)
    if len(cloud) == 0:
        raise EmptyCrop(f"no valid depth inside bbox {tuple(bbox)}")
    return cloud


def crop_rgb(rgb, bbox):
    rgb = np.asarray(rgb)
    h, w = rgb.shape[:2]
    x, y, bw, bh = (int(round(v)) for v in bbox)
    return rgb[max(y, 0):min(y + bh, h), max(x, 0):min(x + bw, w)]


def load_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_depth(path):
    """16-bit single-channel PNG; 0 marks missing depth."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ParseError(f"{path}: depth image must be single-channel")
    return arr.astype(np.uint16) if arr.dtype != np.uint16 else arr


def save_rgb(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def save_depth(path, depth):
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)


def load_manifest(path):
    """Parse a frame manifest. Relative image paths resolve against the
    manifest's directory. Returns ``(frames, intrinsics)``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    base =os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    K = CameraIntrinsics.from_dict(data.get("intrinsics", {}))
    frames = []
    try:
        for f in data["frames"]:
            anns = [Annotation(a["label"], tuple(a["bbox"]), resolve(a.get("embedding")))
                    for a in f.get("annotations", [])]
            frame = FrameManifest(str(f["id"]), resolve(f["rgb"]), resolve(f["depth"]), anns)
            for p in (frame.rgb, frame.depth):
                if not os.path.exists(p):
                    raise ParseError(f"{path}: frame {frame.frame_id} references missing file {p}")
            frames.append(frame)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed manifest ({exc})") from None
    return frames, K


def write_manifest(path, frames, K):
    base = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return None if p is None else os.path.relpath(p, base)

    data = {
        "frames": [
            {"id": f.frame_id, "rgb": rel(f.rgb), "depth": rel(f.depth),
             "annotations": [dict({"label": a.label, "bbox": list(a.bbox)},
                                  **({"embedding": rel(a.embedding)} if a.embedding else {}))
                             for a in f.annotations]}
            for f in frames
        ],
        "intrinsics": K.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
