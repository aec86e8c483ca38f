"""Synthetic objects, poses and RGB-D frames for benchmarks and tests."""
import numpy as np
from scipy.spatial.transform import Rotation

from .cloud import PointCloud, RigidTransform


def make_object_cloud(n_points=2000, seed=0, n_boxes=3, min_side=0.04, max_side=0.16,
                      spread=0.06):
    """Surface samples of a random union of rotated boxes.

    Box sides are uniform in ``[min_side, max_side]`` meters and centers
    uniform in ``[-spread, spread]``. Points are spread over box faces in
    proportion to area. The flat faces and sharp edges give distinctive
    local geometry with no global symmetry.
    """
    rng = np.random.default_rng(seed)
    dims = rng.uniform(min_side, max_side, size=(n_boxes, 3))
    centers = rng.uniform(-spread, spread, size=(n_boxes, 3))
    rotations = Rotation.random(n_boxes, random_state=rng.integers(1 << 31)).as_matrix()
    face_area = np.stack([dims[:, 1] * dims[:, 2], dims[:, 0] * dims[:, 2],
                          dims[:, 0] * dims[:, 1]], axis=1)
    counts = rng.multinomial(n_points, face_area.sum(axis=1) / face_area.sum())
    parts = []
    for d, c, R, k, fa in zip(dims, centers, rotations, counts, face_area):
        p = np.tile(fa, 2)
        face = rng.choice(6, size=k, p=p / p.sum())
        local = rng.uniform(-0.5, 0.5, size=(k, 3)) * d
        axis = face % 3
        local[np.arange(k), axis] = np.where(face < 3, 0.5, -0.5) * d[axis]
        parts.append(local @ R.T + c)
    return PointCloud(np.vstack(parts))


def random_rigid_transform(rng, max_angle=np.pi / 6, max_translation=0.3):
    """Uniform random axis, angle in [0, max_angle], translation norm <= max_translation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, max_translation)
    return RigidTransform(Rotation.from_rotvec(axis * angle).as_matrix(), t)


def add_noise(cloud, sigma, rng):
    return PointCloud(cloud.points + rng.normal(scale=sigma, size=cloud.points.shape),
                      None, cloud.colors)


def render_frame(objects, intrinsics, background_depth=None, seed=0):
    """Render an RGB-D frame of height-field objects in front of the camera.

    ``objects`` is a list of dicts with keys ``bbox`` ([x, y, w, h] pixels),
    ``depth`` (meters at the box center), ``color`` (RGB uint8 triple) and
    optionally ``relief`` (meters of surface variation) and ``phase`` (three
    floats fixing the surface shape; random when absent). Returns
    ``(rgb uint8 HxWx3, depth uint16 HxW)`` with depth in sensor units.
    """
    rng = np.random.default_rng(seed)
    H, W = intrinsics.height, intrinsics.width
    depth = np.zeros((H, W), dtype=np.float64)
    rgb = np.full((H, W, 3), 40, dtype=np.uint8)
    if background_depth is not None:
        depth[:] = background_depth
    for obj in objects:
        x, y, w, h = obj["bbox"]
        relief = obj.get("relief", 0.03)
        v, u = np.mgrid[y:y + h, x:x + w]
        su = (u - x) / max(w - 1, 1) * 2 - 1
        sv = (v - y) / max(h - 1, 1) * 2 - 1
        phase = obj.get("phase")
        if phase is None:
            phase = rng.uniform(0, 2 * np.pi, size=3)
        surf = (np.sqrt(np.clip(1 - 0.5 * (su ** 2 + sv ** 2), 0, None))
                + 0.3 * np.sin(3 * su + phase[0]) * np.cos(2 * sv + phase[1])
                + 0.2 * np.sin(5 * sv * su + phase[2]))
        depth[y:y + h, x:x + w] = obj["depth"] - relief * surf
        rgb[y:y + h, x:x + w] = np.asarray(obj["color"], dtype=np.uint8)
    depth_units = np.round(depth * intrinsics.depth_scale).astype(np.uint16)
    return rgb, depth_units


def write_synthetic_dataset(root, n_instances=3, n_views=4, n_frames=3, seed=0, box=80,
                            intrinsics=None):
    """Write a small RGB-D dataset of height-field objects under ``root``.

    Produces ``views/<label>/<view>.ply`` (one object alone per view, in
    camera coordinates) and ``manifest.json`` listing ``n_frames`` frames
    with every instance annotated once per frame. Each instance has a
    fixed color and surface shape, so scene crops match database views up
    to a translation. Returns the manifest path.
    """
    import os

    from .ingestion import (Annotation, CameraIntrinsics, FrameManifest, crop_by_bbox,
                            save_depth, save_rgb, write_manifest)
    from .ply import write_ply

    K = intrinsics or CameraIntrinsics()
    rng = np.random.default_rng(seed)
    instances = []
    for k in range(n_instances):
        instances.append({
            "label": f"obj{k:02d}",
            "color": tuple(int(c) for c in rng.integers(30, 226, size=3)),
            "phase": rng.uniform(0, 2 * np.pi, size=3),
            "depth": float(rng.uniform(0.7, 0.9)),
            "relief": 0.03,
        })

    def place(inst, x, y):
        return dict(inst, bbox=[int(x), int(y), box, box])

    for inst in instances:
        folder = os.path.join(root, "views", inst["label"])
        os.makedirs(folder, exist_ok=True)
        for v in range(n_views):
            x = int(rng.integers(0, K.width - box))
            y = int(rng.integers(0, K.height - box))
            obj = place(inst, x, y)
            rgb, depth = render_frame([obj], K, seed=seed)
            write_ply(os.path.join(folder, f"view{v:02d}.ply"), crop_by_bbox(depth, rgb, K, obj["bbox"]))

    frames_dir = os.path.join(root, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    frames = []
    slots = [(x, y) for y in range(0, K.height - box, box + 10) for x in range(0, K.width - box, box + 10)]
    for f in range(n_frames):
        chosen = rng.choice(len(slots), size=n_instances, replace=False)
        objs = [place(inst, *slots[c]) for inst, c in zip(instances, chosen)]
        rgb, depth = render_frame(objs, K, seed=seed + f)
        rgb_path = os.path.join(frames_dir, f"frame{f:03d}_rgb.png")
        depth_path = os.path.join(frames_dir, f"frame{f:03d}_depth.png")
        save_rgb(rgb_path, rgb)
        save_depth(depth_path, depth)
        anns = [Annotation(o["label"], tuple(o["bbox"])) for o in objs]
        frames.append(FrameManifest(f"frame{f:03d}", rgb_path, depth_path, anns))
    manifest = os.path.join(root, "manifest.json")
    write_manifest(manifest, frames, K)
    return manifest
