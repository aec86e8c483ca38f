"""Minimal PLY reader/writer for vertex clouds (ASCII and binary little-endian)."""
import numpy as np

from .cloud import PointCloud
from .exceptions import ParseError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud, binary=True):
    """Write x,y,z (float32), optional nx,ny,nz (float32) and red,green,blue (uint8)."""
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(n, dtype=fields)
    for i, axis in enumerate("xyz"):
        data[axis] = cloud.points[:, i]
    if cloud.normals is not None:
        for i, axis in enumerate(("nx", "ny", "nz")):
            data[axis] = cloud.normals[:, i]
    if cloud.colors is not None:
        rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
        for i, axis in enumerate(("red", "green", "blue")):
            data[axis] = rgb[:, i]

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    for name, dt in fields:
        header.append(f"property {'float' if dt == '<f4' else 'uchar'} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(_ascii_value(v) for v in row) + "\n").encode("ascii"))


def _ascii_value(v):
    if isinstance(v, np.floating):
        return repr(float(v))
    return str(int(v))


def read_ply(path):
    """Read the ``vertex`` element of a PLY file into a :class:`PointCloud`.

    Values are widened to float64; colors are scaled from uint8 to [0, 1].
    Other elements (faces, ...) are ignored when they follow the vertices.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}: unknown property type {tok[1]}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise ParseError(f"{path}: first element must be 'vertex'")
    _, n, props = elements[0]
    if any(dt is None for _, dt in props):
        raise ParseError(f"{path}: list properties on vertices are not supported")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + dt) for name, dt in props])
        need = dtype.itemsize * n
        if len(raw) - body_start < need:
            raise ParseError(f"{path}: truncated vertex data")
        data = np.frombuffer(raw, dtype=dtype, count=n, offset=body_start)
        cols = {name: data[name] for name, _ in props}
    else:
        lines = raw[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines[:n]]
        if len(rows) < n or any(len(r) < len(props) for r in rows):
            raise ParseError(f"{path}: truncated vertex data")
        try:
            cols = {name: np.array([r[i] for r in rows], dtype=dt) for i, (name, dt) in enumerate(props)}
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None

    names = set(cols)
    if not {"x", "y", "z"} <= names:
        raise ParseError(f"{path}: vertex element lacks x/y/z")
    points = np.stack([cols[a].astype(np.float64) for a in "xyz"], axis=1) if n else np.zeros((0, 3))
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([cols[a].astype(np.float64) for a in ("nx", "ny", "nz")], axis=1)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([cols[a].astype(np.float64) for a in ("red", "green", "blue")], axis=1)
        if np.issubdtype(cols["red"].dtype, np.integer):
            colors /= 255.0
    return PointCloud(points, normals, colors)
