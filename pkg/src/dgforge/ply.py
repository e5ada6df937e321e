"""Minimal PLY reader/writer for meshes and sampled clouds.

Reads ascii and binary_little_endian files with vertex x/y/z (optionally
nx/ny/nz) properties and a face list property. Writes deterministic ascii
output so byte-identical re-runs are possible.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import PointCloud, TriangleMesh

_SCALAR_FMT = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


class PlyError(ValueError):
    pass


def _parse_header(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise PlyError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(kind, spec...)])
    while True:
        line = f.readline()
        if not line:
            raise PlyError("unexpected end of header")
        tokens = line.decode("ascii").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                elements[-1][2].append(("scalar", tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format: {fmt}")
    return fmt, elements


def _read_element_ascii(f, count, props):
    rows = []
    for _ in range(count):
        tokens = f.readline().split()
        row = {}
        pos = 0
        for p in props:
            if p[0] == "scalar":
                row[p[2]] = float(tokens[pos])
                pos += 1
            else:
                n = int(tokens[pos])
                row[p[3]] = [float(t) for t in tokens[pos + 1:pos + 1 + n]]
                pos += 1 + n
        rows.append(row)
    return rows


def _read_element_binary(f, count, props):
    rows = []
    for _ in range(count):
        row = {}
        for p in props:
            if p[0] == "scalar":
                fmt = "<" + _SCALAR_FMT[p[1]]
                (val,) = struct.unpack(fmt, f.read(struct.calcsize(fmt)))
                row[p[2]] = float(val)
            else:
                cfmt = "<" + _SCALAR_FMT[p[1]]
                (n,) = struct.unpack(cfmt, f.read(struct.calcsize(cfmt)))
                ifmt = "<" + _SCALAR_FMT[p[2]] * n
                row[p[3]] = [float(v) for v in struct.unpack(ifmt, f.read(struct.calcsize(ifmt)))]
        rows.append(row)
    return rows


def load_ply(path):
    """Read a PLY file -> (vertices (V,3), normals (V,3) or None, faces (F,3) or None)."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        data = {}
        for name, count, props in elements:
            reader = _read_element_ascii if fmt == "ascii" else _read_element_binary
            data[name] = (reader(f, count, props), props)
    if "vertex" not in data:
        raise PlyError("PLY file has no vertex element")
    vrows, vprops = data["vertex"]
    names = [p[2] for p in vprops if p[0] == "scalar"]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyError(f"vertex element missing property {axis}")
    verts = np.array([[r["x"], r["y"], r["z"]] for r in vrows], dtype=np.float64)
    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        normals = np.array([[r["nx"], r["ny"], r["nz"]] for r in vrows], dtype=np.float64)
    faces = None
    if "face" in data:
        frows, fprops = data["face"]
        key = next(p[3] for p in fprops if p[0] == "list")
        tri = []
        for r in frows:
            idx = [int(v) for v in r[key]]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                tri.append((idx[0], idx[k], idx[k + 1]))
        faces = np.array(tri, dtype=np.intp)
    return verts, normals, faces


def read_mesh(path) -> TriangleMesh:
    verts, _, faces = load_ply(path)
    if faces is None or len(faces) == 0:
        raise PlyError(f"{path}: no faces; expected a triangle mesh")
    return TriangleMesh(verts, faces)


def read_cloud(path) -> PointCloud:
    verts, normals, _ = load_ply(path)
    if normals is None:
        raise PlyError(f"{path}: no per-vertex normals; expected a sampled cloud")
    return PointCloud(verts, normals)


def _fnum(x):
    # shortest exact decimal form, stable across runs
    return repr(float(x))


def write_cloud(path, cloud: PointCloud):
    """Write a sampled cloud as ascii PLY with x y z nx ny nz properties."""
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x", "property double y", "property double z",
        "property double nx", "property double ny", "property double nz",
        "end_header",
    ]
    for p, n in zip(cloud.points, cloud.normals):
        lines.append(" ".join(_fnum(v) for v in (*p, *n)))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_mesh(path, mesh: TriangleMesh):
    """Write a triangle mesh as ascii PLY."""
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x", "property double y", "property double z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(" ".join(_fnum(x) for x in v))
    for f3 in mesh.faces:
        lines.append("3 " + " ".join(str(int(i)) for i in f3))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_mesh_obj(path, meshes):
    """Write one or more meshes into a single OBJ file (one object each)."""
    lines = []
    offset = 1
    for k, mesh in enumerate(meshes):
        lines.append(f"o body_{k}")
        for v in mesh.vertices:
            lines.append("v " + " ".join(_fnum(x) for x in v))
        for f3 in mesh.faces:
            lines.append("f " + " ".join(str(int(i) + offset) for i in f3))
        offset += len(mesh.vertices)
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
