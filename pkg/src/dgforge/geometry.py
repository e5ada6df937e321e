"""Point-cloud containers, exact nearest-neighbor queries, and signed-distance primitives.

Distances are in meters throughout. All containers are immutable after
construction and safe to share across threads; queries are read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Relative gap below which two nearest-neighbor candidates are re-checked
# with plain linear-scan arithmetic (lowest-index tie break).
_TIE_RTOL = 1e-12


def _as_points(a, name="points"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Surface points with unit outward normals.

    points  : (N, 3) float64, meters
    normals : (N, 3) float64, unit length within 1e-6
    """

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        nrm = _as_points(self.normals, "normals")
        if len(pts) == 0:
            raise ValueError("point cloud must be non-empty")
        if len(nrm) != len(pts):
            raise ValueError("points and normals must have the same length")
        lens = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-6):
            raise ValueError("normals must be unit length within 1e-6")
        pts.setflags(write=False)
        nrm.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    def subsample(self, n, seed):
        """Deterministic random subsample without replacement (n capped at len)."""
        n = min(int(n), len(self))
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return PointCloud(self.points[idx].copy(), self.normals[idx].copy())


class SpatialIndex:
    """Exact nearest-neighbor index over a PointCloud.

    Query results are identical to an exhaustive linear scan; equidistant
    candidates resolve to the lowest point index.
    """

    def __init__(self, cloud: PointCloud):
        if not isinstance(cloud, PointCloud):
            raise TypeError("SpatialIndex requires a PointCloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def nearest(self, query):
        """Nearest neighbor of a single 3-vector -> (index, distance)."""
        q = np.asarray(query, dtype=np.float64).reshape(1, 3)
        idx, dist = self.nearest_batch(q)
        return int(idx[0]), float(dist[0])

    def nearest_batch(self, queries):
        """Vectorized nearest neighbors: (M, 3) -> ((M,) indices, (M,) distances)."""
        queries = _as_points(queries, "queries")
        pts = self.cloud.points
        if len(pts) == 1:
            d = np.linalg.norm(queries - pts[0], axis=1)
            return np.zeros(len(queries), dtype=np.intp), d
        dists, idxs = self._tree.query(queries, k=2)
        best = idxs[:, 0].astype(np.intp)
        # near-ties may be resolved differently by the tree than by a linear
        # scan; re-check those rows with plain numpy arithmetic
        risky = np.nonzero(dists[:, 1] - dists[:, 0]
                           <= _TIE_RTOL * np.maximum(1.0, dists[:, 0]))[0]
        for row in risky:
            r = dists[row, 0] * (1.0 + 1e-9) + 1e-12
            cand = sorted(self._tree.query_ball_point(queries[row], r))
            cd = np.linalg.norm(pts[cand] - queries[row], axis=1)
            best[row] = cand[int(np.argmin(cd))]
        bestd = np.linalg.norm(queries - pts[best], axis=1)
        return best, bestd


def build_index(cloud: PointCloud) -> SpatialIndex:
    """Build an exact nearest-neighbor index over a non-empty cloud."""
    return SpatialIndex(cloud)


def nearest(index: SpatialIndex, query):
    return index.nearest(query)


def signed_distances_to_cloud(hand_points, index: SpatialIndex):
    """Signs and distances of points relative to the indexed surface.

    For each point p with nearest object point o and normal n, the sign is
    sign((o - p) . n) with sign(0) := +1, so +1 means p lies on the inner
    side of the local tangent plane (penetrating) and -1 means outside.

    Returns ((M,) signs in {-1, +1}, (M,) distances).
    """
    hand_points = _as_points(hand_points, "hand_points")
    idx, dist = index.nearest_batch(hand_points)
    diff = index.cloud.points[idx] - hand_points
    dots = np.einsum("ij,ij->i", diff, index.cloud.normals[idx])
    signs = np.where(dots >= 0.0, 1.0, -1.0)
    return signs, dist


def signed_distance_to_cloud(hand_point, index: SpatialIndex):
    """Single-point version of signed_distances_to_cloud -> (sign, distance)."""
    s, d = signed_distances_to_cloud(np.asarray(hand_point, dtype=np.float64).reshape(1, 3), index)
    return int(s[0]), float(d[0])


@dataclass(frozen=True)
class CylinderGeom:
    """A capped cylinder given by its axis segment and radius (meters)."""

    axis_start: np.ndarray
    axis_end: np.ndarray
    radius: float

    def __post_init__(self):
        a = np.asarray(self.axis_start, dtype=np.float64).reshape(3)
        b = np.asarray(self.axis_end, dtype=np.float64).reshape(3)
        r = float(self.radius)
        if r <= 0.0:
            raise ValueError("cylinder radius must be > 0")
        if np.allclose(a, b):
            raise ValueError("cylinder axis endpoints must differ")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "axis_start", a)
        object.__setattr__(self, "axis_end", b)
        object.__setattr__(self, "radius", r)

    def transformed(self, rot, trans):
        """Cylinder mapped by x -> rot @ x + trans."""
        rot = np.asarray(rot, dtype=np.float64)
        trans = np.asarray(trans, dtype=np.float64).reshape(3)
        return CylinderGeom(rot @ self.axis_start + trans, rot @ self.axis_end + trans, self.radius)


def signed_distances_to_cylinder(points, cyl: CylinderGeom):
    """Exact signed distance from each point to the capped cylinder surface.

    Negative strictly inside, zero on the surface, positive outside.
    """
    points = _as_points(points)
    u = cyl.axis_end - cyl.axis_start
    h = np.linalg.norm(u)
    u = u / h
    q = points - cyl.axis_start
    z = q @ u
    radial = q - z[:, None] * u
    rho = np.linalg.norm(radial, axis=1)
    a = np.abs(z - 0.5 * h) - 0.5 * h  # axial overshoot, negative inside the slab
    b = rho - cyl.radius               # radial overshoot, negative inside the tube
    inside = np.minimum(np.maximum(a, b), 0.0)
    outside = np.hypot(np.maximum(a, 0.0), np.maximum(b, 0.0))
    return inside + outside


def signed_distance_to_cylinder(point, cyl: CylinderGeom) -> float:
    return float(signed_distances_to_cylinder(np.asarray(point, dtype=np.float64).reshape(1, 3), cyl)[0])


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle set: vertices (V, 3) float64, faces (F, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        f = np.asarray(self.faces, dtype=np.intp)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (F, 3), got {f.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def face_areas(self):
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def face_normals(self):
        v = self.vertices
        e1 = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        e2 = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        n = np.cross(e1, e2)
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0.0] = 1.0
        return n / lens[:, None]


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-uniform surface sampling with face normals attached.

    Deterministic for a fixed seed (counter-based Philox stream keyed by it).
    Raises on meshes with zero total area.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    probs = areas / total
    face_idx = rng.choice(len(areas), size=n, p=probs)
    v = mesh.vertices
    tri = mesh.faces[face_idx]
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    pts = (v[tri[:, 0]] * (1.0 - u - w)[:, None]
           + v[tri[:, 1]] * u[:, None]
           + v[tri[:, 2]] * w[:, None])
    normals = mesh.face_normals()[face_idx]
    return PointCloud(pts, normals)


# ---------------------------------------------------------------------------
# primitive meshes for the toy object set


def make_box(half_extents) -> TriangleMesh:
    hx, hy, hz = [float(x) for x in np.asarray(half_extents).reshape(3)]
    s = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    verts = s * np.array([hx, hy, hz])
    # two triangles per face, outward winding
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    mesh = TriangleMesh(verts, np.array(faces))
    return _ensure_outward(mesh)


def make_uv_sphere(radius, n_lat=12, n_lon=18) -> TriangleMesh:
    radius = float(radius)
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            verts.append((radius * np.sin(theta) * np.cos(phi),
                          radius * np.sin(theta) * np.sin(phi),
                          radius * np.cos(theta)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    mesh = TriangleMesh(np.array(verts), np.array(faces))
    return _ensure_outward(mesh)


def make_cylinder_mesh(radius, height, n_seg=20, axis_start=None, axis_end=None) -> TriangleMesh:
    """Closed cylinder mesh, axis along +z centered at the origin by default.

    If axis_start/axis_end are given the mesh is rigidly mapped onto that segment.
    """
    radius, height = float(radius), float(height)
    phis = 2.0 * np.pi * np.arange(n_seg) / n_seg
    bottom = np.stack([radius * np.cos(phis), radius * np.sin(phis), np.full(n_seg, -height / 2)], axis=1)
    top = bottom + np.array([0.0, 0.0, height])
    verts = np.vstack([bottom, top, [[0.0, 0.0, -height / 2]], [[0.0, 0.0, height / 2]]])
    cb, ct = 2 * n_seg, 2 * n_seg + 1
    faces = []
    for j in range(n_seg):
        k = (j + 1) % n_seg
        faces.append((j, k, n_seg + j))
        faces.append((k, n_seg + k, n_seg + j))
        faces.append((cb, k, j))
        faces.append((ct, n_seg + j, n_seg + k))
    mesh = TriangleMesh(verts, np.array(faces))
    mesh = _ensure_outward(mesh)
    if axis_start is not None:
        a = np.asarray(axis_start, dtype=np.float64)
        b = np.asarray(axis_end, dtype=np.float64)
        mesh = TriangleMesh(_frame_points(mesh.vertices, a, b, height), mesh.faces)
    return mesh


def _frame_points(pts, a, b, height):
    """Map points from the canonical z-axis frame onto the segment a->b."""
    w = b - a
    w = w / np.linalg.norm(w)
    ref = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(ref, w)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    rot = np.stack([u, v, w], axis=1)
    center = 0.5 * (a + b)
    return pts @ rot.T + center


def _ensure_outward(mesh: TriangleMesh) -> TriangleMesh:
    """Flip faces whose normal points toward the centroid (convex primitives only)."""
    centroid = mesh.vertices.mean(axis=0)
    normals = mesh.face_normals()
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    flip = np.einsum("ij,ij->i", normals, centers - centroid) < 0.0
    faces = mesh.faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, faces)
