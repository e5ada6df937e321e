"""Grasp quality metrics and the dataset filter.

Two penetration measures (hand points into the object surface; object points
into the hand's link cylinders), a quasi-static force-resistance success
proxy (linearized friction cones, force balance only, solved as a small
linear feasibility program), pose diversity, and the accept/reject rule:
stable in all six axis-aligned directions, hand-object penetration below
10 mm, object-hand penetration below 1 mm.

The force proxy deliberately omits torque balance (an optional wrench mode
adds it); absolute success numbers are not comparable to a full physics
simulation, only orderings are.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .geometry import CylinderGeom, PointCloud, SpatialIndex, signed_distances_to_cylinder
from .hand import HandPose, KinematicHandModel, fk_batch

AXIS_DIRECTIONS = np.array([
    [1.0, 0, 0], [-1.0, 0, 0],
    [0, 1.0, 0], [0, -1.0, 0],
    [0, 0, 1.0], [0, 0, -1.0],
])


class EvalError(RuntimeError):
    """Solver failure (distinct from a clean infeasible verdict)."""


@dataclass
class EvalConfig:
    contact_epsilon: float = 0.005   # meters
    friction_mu: float = 0.5
    cone_edges: int = 8
    max_contacts_per_link: int = 8
    pen_nn_limit_mm: float = 10.0
    pen_cyl_limit_mm: float = 1.0
    wrench: bool = False             # add 6-D wrench equality (stricter closure)


@dataclass
class ContactSet:
    points: np.ndarray        # (C, 3) world
    normals: np.ndarray       # (C, 3) object surface normals at the contacts
    link_ids: np.ndarray      # (C,)
    friction_mu: float = 0.5
    contact_epsilon: float = 0.005

    def __len__(self):
        return len(self.points)


@dataclass
class EvalReport:
    pen_mm: float
    pen_cyl_mm: float
    suc6: bool
    suc1: bool
    accepted: bool
    div: float | None = None  # filled on aggregate reports only

    def __post_init__(self):
        if self.suc6 and not self.suc1:
            raise ValueError("suc6 implies suc1")


def _fk_points(model, pose):
    if isinstance(pose, HandPose):
        vec = pose.as_vector()
    else:
        vec = np.asarray(pose, dtype=np.float64)
    return fk_batch(model, vec[None])


def penetration_nn(pose, model, obj_index: SpatialIndex) -> float:
    """Deepest hand point inside the object, in millimeters (0 if clear)."""
    fk = _fk_points(model, pose)
    return _penetration_nn_from_fk(fk.world_points[0], obj_index)


def _penetration_nn_from_fk(points, obj_index):
    idx, dist = obj_index.nearest_batch(points)
    dots = np.einsum("ij,ij->i", obj_index.cloud.points[idx] - points,
                     obj_index.cloud.normals[idx])
    signed = np.where(dots >= 0.0, 1.0, -1.0) * dist
    return float(max(signed.max(), 0.0) * 1000.0)


def penetration_cylinder(pose, model, obj_cloud: PointCloud) -> float:
    """Deepest object point inside any link cylinder, in millimeters."""
    fk = _fk_points(model, pose)
    depth = 0.0
    for c in range(len(fk.cyl_radii)):
        cyl = CylinderGeom(fk.cyl_starts[0, c], fk.cyl_ends[0, c], fk.cyl_radii[c])
        sdf = signed_distances_to_cylinder(obj_cloud.points, cyl)
        depth = max(depth, float(-sdf.min()))
    return max(depth, 0.0) * 1000.0


def _farthest_point_subset(points, k):
    """Deterministic farthest-point selection, seeded at the lowest index."""
    n = len(points)
    if n <= k:
        return list(range(n))
    chosen = [0]
    dmin = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dmin))  # ties resolve to the lowest index
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(points - points[nxt], axis=1))
    return sorted(chosen)


def extract_contacts(pose, model, obj_index: SpatialIndex, contact_epsilon,
                     friction_mu=0.5, max_per_link=8) -> ContactSet:
    """Hand surface points within contact_epsilon of the object surface,
    paired with the nearest object point's normal, deduplicated per link by
    farthest-point selection."""
    fk = _fk_points(model, pose)
    pts = fk.world_points[0]
    idx, dist = obj_index.nearest_batch(pts)
    touching = dist <= contact_epsilon
    sel_pts, sel_nrm, sel_link = [], [], []
    for li in np.unique(model.link_of_point[touching]):
        rows = np.nonzero(touching & (model.link_of_point == li))[0]
        keep = _farthest_point_subset(pts[rows], max_per_link)
        for k in keep:
            r = rows[k]
            sel_pts.append(pts[r])
            sel_nrm.append(obj_index.cloud.normals[idx[r]])
            sel_link.append(li)
    if not sel_pts:
        return ContactSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.intp),
                          friction_mu, contact_epsilon)
    return ContactSet(np.array(sel_pts), np.array(sel_nrm),
                      np.array(sel_link, dtype=np.intp), friction_mu, contact_epsilon)


def cone_edges(normal, mu, k=8):
    """Linearized friction cone: k edges n + mu*(cos a_i u + sin a_i v).

    The tangent basis is built from the axis with the smallest |component|
    (lowest index on ties), which makes the edge set equivariant under
    axis-permuting rotations.
    """
    n = np.asarray(normal, dtype=np.float64)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(n)))] = 1.0
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ang = 2.0 * np.pi * np.arange(k) / k
    return n[None, :] + mu * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)


def contact_edge_matrix(contacts: ContactSet, k=8, wrench=False):
    """Stack all contact cone edges into the LP matrix (3 or 6 rows)."""
    cols = []
    center = contacts.points.mean(axis=0) if len(contacts) else np.zeros(3)
    for i in range(len(contacts)):
        edges = cone_edges(contacts.normals[i], contacts.friction_mu, k)
        if wrench:
            arm = contacts.points[i] - center
            tor = np.cross(np.broadcast_to(arm, edges.shape), edges)
            edges = np.concatenate([edges, tor], axis=1)
        cols.append(edges)
    if not cols:
        return np.zeros((6 if wrench else 3, 0))
    return np.concatenate(cols, axis=0).T


def resists_force(contacts: ContactSet, direction, k_edges=8, wrench=False) -> bool:
    """Can non-negative cone-edge forces sum to the opposite of a unit
    external force? Torque balance is included only in wrench mode."""
    if len(contacts) == 0:
        return False
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    A = contact_edge_matrix(contacts, k_edges, wrench)
    b = -direction
    if wrench:
        b = np.concatenate([b, np.zeros(3)])
    m = A.shape[1]
    res = linprog(np.ones(m), A_eq=A, b_eq=b, bounds=[(0, None)] * m, method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    raise EvalError(f"LP solver failed with status {res.status}: {res.message}")


def success_labels(pose, model, obj_index, cfg: EvalConfig = None):
    """Resistance against the six axis-aligned unit forces -> (suc6, suc1)."""
    cfg = cfg or EvalConfig()
    contacts = extract_contacts(pose, model, obj_index, cfg.contact_epsilon,
                                cfg.friction_mu, cfg.max_contacts_per_link)
    return _labels_from_contacts(contacts, cfg)


def _labels_from_contacts(contacts, cfg):
    if len(contacts) == 0:
        return False, False
    results = [resists_force(contacts, d, cfg.cone_edges, cfg.wrench)
               for d in AXIS_DIRECTIONS]
    return all(results), any(results)


def diversity(poses, successes) -> float:
    """Mean per-dimension population standard deviation over successful poses."""
    mat = np.array([p.as_vector() if isinstance(p, HandPose) else np.asarray(p)
                    for p in poses])
    successes = np.asarray(successes, dtype=bool)
    ok = mat[successes] if len(mat) else mat
    if len(ok) < 2:
        warnings.warn("diversity undefined for fewer than 2 successful poses; returning 0")
        return 0.0
    # canonical row order makes the reduction exactly permutation invariant
    ok = ok[np.lexsort(ok.T[::-1])]
    return float(ok.std(axis=0).mean())


def filter_grasp(pose, model, obj_index, obj_cloud, cfg: EvalConfig = None):
    """Accept iff stable in all six directions AND hand-object penetration
    below the 10 mm limit AND object-hand penetration below the 1 mm limit."""
    cfg = cfg or EvalConfig()
    fk = _fk_points(model, pose)
    pen = _penetration_nn_from_fk(fk.world_points[0], obj_index)
    pen_cyl = penetration_cylinder(pose, model, obj_cloud)
    suc6, suc1 = success_labels(pose, model, obj_index, cfg)
    accepted = bool(suc6 and pen < cfg.pen_nn_limit_mm and pen_cyl < cfg.pen_cyl_limit_mm)
    return accepted, EvalReport(pen, pen_cyl, suc6, suc1, accepted)


def rejection_reasons(report: EvalReport, cfg: EvalConfig = None):
    """Reason codes for a rejected report: subset of {PEN_NN, PEN_CYL, NOT_STABLE}."""
    cfg = cfg or EvalConfig()
    reasons = []
    if report.pen_mm >= cfg.pen_nn_limit_mm:
        reasons.append("PEN_NN")
    if report.pen_cyl_mm >= cfg.pen_cyl_limit_mm:
        reasons.append("PEN_CYL")
    if not report.suc6:
        reasons.append("NOT_STABLE")
    return reasons
