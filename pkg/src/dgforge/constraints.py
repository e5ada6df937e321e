"""Constraint energies over grasp poses and their analytic pose gradients.

Three per-grasp terms:
  * surface pulling: mean distance of near-object inner finger points,
    drawing them onto the object surface;
  * external penetration: deepest signed hand-into-object distance
    (negative values mean clearance);
  * self penetration: hinge penalty on cross-link hand point pairs closer
    than a minimum separation.

Gradients treat the discrete structure (nearest-neighbor assignments, active
sets, arg-max) as locally constant, i.e. piecewise-smooth subgradients.
Batch-of-poses entry points carry the real work; the per-pose functions wrap
batch size 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.spatial import cKDTree

from .geometry import SpatialIndex
from .hand import KinematicHandModel, fk_batch


@dataclass
class ConstraintConfig:
    spf_threshold: float = 0.02   # meters; pulling activates inside this range
    srf_threshold: float = 0.01   # meters; minimum cross-link separation
    eta: float = 1e-8             # stabilizer in the pulling denominator
    weight_spf: float = 1.0
    weight_erf: float = 1.0
    weight_srf: float = 0.5
    spf_fingertips_only: bool = False

    def __post_init__(self):
        if self.spf_threshold <= 0 or self.srf_threshold <= 0 or self.eta <= 0:
            raise ValueError("thresholds and eta must be > 0")
        if min(self.weight_spf, self.weight_erf, self.weight_srf) < 0:
            raise ValueError("constraint weights must be >= 0")

    @property
    def weights(self):
        return {"spf": self.weight_spf, "erf": self.weight_erf, "srf": self.weight_srf}


@dataclass
class ConstraintEval:
    value: float
    grad_pose: np.ndarray

    def __post_init__(self):
        self.grad_pose = np.asarray(self.grad_pose, dtype=np.float64)
        if not np.isfinite(self.value) or not np.all(np.isfinite(self.grad_pose)):
            raise ValueError("constraint evaluation produced non-finite values")


def _spf_mask(model: KinematicHandModel, cfg: ConstraintConfig):
    if not cfg.spf_fingertips_only:
        return model.inner_mask
    leaves = set(model.cylinder_links)
    for li in model.cylinder_links:
        j = model.links[li].parent
        while j >= 0:
            leaves.discard(j)
            j = model.links[j].parent
    return model.inner_mask & np.isin(model.link_of_point, sorted(leaves))




def spf_batch(model, fk, obj_index: SpatialIndex, cfg: ConstraintConfig, point_mask=None):
    """Surface pulling energy for pre-computed FK. Returns ((B,), (B,D) or None)."""
    if point_mask is None:
        point_mask = _spf_mask(model, cfg)
    pts = fk.world_points[:, point_mask]          # (B, M, 3)
    B, M, _ = pts.shape
    idx, dist = obj_index.nearest_batch(pts.reshape(-1, 3))
    dist = dist.reshape(B, M)
    sq = dist * dist
    active = sq < cfg.spf_threshold ** 2
    denom = active.sum(axis=1) + cfg.eta
    values = (dist * active).sum(axis=1) / denom
    if fk.point_jacobian is None:
        return values, None
    nn = obj_index.cloud.points[idx].reshape(B, M, 3)
    safe = active & (dist > 0.0)
    unit = np.zeros_like(pts)
    np.divide(pts - nn, dist[:, :, None], out=unit, where=safe[:, :, None])
    g_pts = unit / denom[:, None, None]
    jac = fk.point_jacobian[:, point_mask]        # (B, M, 3, D)
    grads = np.einsum("bmi,bmid->bd", g_pts, jac)
    return values, grads


def erf_batch(model, fk, obj_index: SpatialIndex):
    """Deepest signed penetration for pre-computed FK. Returns ((B,), (B,D) or None)."""
    pts = fk.world_points                          # (B, N, 3)
    B, N, _ = pts.shape
    flat = pts.reshape(-1, 3)
    idx, dist = obj_index.nearest_batch(flat)
    nn = obj_index.cloud.points[idx]
    dots = np.einsum("ij,ij->i", nn - flat, obj_index.cloud.normals[idx])
    signs = np.where(dots >= 0.0, 1.0, -1.0)
    prod = (signs * dist).reshape(B, N)
    k = np.argmax(prod, axis=1)                    # first max = lowest index on ties
    rows = np.arange(B)
    values = prod[rows, k]
    if fk.point_jacobian is None:
        return values, None
    p_star = pts[rows, k]
    nn_star = nn.reshape(B, N, 3)[rows, k]
    d_star = dist.reshape(B, N)[rows, k]
    s_star = signs.reshape(B, N)[rows, k]
    g_pt = np.zeros((B, 3))
    ok = d_star > 0.0
    g_pt[ok] = s_star[ok, None] * (p_star[ok] - nn_star[ok]) / d_star[ok, None]
    jac_star = fk.point_jacobian[rows, k]          # (B, 3, D)
    grads = np.einsum("bi,bid->bd", g_pt, jac_star)
    return values, grads


def srf_batch(model, fk, cfg: ConstraintConfig):
    """Self-penetration hinge energy for pre-computed FK. Returns ((B,), (B,D) or None).

    Candidate pairs come from a per-pose radius query, so cost scales with the
    number of near pairs rather than all N^2 point pairs.
    """
    pts = fk.world_points
    B, N, _ = pts.shape
    lop = model.link_of_point
    thr = cfg.srf_threshold
    want_grad = fk.point_jacobian is not None
    values = np.zeros(B)
    grads = np.zeros((B, model.pose_dim)) if want_grad else None
    for b in range(B):
        p = pts[b]
        pairs = cKDTree(p).query_pairs(thr, output_type="ndarray")
        if len(pairs) == 0:
            continue
        i, j = pairs[:, 0], pairs[:, 1]
        keep = lop[i] != lop[j]
        i, j = i[keep], j[keep]
        if len(i) == 0:
            continue
        diff = p[i] - p[j]
        d = np.linalg.norm(diff, axis=1)
        active = d < thr
        i, j, diff, d = i[active], j[active], diff[active], d[active]
        if len(i) == 0:
            continue
        values[b] = np.sum(thr - d)
        if not want_grad:
            continue
        # pairs at exactly zero distance get a zero subgradient
        ok = d > 0.0
        unit = np.zeros_like(diff)
        unit[ok] = diff[ok] / d[ok, None]
        g_pts = np.zeros((N, 3))
        np.add.at(g_pts, i, -unit)
        np.add.at(g_pts, j, unit)
        grads[b] = np.einsum("mi,mid->d", g_pts, fk.point_jacobian[b])
    return values, grads


def evaluate_constraints_batch(model, poses, obj_index, cfg: ConstraintConfig,
                               with_grad=True, terms=("spf", "erf", "srf"), fk=None):
    """Evaluate the requested energies for a (B, K+9) pose matrix.

    Returns {term: (values (B,), grads (B, K+9) or None)}.
    """
    if fk is None:
        fk = fk_batch(model, poses, with_jacobian=with_grad)
    out = {}
    if "spf" in terms:
        out["spf"] = spf_batch(model, fk, obj_index, cfg)
    if "erf" in terms:
        out["erf"] = erf_batch(model, fk, obj_index)
    if "srf" in terms:
        out["srf"] = srf_batch(model, fk, cfg)
    return out


def combined_batch(model, poses, obj_index, cfg: ConstraintConfig, with_grad=True):
    """Weighted sum of the active (nonzero-weight) energies.

    Returns (values (B,), grads (B, K+9) or None, per-term raw values dict).
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim == 1:
        poses = poses[None, :]
    B = len(poses)
    weights = cfg.weights
    active = tuple(t for t in ("spf", "erf", "srf") if weights[t] > 0.0)
    values = np.zeros(B)
    grads = np.zeros((B, model.pose_dim)) if with_grad else None
    raw = {t: np.zeros(B) for t in ("spf", "erf", "srf")}
    if active:
        evals = evaluate_constraints_batch(model, poses, obj_index, cfg,
                                           with_grad=with_grad, terms=active)
        for t in active:
            v, g = evals[t]
            raw[t] = v
            values += weights[t] * v
            if with_grad:
                grads += weights[t] * g
    return values, grads, raw


def _single(model, poses, values, grads):
    return ConstraintEval(float(values[0]),
                          grads[0] if grads is not None else np.zeros(model.pose_dim))


def surface_pulling_force(pose, model, obj_index, cfg) -> ConstraintEval:
    """Pulling energy of a single pose: sum of in-threshold inner-point
    distances over (count + eta)."""
    fk = fk_batch(model, pose.as_vector()[None], with_jacobian=True)
    v, g = spf_batch(model, fk, obj_index, cfg)
    return _single(model, None, v, g)


def external_penetration_force(pose, model, obj_index) -> ConstraintEval:
    """Deepest signed hand-into-object distance of a single pose
    (negative = clearance)."""
    fk = fk_batch(model, pose.as_vector()[None], with_jacobian=True)
    v, g = erf_batch(model, fk, obj_index)
    return _single(model, None, v, g)


def self_penetration_force(pose, model, cfg) -> ConstraintEval:
    """Hinge penalty over cross-link point pairs closer than the threshold."""
    fk = fk_batch(model, pose.as_vector()[None], with_jacobian=True)
    v, g = srf_batch(model, fk, cfg)
    return _single(model, None, v, g)


def combined_constraint(pose, model, obj_index, cfg) -> ConstraintEval:
    """Weighted combination of the three energies for a single pose."""
    v, g, _ = combined_batch(model, pose.as_vector()[None], obj_index, cfg, with_grad=True)
    return _single(model, None, v, g)
