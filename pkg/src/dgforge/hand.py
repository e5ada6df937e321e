"""Simplified multi-finger hand with differentiable forward kinematics.

The pose vector is (theta[K], rot6d[6], trans[3]); K counts actuated joints
(default 24, so the full vector is 33-dimensional). Phalanges and palm are
capped cylinders carrying fixed surface sample grids; the palmar half of each
grid (local -y side) is the "inner" point set used by the pulling energy.

FK internals are batched over poses; the per-pose API wraps batch size 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import CylinderGeom


class HandModelError(ValueError):
    pass


def _unit(v, name="axis"):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise HandModelError(f"{name} must be nonzero")
    return v / n


def _rpy_matrix(rpy):
    """Roll-pitch-yaw (x, y, z intrinsic: Rz @ Ry @ Rx)."""
    r, p, y = [float(a) for a in rpy]
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class HandPose:
    """Grasp parameters: joint angles, 6D rotation encoding, translation."""

    theta: np.ndarray
    rot6d: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64).reshape(6)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)

    @property
    def dim(self):
        return len(self.theta) + 9

    def as_vector(self):
        return np.concatenate([self.theta, self.rot6d, self.trans])

    @classmethod
    def from_vector(cls, vec, dof):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if len(vec) != dof + 9:
            raise ValueError(f"pose vector has length {len(vec)}, expected {dof + 9}")
        return cls(vec[:dof], vec[dof:dof + 6], vec[dof + 6:])

    @classmethod
    def identity(cls, dof):
        return cls(np.zeros(dof), np.array([1.0, 0, 0, 0, 1.0, 0]), np.zeros(3))


def orthonormalize_rot6d(rot6d):
    """Gram-Schmidt two-column rotation recovery: (6,) -> (3, 3) in SO(3)."""
    R, _ = _rot6d_batch(np.asarray(rot6d, dtype=np.float64).reshape(1, 6), with_grad=False)
    return R[0]


def _rot6d_batch(rot6d, with_grad):
    """Batched Gram-Schmidt. Returns (B,3,3) rotations and, when requested,
    their derivatives (B,3,3,6) w.r.t. the six inputs."""
    a1 = rot6d[:, :3]
    a2 = rot6d[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    if np.any(n1 <= 1e-8):
        raise ValueError("rot6d first vector is numerically zero")
    b1 = a1 / n1[:, None]
    c = np.einsum("bi,bi->b", a2, b1)
    u2 = a2 - c[:, None] * b1
    n2 = np.linalg.norm(u2, axis=1)
    if np.any(n2 <= 1e-8):
        raise ValueError("rot6d vectors are numerically colinear")
    b2 = u2 / n2[:, None]
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=2)
    if not with_grad:
        return R, None
    B = len(rot6d)
    eye = np.eye(3)
    P1 = (eye - np.einsum("bi,bj->bij", b1, b1)) / n1[:, None, None]
    # columns 0..2 differentiate w.r.t. a1, columns 3..5 w.r.t. a2
    dB1 = np.zeros((B, 3, 6))
    dB1[:, :, :3] = P1
    dc = np.zeros((B, 6))
    dc[:, :3] = np.einsum("bk,bkj->bj", a2, P1)
    dc[:, 3:] = b1
    dU2 = np.zeros((B, 3, 6))
    dU2[:, :, 3:] = eye
    dU2 -= np.einsum("bj,bi->bij", dc, b1)
    dU2[:, :, :3] -= c[:, None, None] * P1
    P2 = (eye - np.einsum("bi,bj->bij", b2, b2)) / n2[:, None, None]
    dB2 = np.einsum("bik,bkj->bij", P2, dU2)
    dB3 = (np.cross(dB1.transpose(0, 2, 1), b2[:, None, :]).transpose(0, 2, 1)
           + np.cross(b1[:, None, :], dB2.transpose(0, 2, 1)).transpose(0, 2, 1))
    dR = np.stack([dB1, dB2, dB3], axis=2)  # (B, 3, col, 6)
    return R, dR


def _axis_angle_batch(axis, theta):
    """Rodrigues rotation about a fixed unit axis for a batch of angles."""
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    K2 = K @ K
    c = np.cos(theta)[:, None, None]
    s = np.sin(theta)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * K2


@dataclass(frozen=True)
class Link:
    name: str
    parent: int
    origin_rot: np.ndarray    # (3, 3) fixed rotation into the pre-joint frame
    origin_trans: np.ndarray  # (3,)
    axis: np.ndarray | None   # unit joint axis in the pre-joint frame; None = fixed
    limits: tuple | None      # (lo, hi) radians for actuated links
    cylinder: CylinderGeom | None
    inner_points: np.ndarray  # (ni, 3) local, prefix of all_points
    all_points: np.ndarray    # (na, 3) local


class KinematicHandModel:
    """Immutable articulated hand; construct via default_hand or hand_from_description."""

    def __init__(self, links, description=None):
        self.links = list(links)
        self.description = description or {}
        joint_index = []
        lower, upper = [], []
        k = 0
        for i, link in enumerate(self.links):
            if not (-1 <= link.parent < i):
                raise HandModelError(f"link {i} parent {link.parent} breaks topological order")
            if link.axis is not None:
                lo, hi = link.limits
                if not lo < hi:
                    raise HandModelError(f"link {link.name}: joint limits must satisfy lo < hi")
                joint_index.append(k)
                lower.append(lo)
                upper.append(hi)
                k += 1
            else:
                joint_index.append(-1)
            ni, na = len(link.inner_points), len(link.all_points)
            if ni > na or (ni and not np.array_equal(link.all_points[:ni], link.inner_points)):
                raise HandModelError(f"link {link.name}: inner points must prefix all points")
        self.joint_index = joint_index
        self.dof = k
        self.joint_lower = np.array(lower)
        self.joint_upper = np.array(upper)
        # ancestors: actuated link indices on the root path (self included)
        self.ancestors = []
        for i, link in enumerate(self.links):
            chain = []
            j = i
            while j >= 0:
                if self.links[j].axis is not None:
                    chain.append(j)
                j = self.links[j].parent
            self.ancestors.append(chain[::-1])
        # concatenated sample points, inner points first within each link block
        blocks, pts, link_of_point, inner = [], [], [], []
        for i, link in enumerate(self.links):
            if len(link.all_points) == 0:
                continue
            start = sum(len(p) for p in pts)
            pts.append(link.all_points)
            blocks.append((i, slice(start, start + len(link.all_points))))
            link_of_point.extend([i] * len(link.all_points))
            inner.extend([True] * len(link.inner_points)
                         + [False] * (len(link.all_points) - len(link.inner_points)))
        if not pts:
            raise HandModelError("hand model has no surface sample points")
        self.point_blocks = blocks
        self.local_points = np.vstack(pts)
        self.link_of_point = np.array(link_of_point, dtype=np.intp)
        self.inner_mask = np.array(inner, dtype=bool)
        self.cylinder_links = [i for i, l in enumerate(self.links) if l.cylinder is not None]
        self.num_phalanges = len(self.cylinder_links)

    @property
    def pose_dim(self):
        return self.dof + 9

    @property
    def n_points(self):
        return len(self.local_points)

    def clamp_theta(self, theta):
        return np.clip(theta, self.joint_lower, self.joint_upper)

    def split_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        k = self.dof
        return vec[..., :k], vec[..., k:k + 6], vec[..., k + 6:]


@dataclass
class FkResult:
    """World-frame FK output for a single pose."""

    world_points: np.ndarray              # (N, 3)
    world_cylinders: list                 # CylinderGeom per sampled link
    point_jacobian: np.ndarray | None     # (N, 3, K+9) when requested


class BatchFk:
    """FK output for a batch of poses (arrays lead with the batch axis)."""

    def __init__(self, world_points, cyl_starts, cyl_ends, cyl_radii, cyl_links, jac):
        self.world_points = world_points      # (B, N, 3)
        self.cyl_starts = cyl_starts          # (B, C, 3)
        self.cyl_ends = cyl_ends              # (B, C, 3)
        self.cyl_radii = cyl_radii            # (C,)
        self.cyl_links = cyl_links            # (C,) link indices
        self.point_jacobian = jac             # (B, N, 3, K+9) or None


def fk_batch(model: KinematicHandModel, poses, with_jacobian=False) -> BatchFk:
    """Forward kinematics for a (B, K+9) matrix of pose vectors."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim == 1:
        poses = poses[None, :]
    if poses.shape[1] != model.pose_dim:
        raise ValueError(f"pose dimension {poses.shape[1]} != model dimension {model.pose_dim}")
    B = len(poses)
    theta, rot6d, trans = model.split_vector(poses)
    Rg, dRg = _rot6d_batch(rot6d, with_grad=with_jacobian)

    nL = len(model.links)
    R = np.empty((nL, B, 3, 3))
    p = np.empty((nL, B, 3))
    w_axis = np.zeros((nL, B, 3))
    for li, link in enumerate(model.links):
        if link.parent < 0:
            r_pre = np.broadcast_to(link.origin_rot, (B, 3, 3))
            p_pre = np.broadcast_to(link.origin_trans, (B, 3))
        else:
            r_par = R[link.parent]
            r_pre = r_par @ link.origin_rot
            p_pre = np.einsum("bij,j->bi", r_par, link.origin_trans) + p[link.parent]
        p[li] = p_pre
        if link.axis is None:
            R[li] = r_pre
        else:
            R[li] = r_pre @ _axis_angle_batch(link.axis, theta[:, model.joint_index[li]])
            w_axis[li] = np.einsum("bij,j->bi", r_pre, link.axis)

    N = model.n_points
    Y = np.empty((B, N, 3))
    for li, sl in model.point_blocks:
        Y[:, sl] = np.einsum("bij,nj->bni", R[li], model.local_points[sl]) + p[li][:, None, :]
    world = np.einsum("bij,bnj->bni", Rg, Y) + trans[:, None, :]

    C = len(model.cylinder_links)
    cyl_starts = np.empty((B, C, 3))
    cyl_ends = np.empty((B, C, 3))
    cyl_radii = np.empty(C)
    for ci, li in enumerate(model.cylinder_links):
        cyl = model.links[li].cylinder
        s_base = np.einsum("bij,j->bi", R[li], cyl.axis_start) + p[li]
        e_base = np.einsum("bij,j->bi", R[li], cyl.axis_end) + p[li]
        cyl_starts[:, ci] = np.einsum("bij,bj->bi", Rg, s_base) + trans
        cyl_ends[:, ci] = np.einsum("bij,bj->bi", Rg, e_base) + trans
        cyl_radii[ci] = cyl.radius

    jac = None
    if with_jacobian:
        D = model.pose_dim
        K = model.dof
        jac = np.zeros((B, N, 3, D))
        jac_theta = np.zeros((B, N, 3, K))
        for li, sl in model.point_blocks:
            anc = model.ancestors[li]
            if not anc:
                continue
            ji = [model.joint_index[a] for a in anc]
            # all ancestor joints of this link at once: (A, B, n, 3)
            d_base = np.cross(w_axis[anc][:, :, None, :],
                              Y[None, :, sl] - p[anc][:, :, None, :])
            jac_theta[:, sl, :, ji] = d_base.transpose(1, 2, 3, 0)
        jac[:, :, :, :K] = np.matmul(Rg[:, None], jac_theta)
        # d(world)/d(rot6d)[b,n,k,m] = sum_i dRg[b,k,i,m] * Y[b,n,i]
        drg_flat = dRg.transpose(0, 2, 1, 3).reshape(B, 3, 18)
        jac[:, :, :, K:K + 6] = np.matmul(Y, drg_flat).reshape(B, N, 3, 6)
        jac[:, :, :, K + 6:] = np.eye(3)
    return BatchFk(world, cyl_starts, cyl_ends, cyl_radii,
                   np.array(model.cylinder_links, dtype=np.intp), jac)


def forward_kinematics(model: KinematicHandModel, pose: HandPose, with_jacobian=False) -> FkResult:
    """World-space surface points, link cylinders, and (optionally) the analytic
    point Jacobian w.r.t. the pose vector."""
    if len(pose.theta) != model.dof:
        raise ValueError(f"pose has {len(pose.theta)} joints, model has {model.dof}")
    out = fk_batch(model, pose.as_vector()[None, :], with_jacobian=with_jacobian)
    cyls = [CylinderGeom(out.cyl_starts[0, c], out.cyl_ends[0, c], out.cyl_radii[c])
            for c in range(len(out.cyl_radii))]
    jac = out.point_jacobian[0] if with_jacobian else None
    return FkResult(out.world_points[0], cyls, jac)


# ---------------------------------------------------------------------------
# model construction


def _cylinder_samples(length, radius, n_total):
    """Surface sample grid: rings of 8 on the lateral surface plus 4 points on
    each end cap (caps would otherwise be invisible to the penetration
    energies). The local -y half (inner) comes first; it is exactly half."""
    if n_total % 8 != 0 or n_total < 16:
        raise HandModelError("samples per link must be a multiple of 8 and >= 16")
    n_ax = (n_total - 8) // 8
    xs = (np.arange(n_ax) + 0.5) / n_ax * length
    phis = (np.arange(8) + 0.5) / 8 * 2.0 * np.pi
    pts = [(x, radius * np.cos(ph), radius * np.sin(ph)) for x in xs for ph in phis]
    cap_phis = (np.arange(4) + 0.5) / 4 * 2.0 * np.pi
    for x in (0.0, length):
        pts.extend((x, 0.6 * radius * np.cos(ph), 0.6 * radius * np.sin(ph))
                   for ph in cap_phis)
    pts = np.array(pts)
    inner = pts[pts[:, 1] < 0.0]
    outer = pts[pts[:, 1] >= 0.0]
    return inner, np.vstack([inner, outer])


_DEFAULT_CONFIG = {
    "fingers": 5,
    "joints_per_finger": 4,
    "wrist_joints": 4,
    "samples_per_link": 32,
    "palm_length": 0.085,
    "palm_radius": 0.011,   # rod radius; the palm is three touching rods
    "knuckle_offset": 0.012,
    "proximal_length": 0.047,
    "length_decay": 0.68,
    "finger_radius": 0.011,
    "radius_decay": 0.92,
    "thumb_scale": 1.12,
}


def default_hand(spec=None) -> KinematicHandModel:
    """Build the built-in simplified hand; `spec` overrides the parametric config.

    Defaults: 5 fingers x (1 abduction + 3 flexion) + 4 wrist/palm joints = 24 DOF,
    one capped cylinder per palm/phalange link with 32 surface samples (16 inner).
    Fingers point along local +x, the palmar side is local -y; flexion about
    (0, 0, -1) curls toward the palm. finger 0 is the thumb, mounted on the -z
    flank and tilted so its inner surface faces the grasp volume.
    """
    cfg = dict(_DEFAULT_CONFIG)
    if spec:
        unknown = set(spec) - set(cfg)
        if unknown:
            raise HandModelError(f"unknown hand config keys: {sorted(unknown)}")
        cfg.update(spec)
    nf = int(cfg["fingers"])
    jpf = int(cfg["joints_per_finger"])
    wrist = int(cfg["wrist_joints"])
    if nf < 1 or jpf < 1 or wrist < 0:
        raise HandModelError("fingers and joints_per_finger must be >= 1, wrist_joints >= 0")
    n_samp = int(cfg["samples_per_link"])
    links = []

    def add(name, parent, xyz=(0, 0, 0), rpy=(0, 0, 0), axis=None, limits=None,
            cylinder=None):
        links.append({
            "name": name, "parent": parent,
            "origin": {"xyz": list(map(float, xyz)), "rpy": list(map(float, rpy))},
            "axis": None if axis is None else list(map(float, axis)),
            "limits": None if limits is None else [float(limits[0]), float(limits[1])],
            "cylinder": cylinder,
            "samples": n_samp if cylinder is not None else 0,
        })
        return len(links) - 1

    def cyl(length, radius):
        return {"start": [0.0, 0.0, 0.0], "end": [float(length), 0.0, 0.0],
                "radius": float(radius)}

    wrist_axes = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    parent = -1
    for i in range(max(wrist - 1, 0)):
        parent = add(f"wrist_{i}", parent, axis=wrist_axes[i % 3], limits=(-0.4, 0.4))
    palm_axis = (0, 0, 1) if wrist >= 1 else None
    palm_limits = (-0.25, 0.25) if wrist >= 1 else None
    palm_r = cfg["palm_radius"]
    palm = add("palm", parent, axis=palm_axis, limits=palm_limits,
               cylinder=cyl(cfg["palm_length"], palm_r))
    # side rods complete the palm slab (touching, so nothing slips between)
    for side, dz in (("l", 2 * palm_r), ("r", -2 * palm_r)):
        add(f"palm_rod_{side}", palm, xyz=(0.0, 0.0, dz),
            cylinder=cyl(cfg["palm_length"], palm_r))
    palm_halfwidth = 3 * palm_r

    abduction = jpf >= 3
    n_flex = jpf - 1 if abduction else jpf
    spread = 0.85 * palm_halfwidth
    n_main = nf - 1 if nf >= 2 else 1
    z_offsets = [0.0] if n_main == 1 else list(np.linspace(spread, -spread, n_main))
    for f in range(nf):
        thumb = nf >= 2 and f == 0
        scale = cfg["thumb_scale"] if thumb else 1.0
        if thumb:
            base_xyz = (0.30 * cfg["palm_length"], -0.2 * palm_r,
                        -(palm_halfwidth + 0.008))
            base_rpy = (-np.pi / 4, 0.0, 0.0)  # palmar side tilted toward the grasp volume
        else:
            base_xyz = (cfg["palm_length"], 0.0, z_offsets[f - 1 if nf >= 2 else 0])
            base_rpy = (0.0, 0.0, 0.0)
        name = "thumb" if thumb else f"finger{f}"
        parent_idx = palm
        if abduction:
            parent_idx = add(f"{name}_knuckle", parent_idx, xyz=base_xyz, rpy=base_rpy,
                             axis=(0, 1, 0),
                             limits=(-0.6, 0.6) if thumb else (-0.3, 0.3))
            child_xyz = (cfg["knuckle_offset"] * scale, 0.0, 0.0)
            child_rpy = (0, 0, 0)
        else:
            child_xyz, child_rpy = base_xyz, base_rpy
        length = cfg["proximal_length"] * scale
        radius = cfg["finger_radius"] * scale
        for s in range(n_flex):
            parent_idx = add(f"{name}_phal{s}", parent_idx, xyz=child_xyz, rpy=child_rpy,
                             axis=(0, 0, -1), limits=(-0.15, 1.7),
                             cylinder=cyl(length, radius))
            child_xyz = (length, 0.0, 0.0)
            child_rpy = (0, 0, 0)
            length *= cfg["length_decay"]
            radius *= cfg["radius_decay"]

    description = {"name": "dgforge-default", "config": cfg, "links": links}
    return hand_from_description(description)


def hand_from_description(desc) -> KinematicHandModel:
    """Build a model from the JSON kinematic description (see README schema)."""
    if isinstance(desc, str):
        with open(desc) as f:
            desc = json.load(f)
    try:
        raw_links = desc["links"]
    except (TypeError, KeyError):
        raise HandModelError("hand description must contain a 'links' list")
    links = []
    for i, rl in enumerate(raw_links):
        origin = rl.get("origin", {})
        rot = _rpy_matrix(origin.get("rpy", (0, 0, 0)))
        tr = np.asarray(origin.get("xyz", (0, 0, 0)), dtype=np.float64).reshape(3)
        axis = rl.get("axis")
        limits = rl.get("limits")
        if axis is not None:
            axis = _unit(axis, f"link {i} axis")
            if limits is None:
                raise HandModelError(f"link {i}: actuated joint needs limits")
            limits = (float(limits[0]), float(limits[1]))
        cyl_desc = rl.get("cylinder")
        cylinder = None
        inner = np.zeros((0, 3))
        allp = np.zeros((0, 3))
        if cyl_desc is not None:
            start = np.asarray(cyl_desc["start"], dtype=np.float64)
            end = np.asarray(cyl_desc["end"], dtype=np.float64)
            cylinder = CylinderGeom(start, end, float(cyl_desc["radius"]))
            n_samp = int(rl.get("samples", 32))
            if n_samp:
                length = float(np.linalg.norm(end - start))
                inner, allp = _cylinder_samples(length, cylinder.radius, n_samp)
                # samples are generated in the cylinder's canonical +x frame;
                # the description requires start at the origin and end on +x
                if not (np.allclose(start, 0.0) and np.allclose(end[1:], 0.0) and end[0] > 0):
                    raise HandModelError(
                        f"link {i}: sampled cylinders must run from the origin along +x")
        links.append(Link(
            name=str(rl.get("name", f"link_{i}")), parent=int(rl.get("parent", -1)),
            origin_rot=rot, origin_trans=tr, axis=axis, limits=limits,
            cylinder=cylinder, inner_points=inner, all_points=allp))
    return KinematicHandModel(links, description=desc)
