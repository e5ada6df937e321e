"""Toy dataset construction: randomized primitive objects plus reference
grasps found by projected gradient descent on the combined constraint energy.

Candidate poses start from heuristic approach placements (palm facing the
object at a small standoff, fingers half curled), descend the energy in a
batch, and pass through the grasp filter; only accepted poses become records.
"""

from __future__ import annotations

import zlib

import numpy as np

from .constraints import combined_batch
from .evaluation import EvalConfig, filter_grasp
from .geometry import build_index, make_box, make_cylinder_mesh, make_uv_sphere, sample_surface
from .hand import HandPose, fk_batch
from .rng import make_rng

OBJECT_KINDS = ("sphere", "box", "cylinder")


def object_seed(object_id):
    return zlib.crc32(object_id.encode("utf-8"))


def object_cloud(mesh, n_points, object_id):
    """Deterministic surface cloud for an object (seeded by its id)."""
    return sample_surface(mesh, n_points, seed=object_seed(object_id))


def generate_object(index, rng):
    """Randomized primitive mesh #index -> (object_id, mesh, bounding radius)."""
    kind = OBJECT_KINDS[index % len(OBJECT_KINDS)]
    if kind == "sphere":
        r = rng.uniform(0.024, 0.042)
        mesh = make_uv_sphere(r, n_lat=14, n_lon=21)
        radius = r
    elif kind == "box":
        half = rng.uniform(0.018, 0.034, size=3)
        mesh = make_box(half)
        radius = float(np.linalg.norm(half))
    else:
        r = rng.uniform(0.016, 0.028)
        h = rng.uniform(0.05, 0.09)
        mesh = make_cylinder_mesh(r, h, n_seg=18)
        radius = float(np.hypot(r, h / 2))
    return f"{kind}_{index:04d}", mesh, radius


def heuristic_init(model, radius, n, rng):
    """Approach placements: the object center is put into the finger-curl
    pocket (in front of the palm, on the palmar side) at a random hand
    orientation, fingers half curled."""
    poses = np.zeros((n, model.pose_dim))
    k = model.dof
    lo, hi = model.joint_lower, model.joint_upper
    for i in range(n):
        theta = np.clip(rng.normal(scale=0.08, size=k), lo, hi)
        flex = hi > 1.0  # flexion joints have a wide positive range
        theta[flex] = np.clip(rng.uniform(0.3, 0.7, size=flex.sum()), lo[flex], hi[flex])
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        w = rng.normal(size=3)
        x_axis = w - np.dot(w, v) * v
        x_axis /= np.linalg.norm(x_axis)
        z_axis = np.cross(x_axis, v)
        rot = np.stack([x_axis, v, z_axis], axis=1)  # hand +y axis -> v
        # object center target in the hand frame: ahead of the knuckles,
        # below the palmar side, scaled by the object size
        pocket = np.array([0.085 + 0.35 * radius + rng.normal(scale=0.008),
                           -(radius + 0.014 + rng.normal(scale=0.005)),
                           rng.normal(scale=0.008)])
        trans = -rot @ pocket  # object center sits at the world origin
        poses[i, :k] = theta
        poses[i, k:k + 6] = rot[:, :2].T.reshape(-1)
        poses[i, k + 6:] = trans
    return poses


def _descent_preconditioner(model):
    """Per-block diagonal scaling that equalizes the world-space effect of
    unit steps: joint/rotation gradients carry a moment arm, so raw gradient
    descent would move them hundreds of times slower than translation."""
    d = np.ones(model.pose_dim)
    d[:model.dof] = 250.0
    d[model.dof:model.dof + 6] = 30.0
    return d


def descend_energy(model, poses, obj_index, ccfg, iterations, step, clip_norm=5.0,
                   stop_below=None):
    """Batched projected gradient descent on the combined energy.

    Descent runs in a per-block rescaled metric (see _descent_preconditioner);
    joint angles are clamped to limits after each step and the step size
    halves after two thirds of the iterations. With stop_below set, poses
    whose energy has reached that value freeze (used by the pull-out stage,
    whose clearance term is otherwise unbounded below).
    """
    poses = np.array(poses, dtype=np.float64)
    k = model.dof
    pre = _descent_preconditioner(model)
    active = np.ones(len(poses), dtype=bool)
    for it in range(iterations):
        rows = np.nonzero(active)[0]
        if len(rows) == 0:
            break
        values, grads, _ = combined_batch(model, poses[rows], obj_index, ccfg)
        if stop_below is not None:
            done = values <= stop_below
            active[rows[done]] = False
            rows = rows[~done]
            grads = grads[~done]
            if len(rows) == 0:
                break
        grads = grads * pre
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-12))
        eta = step if it < (2 * iterations) // 3 else 0.5 * step
        poses[rows] -= eta * (grads * scale)
        poses[rows, :k] = np.clip(poses[rows, :k], model.joint_lower, model.joint_upper)
    return poses


def generate_grasps(model, obj_index, cloud, radius, ccfg, eval_cfg, rng,
                    n_keep, n_candidates, iterations, step):
    """Energy-descended candidates filtered to accepted grasps (<= n_keep).

    Two descent stages: the configured weights close the hand around the
    object, then a repulsion-only polish backs penetrating poses out until
    they reach slight clearance.
    """
    from dataclasses import replace

    init = heuristic_init(model, radius, n_candidates, rng)
    wrapped = descend_energy(model, init, obj_index, ccfg, iterations, step)
    # repulsion only, stopped at slight clearance (the term is unbounded below)
    polish_cfg = replace(ccfg, weight_spf=0.0, weight_erf=1.0, weight_srf=0.0)
    final = descend_energy(model, wrapped, obj_index, polish_cfg,
                           iterations=max(iterations // 2, 60), step=0.5 * step,
                           stop_below=-3e-4)
    accepted = []
    for vec in final:
        pose = HandPose.from_vector(vec, model.dof)
        ok, report = filter_grasp(pose, model, obj_index, cloud, eval_cfg)
        if ok:
            accepted.append(vec)
            if len(accepted) >= n_keep:
                break
    return accepted
