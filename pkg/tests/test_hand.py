import json

import numpy as np
import pytest

from dgforge.hand import (
    HandModelError,
    HandPose,
    default_hand,
    fk_batch,
    forward_kinematics,
    hand_from_description,
    orthonormalize_rot6d,
)


def rodrigues(axis, theta):
    kx, ky, kz = axis
    K = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]], dtype=float)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def gram_schmidt(r6):
    a1, a2 = r6[:3], r6[3:]
    b1 = a1 / np.linalg.norm(a1)
    u2 = a2 - np.dot(a2, b1) * b1
    b2 = u2 / np.linalg.norm(u2)
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def naive_fk(model, pose):
    # independent per-link chain walk, no batching, no shared code paths
    R, p = {}, {}
    for i, link in enumerate(model.links):
        if link.parent < 0:
            r_par, p_par = np.eye(3), np.zeros(3)
        else:
            r_par, p_par = R[link.parent], p[link.parent]
        r_pre = r_par @ link.origin_rot
        p_pre = r_par @ link.origin_trans + p_par
        if link.axis is None:
            R[i] = r_pre
        else:
            R[i] = r_pre @ rodrigues(link.axis, pose.theta[model.joint_index[i]])
        p[i] = p_pre
    rg = gram_schmidt(pose.rot6d)
    world = np.empty((model.n_points, 3))
    for li, sl in model.point_blocks:
        for k in range(sl.start, sl.stop):
            world[k] = rg @ (R[li] @ model.local_points[k] + p[li]) + pose.trans
    return world


def random_pose(model, rng, scale=1.0):
    theta = rng.uniform(model.joint_lower, model.joint_upper) * scale
    r6 = rng.normal(size=6)
    trans = rng.normal(scale=0.1, size=3)
    return HandPose(theta, r6, trans)


class TestRot6d:
    def test_identity(self):
        R = orthonormalize_rot6d([1, 0, 0, 0, 1, 0])
        assert np.allclose(R, np.eye(3), atol=1e-15)

    def test_scale_invariance(self):
        R = orthonormalize_rot6d([2, 0, 0, 0, 3, 0])
        assert np.allclose(R, np.eye(3), atol=1e-15)

    def test_random_inputs_give_rotations(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            R = orthonormalize_rot6d(rng.normal(size=6))
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError):
            orthonormalize_rot6d([0, 0, 0, 0, 1, 0])
        with pytest.raises(ValueError):
            orthonormalize_rot6d([1, 0, 0, 2, 0, 0])


class TestDefaultHand:
    def test_default_dimensions(self):
        model = default_hand()
        assert model.dof == 24
        assert model.pose_dim == 33

    def test_gripper_override(self):
        model = default_hand({"fingers": 2, "joints_per_finger": 2, "wrist_joints": 0})
        assert model.dof == 4
        assert model.pose_dim == 13

    def test_inner_point_count(self):
        model = default_hand()
        assert int(model.inner_mask.sum()) == 16 * model.num_phalanges

    def test_unknown_config_key_rejected(self):
        with pytest.raises(HandModelError):
            default_hand({"fingrs": 5})

    def test_bad_limits_rejected(self):
        desc = default_hand().description
        bad = json.loads(json.dumps(desc))
        for link in bad["links"]:
            if link["limits"]:
                link["limits"] = [0.5, 0.5]
                break
        with pytest.raises(HandModelError):
            hand_from_description(bad)


class TestForwardKinematics:
    def setup_method(self):
        self.model = default_hand()
        self.rng = np.random.default_rng(42)

    def test_zero_pose_matches_chain_walk(self):
        pose = HandPose.identity(self.model.dof)
        got = forward_kinematics(self.model, pose).world_points
        want = naive_fk(self.model, pose)
        assert np.allclose(got, want, atol=1e-13)

    def test_random_pose_matches_chain_walk(self):
        for _ in range(5):
            pose = random_pose(self.model, self.rng)
            got = forward_kinematics(self.model, pose).world_points
            assert np.allclose(got, naive_fk(self.model, pose), atol=1e-12)

    def test_pure_translation(self):
        pose = random_pose(self.model, self.rng)
        base = forward_kinematics(self.model, pose)
        shifted = HandPose(pose.theta, pose.rot6d, pose.trans + [0.1, 0, 0])
        out = forward_kinematics(self.model, shifted)
        assert np.allclose(out.world_points - base.world_points, [0.1, 0, 0], atol=1e-14)
        jac = forward_kinematics(self.model, pose, with_jacobian=True).point_jacobian
        k = self.model.dof
        assert np.array_equal(jac[:, :, k + 6:], np.tile(np.eye(3), (self.model.n_points, 1, 1)))

    def test_jacobian_matches_finite_differences(self):
        model = self.model
        worst = 0.0
        for _ in range(50):
            pose = random_pose(model, self.rng)
            vec = pose.as_vector()
            jac = fk_batch(model, vec[None], with_jacobian=True).point_jacobian[0]
            eps = 1e-6
            for d in self.rng.choice(model.pose_dim, size=8, replace=False):
                dp = np.zeros(model.pose_dim)
                dp[d] = eps
                fd = (fk_batch(model, (vec + dp)[None]).world_points[0]
                      - fk_batch(model, (vec - dp)[None]).world_points[0]) / (2 * eps)
                rel = np.abs(jac[:, :, d] - fd) / np.maximum(np.abs(fd), 1e-3)
                worst = max(worst, rel.max())
        assert worst < 1e-4

    def test_out_of_chain_columns_are_zero(self):
        model = self.model
        pose = random_pose(model, self.rng)
        jac = forward_kinematics(self.model, pose, with_jacobian=True).point_jacobian
        for li, sl in model.point_blocks:
            on_chain = {model.joint_index[a] for a in model.ancestors[li]}
            for j in range(model.dof):
                if j not in on_chain:
                    assert np.all(jac[sl, :, j] == 0.0)

    def test_rigid_equivariance(self):
        model = self.model
        pose = random_pose(model, self.rng)
        base = forward_kinematics(model, pose)
        r0 = gram_schmidt(self.rng.normal(size=6))
        t0 = self.rng.normal(scale=0.2, size=3)
        rg = gram_schmidt(pose.rot6d)
        composed = HandPose(pose.theta, (r0 @ rg)[:, :2].T.reshape(-1), r0 @ pose.trans + t0)
        out = forward_kinematics(model, composed)
        want = base.world_points @ r0.T + t0
        assert np.allclose(out.world_points, want, atol=1e-12)

    def test_joint_locality(self):
        model = self.model
        pose = random_pose(model, self.rng)
        base = forward_kinematics(model, pose).world_points
        for j in self.rng.choice(model.dof, size=6, replace=False):
            theta = pose.theta.copy()
            theta[j] += 0.2
            moved = forward_kinematics(model, HandPose(theta, pose.rot6d, pose.trans)).world_points
            delta = np.linalg.norm(moved - base, axis=1)
            subtree = {li for li, _ in model.point_blocks
                       if any(model.joint_index[a] == j for a in model.ancestors[li])}
            for li, sl in model.point_blocks:
                if li in subtree:
                    continue
                assert np.all(delta[sl.start:sl.stop] == 0.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            forward_kinematics(self.model, HandPose.identity(7))

    def test_world_cylinders_follow_links(self):
        pose = random_pose(self.model, self.rng)
        fk = forward_kinematics(self.model, pose)
        assert len(fk.world_cylinders) == self.model.num_phalanges
        # each cylinder's endpoints must match the transformed local ones
        want = naive_fk(self.model, pose)
        for ci, li in enumerate(self.model.cylinder_links):
            cyl = fk.world_cylinders[ci]
            length = np.linalg.norm(cyl.axis_end - cyl.axis_start)
            local = self.model.links[li].cylinder
            assert length == pytest.approx(
                np.linalg.norm(local.axis_end - local.axis_start), abs=1e-12)


class TestDescriptionRoundTrip:
    def test_json_round_trip_preserves_fk(self, tmp_path):
        model = default_hand()
        path = tmp_path / "hand.json"
        path.write_text(json.dumps(model.description))
        clone = hand_from_description(str(path))
        pose = random_pose(model, np.random.default_rng(1))
        a = forward_kinematics(model, pose).world_points
        b = forward_kinematics(clone, pose).world_points
        assert np.array_equal(a, b)
