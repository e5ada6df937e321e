import itertools

import numpy as np
import pytest
from scipy.optimize import nnls

from dgforge.evaluation import (
    AXIS_DIRECTIONS,
    ContactSet,
    EvalConfig,
    EvalReport,
    contact_edge_matrix,
    diversity,
    extract_contacts,
    filter_grasp,
    penetration_cylinder,
    penetration_nn,
    rejection_reasons,
    resists_force,
    success_labels,
)
from dgforge.geometry import (
    CylinderGeom,
    PointCloud,
    build_index,
    make_box,
    make_uv_sphere,
    sample_surface,
)
from dgforge.hand import HandPose, KinematicHandModel, Link, default_hand, forward_kinematics


def cone_contains_bruteforce(edges, b, tol=1e-9):
    """Conic membership by exhaustive Caratheodory subsets (<= 3 generators)."""
    bn = np.linalg.norm(b)
    if bn < tol:
        return True
    m = len(edges)
    for i in range(m):
        e = edges[i]
        lam = np.dot(e, b) / np.dot(e, e)
        if lam >= -tol and np.linalg.norm(lam * e - b) <= tol * bn:
            return True
    for i, j in itertools.combinations(range(m), 2):
        A = np.stack([edges[i], edges[j]], axis=1)
        lam = np.linalg.lstsq(A, b, rcond=None)[0]
        if np.all(lam >= -tol) and np.linalg.norm(A @ lam - b) <= tol * bn:
            return True
    for i, j, k in itertools.combinations(range(m), 3):
        A = np.stack([edges[i], edges[j], edges[k]], axis=1)
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        lam = np.linalg.solve(A, b)
        if np.all(lam >= -tol):
            return True
    return False


def grid_cloud(z, normal, xs, ys):
    pts = np.array([[x, y, z] for x in xs for y in ys])
    nrm = np.tile(normal, (len(pts), 1))
    return pts, nrm


def make_plate_fixture(pen_nn_mm=0.0, pen_cyl_mm=0.0):
    """A pinch grasp on a two-sided plate with exactly controlled penetrations.

    Hand contact samples sit exactly on object columns (distances are exact),
    one extra hand point dips pen_nn_mm below the top surface, and one extra
    object point sits pen_cyl_mm inside an otherwise unsampled link cylinder.
    """
    xs = ys = [0.0, 0.01, 0.02]
    top_pts, top_nrm = grid_cloud(0.0, [0, 0, 1.0], xs, ys)
    bot_pts, bot_nrm = grid_cloud(-0.02, [0, 0, -1.0], xs, ys)
    obj_pts = [top_pts, bot_pts]
    obj_nrm = [top_nrm, bot_nrm]

    top_contacts = np.array([[x, y, 0.0] for x, y in [(0, 0), (0.01, 0.01), (0.02, 0.02)]])
    bot_contacts = np.array([[x, y, -0.02] for x, y in [(0, 0.01), (0.01, 0.02), (0.02, 0)]])
    top_link = top_contacts
    if pen_nn_mm:
        # a dedicated column far from the contacts, hand point dipped below it
        obj_pts.append(np.array([[0.08, 0.0, 0.0]]))
        obj_nrm.append(np.array([[0.0, 0.0, 1.0]]))
        top_link = np.vstack([top_contacts, [[0.08, 0.0, -pen_nn_mm * 1e-3]]])

    links = [
        Link("plate_top", -1, np.eye(3), np.zeros(3), None, None, None, top_link, top_link),
        Link("plate_bot", 0, np.eye(3), np.zeros(3), None, None, None, bot_contacts, bot_contacts),
    ]
    if pen_cyl_mm:
        cyl = CylinderGeom([0.0, 0.0, 0.0], [0.03, 0.0, 0.0], 0.01)
        links.append(Link("probe", 0, np.eye(3), np.array([0.2, 0.0, 0.0]), None, None,
                          cyl, np.zeros((0, 3)), np.zeros((0, 3))))
        # object point inside the probe cylinder at the requested radial depth
        obj_pts.append(np.array([[0.215, 0.01 - pen_cyl_mm * 1e-3, 0.0]]))
        obj_nrm.append(np.array([[0.0, 1.0, 0.0]]))
    model = KinematicHandModel(links)
    cloud = PointCloud(np.vstack(obj_pts), np.vstack(obj_nrm))
    return model, HandPose.identity(model.dof), build_index(cloud), cloud


class TestPenetrationNN:
    def test_clear_hand_reports_zero(self):
        model = default_hand()
        cloud = sample_surface(make_uv_sphere(0.03, 16, 24), 1024, seed=1)
        index = build_index(cloud)
        pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, 0.5])
        assert penetration_nn(pose, model, index) == 0.0

    def test_sphere_fixture_five_mm(self):
        model = default_hand()
        mesh = make_uv_sphere(0.03, n_lat=24, n_lon=36)
        index = build_index(sample_surface(mesh, 2048, seed=0))
        pose0 = HandPose.identity(model.dof)
        fk = forward_kinematics(model, pose0)
        k = int(np.argmax(fk.world_points[:, 0]))
        center = fk.world_points[k] + np.array([0.03 - 0.005, 0, 0])
        pose = HandPose(pose0.theta, pose0.rot6d, -center)
        pen = penetration_nn(pose, model, index)
        assert pen == pytest.approx(5.0, abs=0.2)

    def test_density_refinement_stable(self):
        model = default_hand()
        mesh = make_uv_sphere(0.03, n_lat=24, n_lon=36)
        pose0 = HandPose.identity(model.dof)
        fk = forward_kinematics(model, pose0)
        k = int(np.argmax(fk.world_points[:, 0]))
        center = fk.world_points[k] + np.array([0.03 - 0.005, 0, 0])
        pose = HandPose(pose0.theta, pose0.rot6d, -center)
        pens = [penetration_nn(pose, model, build_index(sample_surface(mesh, n, seed=0)))
                for n in (2048, 8192)]
        assert abs(pens[0] - pens[1]) < 0.2

    def test_monotone_along_plane_normal(self):
        model = default_hand()
        xs = np.linspace(-0.3, 0.3, 61)
        pts = np.array([[x, y, 0.0] for x in xs for y in xs])
        cloud = PointCloud(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
        index = build_index(cloud)
        prev = -1.0
        for dz in np.linspace(0.05, -0.05, 9):
            pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, dz])
            pen = penetration_nn(pose, model, index)
            assert pen >= prev
            prev = pen


class TestPenetrationCylinder:
    def test_object_outside_all_cylinders(self):
        model = default_hand()
        cloud = sample_surface(make_uv_sphere(0.03, 16, 24), 512, seed=2)
        pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, 0.5])
        assert penetration_cylinder(pose, model, cloud) == 0.0

    def test_point_on_cylinder_axis(self):
        cyl = CylinderGeom([0, 0, 0], [0.05, 0, 0], 0.01)
        links = [Link("l0", -1, np.eye(3), np.zeros(3), None, None, cyl,
                      np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 0]]))]
        model = KinematicHandModel(links)
        cloud = PointCloud(np.array([[0.025, 0.0, 0.0]]), np.array([[0, 0, 1.0]]))
        pen = penetration_cylinder(HandPose.identity(0), model, cloud)
        assert pen == pytest.approx(10.0, abs=1e-9)

    def test_box_face_scene_matches_dense_oracle(self):
        # cylinder cap pressed 3 mm through a box face: the deepest region is
        # a plateau, so sparse and dense clouds agree tightly
        cyl = CylinderGeom([0.0, 0, 0], [0.04, 0, 0], 0.012)
        links = [Link("l0", -1, np.eye(3), np.zeros(3), None, None, cyl,
                      np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 0]]))]
        model = KinematicHandModel(links)
        mesh = make_box([0.02, 0.03, 0.03])
        # box centered so its +x face at x=0.02 is crossed by the cap at x=0.04
        from dgforge.geometry import TriangleMesh
        mesh = TriangleMesh(mesh.vertices + np.array([0.057, 0.0, 0.0]), mesh.faces)
        pose = HandPose.identity(0)
        sparse = penetration_cylinder(pose, model, sample_surface(mesh, 2048, seed=3))
        dense = penetration_cylinder(pose, model, sample_surface(mesh, 60000, seed=3))
        assert dense == pytest.approx(3.0, abs=0.05)
        assert abs(sparse - dense) < 0.5


class TestContacts:
    def test_far_hand_no_contacts(self):
        model = default_hand()
        index = build_index(sample_surface(make_uv_sphere(0.03, 12, 18), 512, seed=1))
        pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, 1.0])
        cs = extract_contacts(pose, model, index, contact_epsilon=0.005)
        assert len(cs) == 0

    def test_fingertip_on_plane_normal(self):
        model = default_hand()
        pose0 = HandPose.identity(model.dof)
        fk = forward_kinematics(model, pose0)
        tip = fk.world_points[int(np.argmax(fk.world_points[:, 0]))]
        xs = tip[0] + np.arange(-3, 4) * 0.02
        ys = tip[1] + np.arange(-3, 4) * 0.02
        pts = np.array([[x, y, tip[2]] for x in xs for y in ys])
        cloud = PointCloud(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
        cs = extract_contacts(pose0, model, build_index(cloud), contact_epsilon=0.001)
        assert len(cs) >= 1
        assert np.allclose(cs.normals, [0, 0, 1.0])

    def test_epsilon_zero_keeps_exact_touches_only(self):
        model, pose, index, _ = make_plate_fixture()
        cs = extract_contacts(pose, model, index, contact_epsilon=0.0)
        assert len(cs) == 6  # the six exactly-touching pinch points
        cs2 = extract_contacts(pose, model, index, contact_epsilon=-1.0)
        assert len(cs2) == 0

    def test_dedup_caps_contacts_per_link(self):
        pts = np.array([[0.01 * i, 0.0, 0.0] for i in range(20)])
        links = [Link("l0", -1, np.eye(3), np.zeros(3), None, None, None, pts, pts)]
        model = KinematicHandModel(links)
        opts = pts.copy()
        cloud = PointCloud(opts, np.tile([0, 0, 1.0], (20, 1)))
        cs = extract_contacts(HandPose.identity(0), model, build_index(cloud), 0.001)
        assert len(cs) == 8

    def test_contacts_within_epsilon_of_surface(self):
        model, pose, index, _ = make_plate_fixture(pen_nn_mm=9.9)
        eps = 0.005
        cs = extract_contacts(pose, model, index, contact_epsilon=eps)
        _, dist = index.nearest_batch(cs.points)
        assert np.all(dist <= eps + 1e-15)


class TestResistsForce:
    def test_empty_contacts_fail(self):
        cs = ContactSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.intp))
        assert resists_force(cs, [0, 0, 1.0]) is False

    def test_single_contact_press_and_pull(self):
        cs = ContactSet(np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 1.0]]),
                        np.array([0]), friction_mu=0.5)
        assert resists_force(cs, [0, 0, -1.0]) is True
        assert resists_force(cs, [0, 0, 1.0]) is False

    def test_agrees_with_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        borderline = 0
        for trial in range(50):
            c = rng.integers(1, 4)
            pts = rng.normal(size=(c, 3)) * 0.03
            nrm = rng.normal(size=(c, 3))
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            cs = ContactSet(pts, nrm, np.arange(c),
                            friction_mu=float(rng.uniform(0.2, 1.0)))
            A = contact_edge_matrix(cs, 8)
            for d in AXIS_DIRECTIONS:
                lp = resists_force(cs, d)
                oracle = cone_contains_bruteforce(A.T, -d)
                if lp != oracle:
                    _, resid = nnls(A, -d)
                    assert resid < 1e-6, f"hard disagreement at trial {trial}"
                    borderline += 1
        assert borderline <= 5

    def test_direction_symmetry_under_octahedral_rotations(self):
        rng = np.random.default_rng(3)
        rotations = [
            np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]),   # 90 deg about z
            np.array([[0, 0, 1.0], [1, 0, 0], [0, 1, 0]]),    # cyclic xyz
            np.array([[1.0, 0, 0], [0, -1, 0], [0, 0, -1]]),  # 180 deg about x
        ]
        for _ in range(10):
            c = rng.integers(1, 4)
            pts = rng.normal(size=(c, 3)) * 0.03
            nrm = rng.normal(size=(c, 3))
            nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
            cs = ContactSet(pts, nrm, np.arange(c), friction_mu=0.6)
            for rot in rotations:
                cs_rot = ContactSet(pts @ rot.T, nrm @ rot.T, np.arange(c), friction_mu=0.6)
                for d in AXIS_DIRECTIONS:
                    assert resists_force(cs_rot, rot @ d) == resists_force(cs, d)


class TestSuccessLabels:
    def test_empty_contacts(self):
        model = default_hand()
        index = build_index(sample_surface(make_uv_sphere(0.03, 12, 18), 256, seed=5))
        pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, 1.0])
        assert success_labels(pose, model, index) == (False, False)

    def test_antipodal_sphere_contacts(self):
        cs = ContactSet(np.array([[0.03, 0, 0], [-0.03, 0, 0]]),
                        np.array([[1.0, 0, 0], [-1.0, 0, 0]]),
                        np.array([0, 1]), friction_mu=1.0)
        results = [resists_force(cs, d) for d in AXIS_DIRECTIONS]
        assert any(results)  # suc1 at minimum
        oracle = [cone_contains_bruteforce(contact_edge_matrix(cs, 8).T, -d)
                  for d in AXIS_DIRECTIONS]
        assert results == oracle

    def test_box_clamp_all_directions(self):
        ys, zs = np.meshgrid([-0.01, 0.01], [-0.01, 0.01])
        right = np.stack([np.full(4, 0.02), ys.ravel(), zs.ravel()], axis=1)
        left = right.copy()
        left[:, 0] = -0.02
        cs = ContactSet(np.vstack([right, left]),
                        np.vstack([np.tile([1.0, 0, 0], (4, 1)), np.tile([-1.0, 0, 0], (4, 1))]),
                        np.array([0] * 4 + [1] * 4), friction_mu=0.5)
        assert all(resists_force(cs, d) for d in AXIS_DIRECTIONS)


class TestDiversity:
    def test_identical_poses_zero(self):
        p = HandPose.identity(24)
        assert diversity([p, p, p], [True, True, True]) == 0.0

    def test_two_pose_hand_example(self):
        a = HandPose.identity(24)
        vec = a.as_vector().copy()
        vec[-3] += 0.2
        b = HandPose.from_vector(vec, 24)
        val = diversity([a, b], [True, True])
        assert val == pytest.approx(0.1 / 33, abs=1e-15)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        poses = [HandPose.from_vector(rng.normal(size=33), 24) for _ in range(6)]
        succ = [True, False, True, True, False, True]
        v1 = diversity(poses, succ)
        order = [3, 0, 5, 2, 4, 1]
        v2 = diversity([poses[i] for i in order], [succ[i] for i in order])
        assert v1 == v2

    def test_under_two_successes_warns(self):
        with pytest.warns(UserWarning):
            assert diversity([HandPose.identity(24)], [True]) == 0.0


class TestFilterGrasp:
    def test_pen_nn_just_below_limit_accepted(self):
        model, pose, index, cloud = make_plate_fixture(pen_nn_mm=9.9, pen_cyl_mm=0.5)
        accepted, report = filter_grasp(pose, model, index, cloud)
        assert report.pen_mm == pytest.approx(9.9, abs=1e-9)
        assert report.suc6 and accepted

    def test_pen_nn_over_limit_rejected(self):
        model, pose, index, cloud = make_plate_fixture(pen_nn_mm=10.1, pen_cyl_mm=0.5)
        accepted, report = filter_grasp(pose, model, index, cloud)
        assert report.pen_mm == pytest.approx(10.1, abs=1e-9)
        assert report.suc6 and not accepted
        assert rejection_reasons(report) == ["PEN_NN"]

    def test_pen_cyl_thresholds(self):
        model, pose, index, cloud = make_plate_fixture(pen_cyl_mm=0.9)
        accepted, report = filter_grasp(pose, model, index, cloud)
        assert report.pen_cyl_mm == pytest.approx(0.9, abs=1e-9)
        assert accepted
        model, pose, index, cloud = make_plate_fixture(pen_cyl_mm=1.1)
        accepted, report = filter_grasp(pose, model, index, cloud)
        assert report.pen_cyl_mm == pytest.approx(1.1, abs=1e-9)
        assert not accepted
        assert rejection_reasons(report) == ["PEN_CYL"]

    def test_floating_hand_rejected(self):
        model = default_hand()
        cloud = sample_surface(make_uv_sphere(0.03, 12, 18), 512, seed=7)
        index = build_index(cloud)
        pose = HandPose(np.zeros(model.dof), [1, 0, 0, 0, 1, 0], [0, 0, 0.6])
        accepted, report = filter_grasp(pose, model, index, cloud)
        assert not accepted and not report.suc6
        assert "NOT_STABLE" in rejection_reasons(report)

    def test_report_invariant(self):
        with pytest.raises(ValueError):
            EvalReport(0.0, 0.0, True, False, False)
