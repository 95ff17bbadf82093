import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordiff import execution as E

UNIT = E.CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
CAM = E.CameraIntrinsics(500.0, 480.0, 320.0, 240.0)


def random_quaternion(rng):
    q = rng.normal(size=4)
    return tuple(q / np.linalg.norm(q))


def test_deproject_identity_intrinsics():
    np.testing.assert_allclose(E.deproject((3, 4), 2.0, UNIT), [6, 8, 2])


def test_principal_point_maps_to_axis():
    for d in (0.3, 1.0, 7.5):
        np.testing.assert_allclose(E.deproject((320, 240), d, CAM), [0, 0, d])


def test_project_deproject_round_trip():
    rng = np.random.default_rng(0)
    z = rng.uniform(0.2, 5.0, 1000)
    px = np.stack([rng.uniform(0, 640, 1000), rng.uniform(0, 480, 1000)], -1)
    X = E.deproject(px, z, CAM)
    back = E.deproject(E.project(X, CAM), X[:, 2], CAM)
    assert np.abs(back - X).max() <= 1e-6


def test_project_rejects_points_behind_camera():
    with pytest.raises(ValueError):
        E.project([0.0, 0.0, -1.0], CAM)


def test_intrinsics_validated():
    with pytest.raises(ValueError):
        E.CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


def test_select_grasp_examples():
    a = E.SE3Pose((0, 0, 0))
    b = E.SE3Pose((1, 1, 1))
    assert E.select_grasp([a, b], (0.1, 0, 0)) is a
    assert E.select_grasp([b], (-50, 0, 0)) is b
    with pytest.raises(ValueError):
        E.select_grasp([], (0, 0, 0))


def test_select_grasp_ties_go_to_lowest_index():
    a, b = E.SE3Pose((1, 0, 0)), E.SE3Pose((-1, 0, 0))
    assert E.select_grasp([a, b], (0, 0, 0)) is a
    assert E.select_grasp([b, a], (0, 0, 0)) is b


def test_select_grasp_matches_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = int(rng.integers(1, 200))
        # coarse lattice positions force frequent ties
        cands = [E.SE3Pose(tuple(rng.integers(-3, 4, 3) * 0.1), random_quaternion(rng)) for _ in range(n)]
        target = rng.integers(-3, 4, 3) * 0.1 + rng.normal(scale=0.01, size=3) * (trial % 2)
        best, best_d = None, np.inf
        for i, c in enumerate(cands):
            d = np.linalg.norm(np.array(c.position) - target)
            if d < best_d:
                best, best_d = i, d
        assert E.select_grasp(cands, target) is cands[best]


def test_select_grasp_large_candidate_set():
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(10_000, 3))
    cands = [E.SE3Pose(tuple(p)) for p in pos]
    target = rng.normal(size=3)
    assert E.select_grasp(cands, target) is cands[int(np.argmin(((pos - target) ** 2).sum(1)))]


def test_quaternion_must_be_unit():
    with pytest.raises(ValueError):
        E.SE3Pose((0, 0, 0), (1.0, 0.1, 0.0, 0.0))
    E.SE3Pose((0, 0, 0), (1.0 + 5e-7, 0.0, 0.0, 0.0))


def test_default_height_rule():
    pts = np.zeros((5, 3))
    out, cats = E.assign_heights(pts)
    assert cats[0] == E.AT_TARGET
    assert cats[1:4] == [E.ABOVE_TARGET] * 3
    np.testing.assert_allclose(out[1:4, 2] - pts[1:4, 2], 0.10, atol=1e-9)


def test_constant_selector_keeps_heights():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    out, cats = E.assign_heights(pts, E.ConstantSelector(E.AT_TARGET))
    np.testing.assert_array_equal(out, pts)
    assert set(cats) == {E.AT_TARGET}


def test_clearance_is_additive():
    pts = np.array([[0.1, 0.2, 0.83]] * 3)
    out, _ = E.assign_heights(pts, E.ConstantSelector(E.ABOVE_TARGET), clearance=0.1)
    assert np.all(np.abs(out[:, 2] - pts[:, 2] - 0.1) <= 1e-9)


def test_selector_failures_name_the_waypoint():
    with pytest.raises(E.HeightSelectionError, match="waypoint 1"):
        E.assign_heights(np.zeros((3, 3)), E.FixedSelector([E.AT_TARGET, "hover", E.AT_TARGET]))
    with pytest.raises(E.HeightSelectionError):
        E.assign_heights(np.zeros((3, 3)), E.FixedSelector([E.AT_TARGET]))

    def broken(_):
        raise RuntimeError("model offline")

    with pytest.raises(E.HeightSelectionError, match="model offline"):
        E.assign_heights(np.zeros((2, 3)), broken)
    with pytest.raises(ValueError):
        E.assign_heights(np.zeros((0, 3)))


def test_two_waypoints_half_meter_apart():
    grasp = E.SE3Pose((0, 0, 0), random_quaternion(np.random.default_rng(0)))
    plan = E.build_trajectory(grasp, [[0, 0, 0], [0.5, 0, 0]], 0.1)
    pos = np.array([p.position for p in plan.poses])
    assert len(pos) - 1 == 5
    np.testing.assert_array_equal(pos[0], [0, 0, 0])
    np.testing.assert_array_equal(pos[-1], [0.5, 0, 0])
    assert all(p.quaternion == grasp.quaternion for p in plan.poses)


def test_single_waypoint_at_grasp():
    grasp = E.SE3Pose((0.2, 0.1, 0.7))
    plan = E.build_trajectory(grasp, [[0.2, 0.1, 0.7]], 0.01)
    assert len(plan.poses) == 1
    assert plan.poses[0] == grasp


def test_trajectory_starts_at_grasp():
    grasp = E.SE3Pose((0.0, 0.0, 0.5))
    plan = E.build_trajectory(grasp, [[0.05, 0.0, 0.5]], 0.01)
    assert plan.poses[0].position == grasp.position
    assert plan.poses[-1].position == (0.05, 0.0, 0.5)


def test_max_step_validated():
    with pytest.raises(ValueError):
        E.build_trajectory(E.SE3Pose((0, 0, 0)), [[1, 0, 0]], 0.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), step=st.floats(0.005, 0.3))
def test_random_plans_respect_step_bound_and_hit_waypoints(seed, n, step):
    rng = np.random.default_rng(seed)
    grasp = E.SE3Pose(tuple(rng.normal(size=3)), random_quaternion(rng))
    pts = rng.normal(scale=0.5, size=(n, 3))
    pts, cats = E.assign_heights(pts)
    plan = E.build_trajectory(grasp, pts, step, cats)
    pos = np.array([p.position for p in plan.poses])
    assert np.all(np.linalg.norm(np.diff(pos, axis=0), axis=1) <= step * (1 + 1e-9))
    np.testing.assert_array_equal(pos[0], grasp.position)
    # every height-adjusted waypoint appears exactly, in order
    idx = [int(np.flatnonzero((pos == w).all(1))[0]) for w in pts]
    assert idx == sorted(idx)


def test_depth_fallback_within_radius():
    vals = np.full((20, 20), 1.5)
    vals[5:15, 5:15] = 0.0
    vals[10, 14] = 0.0
    d = E.DepthMap(vals)
    assert d.lookup(0, 0) == 1.5
    assert d.lookup(9, 9) == 1.5  # nearest valid pixel four columns away
    vals = np.zeros((30, 30))
    vals[0, 0] = 2.0
    with pytest.raises(E.DepthError, match="within 5 px"):
        E.DepthMap(vals).lookup(15, 15)
    with pytest.raises(E.DepthError):
        E.DepthMap(vals).lookup(40, 0)


def test_fallback_tie_prefers_row_major_first():
    vals = np.zeros((5, 5))
    vals[1, 2], vals[3, 2] = 1.0, 2.0
    assert E.DepthMap(vals).lookup(2, 2) == 1.0


def test_plan_pipeline():
    depth = E.DepthMap(np.full((64, 64), 0.8))
    K = E.CameraIntrinsics(60.0, 60.0, 31.5, 31.5)
    wp = np.array([[0.5, 0.5], [0.6, 0.5], [0.7, 0.5], [0.8, 0.5], [0.9, 0.5]])
    cands = [E.SE3Pose((0.0, 0.0, 0.8)), E.SE3Pose((0.3, 0.0, 0.8))]
    plan = E.plan(wp, (64, 64), depth, K, cands, max_step=0.01)
    assert plan.grasp is cands[0]
    np.testing.assert_allclose(plan.waypoints3d[0], [0.0, 0.0, 0.8], atol=1e-12)
    np.testing.assert_allclose(plan.waypoints3d[2, 2], 0.9)
    json.dumps(plan.to_dict())


def test_lift_reports_waypoint_index():
    depth = E.DepthMap(np.zeros((8, 8)))
    with pytest.raises(E.DepthError, match="waypoint 0"):
        E.lift_waypoints([[0.5, 0.5]], (8, 8), depth, CAM)


def test_pixel_center_convention():
    np.testing.assert_array_equal(E.normalized_to_pixels([[0.5, 0.5], [0.0, 1.0]], (64, 32)),
                                  [[31.5, 15.5], [-0.5, 31.5]])


def test_depth_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    vals = np.round(rng.uniform(0.3, 4.0, size=(12, 9)), 3)
    vals[2, 3] = 0.0
    E.save_depth(tmp_path / "d.pgm", E.DepthMap(vals))
    back = E.load_depth(tmp_path / "d.pgm")
    np.testing.assert_allclose(back.values, vals, atol=1e-9)
    assert not back.valid[2, 3]
    assert json.loads((tmp_path / "d.pgm.json").read_text()) == {"scale": 1e-3}


def test_input_files(tmp_path):
    (tmp_path / "k.json").write_text(json.dumps({"fx": 1, "fy": 2, "cx": 3, "cy": 4}))
    assert E.load_intrinsics(tmp_path / "k.json") == E.CameraIntrinsics(1, 2, 3, 4)
    (tmp_path / "g.json").write_text(json.dumps([{"position": [1, 2, 3], "quaternion": [0, 1, 0, 0]}]))
    assert E.load_candidates(tmp_path / "g.json")[0].quaternion == (0, 1, 0, 0)
    (tmp_path / "w.json").write_text(json.dumps({"waypoints": [[0.1, 0.2]], "resolution": [64, 48]}))
    wp, res, heights = E.load_waypoints(tmp_path / "w.json")
    assert wp.shape == (1, 2) and res == (64, 48) and heights is None
