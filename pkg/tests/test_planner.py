import numpy as np
import pytest

from trackplan import geometry as geo, planner, synth
from trackplan.geometry import RigidTransform
from trackplan.planner import EndEffectorPlan, Pose


def e0(R=np.eye(3)):
    return Pose([0.0, -1.0, 1.0], R, 0.0)


def test_grasp_pose_singleton_and_cube():
    q = np.array([0.1, 0.2, 2.0])
    assert np.array_equal(planner.initial_grasp_pose(e0(), q[None]).position, q)
    c = np.array([0.25, -0.5, 2.0])
    corners = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)]) * 0.125 + c
    e1 = planner.initial_grasp_pose(e0(), corners)
    assert np.array_equal(e1.position, c)
    assert e1.gripper == 1.0


def test_grasp_pose_orientation_passthrough():
    R = geo.rot_z(np.radians(45))
    e1 = planner.initial_grasp_pose(e0(R), np.ones((3, 3)))
    assert np.array_equal(e1.orientation, R)


def test_grasp_pose_empty():
    with pytest.raises(planner.EmptyPointSet):
        planner.initial_grasp_pose(e0(), np.zeros((0, 3)))


def test_identity_plan():
    e1 = Pose([0.1, 0.0, 2.0], np.eye(3), 1.0)
    plan = planner.open_loop_plan([RigidTransform.identity()] * 5, e1)
    assert len(plan) == 7
    assert plan.poses[0].gripper == 0.0
    assert all(p.equals(e1) for p in plan.poses[1:])


def test_translation_plan():
    e1 = Pose([0.1, 0.0, 2.0], geo.rot_x(0.3), 1.0)
    d = np.array([0.05, -0.02, 0.1])
    plan = planner.open_loop_plan([RigidTransform.identity(), RigidTransform(np.eye(3), d)], e1)
    assert np.allclose(plan.poses[-1].position, e1.position + d, atol=1e-15)
    assert np.array_equal(plan.poses[-1].orientation, e1.orientation)


def test_rotation_about_centroid():
    c = np.array([0.0, 0.0, 2.0])
    e1 = Pose(c + [0.1, 0.0, 0.0], np.eye(3), 1.0)
    R = geo.rot_y(np.pi / 2)
    T = RigidTransform(R, c - R @ c)
    plan = planner.open_loop_plan([RigidTransform.identity(), T], e1)
    # +x offset about the y axis by 90 degrees goes to -z
    assert np.allclose(plan.poses[-1].position, c + [0.0, 0.0, -0.1], atol=1e-12)
    assert np.allclose(plan.poses[-1].orientation, R)


def test_plan_gripper_monotone_and_length():
    cfg = synth.DatasetConfig(counts={"MG": 2}, p_range=(20, 30))
    for ep in synth.iter_episodes(cfg):
        e1 = planner.initial_grasp_pose(e0(), ep.points3d[ep.object_mask])
        plan = planner.open_loop_plan(ep.gt_transforms, e1)
        assert len(plan) == ep.H + 2
        g = [p.gripper for p in plan.poses]
        assert g == sorted(g)
    with pytest.raises(ValueError):
        EndEffectorPlan([e1, e1.with_gripper(0.0)])


def test_window_and_serialization():
    e1 = Pose([0.1, 0.0, 2.0], np.eye(3), 1.0)
    Ts = [RigidTransform(np.eye(3), [0.01 * t, 0, 0]) for t in range(4)]
    plan = planner.open_loop_plan(Ts, e1)
    w = plan.window(4, 4)
    assert len(w) == 4 and all(p.equals(plan.poses[-1]) for p in w[2:])
    again = EndEffectorPlan.from_dict(plan.to_dict())
    assert all(a.equals(b) for a, b in zip(again.poses, plan.poses))


def test_pose_immutable():
    p = Pose([0, 0, 1], np.eye(3))
    with pytest.raises(ValueError):
        p.position[0] = 3.0
