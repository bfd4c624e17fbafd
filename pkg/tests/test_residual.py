import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from trackplan import geometry as geo, residual as rp, simenv
from trackplan.planner import Pose
from trackplan.residual import PoseDelta, ResidualPolicy

from conftest import TINY_RP, jitter


def rand_pose(g, grip=1.0):
    return Pose(g.normal(size=3), geo.so3_exp(g.normal(size=3)), grip)


def test_zero_delta_is_bitwise_identity():
    p = rand_pose(np.random.default_rng(0), 0.0)
    assert rp.compose_action(p, PoseDelta(np.zeros(3), np.zeros(3), 0.0)).equals(p)


def test_pose_difference_inverts_compose():
    g = np.random.default_rng(1)
    for _ in range(50):
        a, b = rand_pose(g), rand_pose(g)
        d = PoseDelta.from_vector(rp.pose_difference(a, b))
        c = rp.compose_action(b, d)
        assert np.allclose(c.position, a.position, atol=1e-12)
        assert np.allclose(c.orientation, a.orientation, atol=1e-9)


def test_absolute_vector_roundtrip():
    p = rand_pose(np.random.default_rng(2))
    q = rp.pose_from_vector(rp.absolute_vector(p))
    assert np.allclose(q.orientation, p.orientation, atol=1e-12) and q.gripper == 1.0


def test_untrained_policy_outputs_zero(tiny_episodes):
    ep = tiny_episodes[0]
    pol = ResidualPolicy(TINY_RP)
    plan = simenv.ground_truth_plan(ep)
    tr = rp.select_tracks(ep.gt_tracks, TINY_RP.p)
    deltas = pol.predict_residuals(ep.initial_raster, ep.goal_raster, tr, plan.window(0, 3), 0)
    assert len(deltas) == 3 and all(d.is_zero() for d in deltas)
    assert pol.act(ep.initial_raster, ep.goal_raster, tr, plan, 2).equals(plan.poses[2])


def test_shape_errors(tiny_episodes):
    ep = tiny_episodes[0]
    pol = ResidualPolicy(TINY_RP)
    plan = simenv.ground_truth_plan(ep)
    tr = rp.select_tracks(ep.gt_tracks, TINY_RP.p)
    with pytest.raises(rp.ShapeMismatch):
        pol.predict_residuals(ep.initial_raster, ep.goal_raster, tr[:3], plan.window(0, 3), 0)
    with pytest.raises(rp.ShapeMismatch):
        pol.predict_residuals(ep.initial_raster, ep.goal_raster, tr, plan.window(0, 2), 0)
    with pytest.raises(rp.ShapeMismatch):
        pol.predict_residuals(np.zeros((8, 8)), ep.goal_raster, tr, plan.window(0, 3), 0)
    with pytest.raises(ValueError):
        rp.ResidualPolicyConfig(mode="both")


def test_batch_raster_mismatch(tiny_demos):
    from dataclasses import replace

    with pytest.raises(rp.ShapeMismatch):
        rp.make_bc_batch(replace(TINY_RP, raster_resolution=32), rp.all_samples(tiny_demos)[:2])


def test_zero_init_closed_loop_equals_open_loop(tiny_episodes):
    em = simenv.ErrorModel((0.04, -0.02, 0.0), action_noise_sigma=0.002, seed=3)
    pol = ResidualPolicy(TINY_RP)
    for ep in tiny_episodes:
        plan = simenv.ground_truth_plan(ep)
        tr = rp.select_tracks(ep.gt_tracks, TINY_RP.p)
        a, ok_a = rp.rollout_open_loop(ep, plan, em)
        b, ok_b = rp.rollout_closed_loop(pol, ep, tr, plan, em)
        assert a.equals(b) and ok_a == ok_b


def test_targets(tiny_demos):
    d = tiny_demos[0]
    y = rp.targets_for(d, 0, TINY_RP)
    # approach and grasp carry the -offset compensation, later steps none
    assert np.allclose(y[0, :3], [-0.05, 0, 0]) and np.allclose(y[1, :3], [-0.05, 0, 0])
    assert not y[2].any()
    ya = rp.targets_for(d, 0, rp.ResidualPolicyConfig(**{**TINY_RP.to_dict(), "mode": "actions"}))
    assert np.allclose(ya[0, :3], d.actions[0].position)


def test_bc_lr_zero_and_determinism(tiny_demos):
    pol = ResidualPolicy(TINY_RP)
    s = rp.all_samples(tiny_demos)[:4]
    p2, _, _ = rp.bc_train_step(pol, s, None, 0, lr=0.0)
    assert all(np.array_equal(pol.params[k], p2.params[k]) for k in pol.params)
    a, _, la = rp.train(pol, tiny_demos, 5, batch_size=4, lr=1e-3, seed=1)
    b, _, lb = rp.train(pol, tiny_demos, 5, batch_size=4, lr=1e-3, seed=1)
    assert la == lb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_bc_learns_offset(tiny_demos):
    pol = ResidualPolicy(TINY_RP, seed=2)
    trained, _, losses = rp.train(pol, tiny_demos, 150, batch_size=8, lr=3e-3, seed=0)
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_actions_mode_trains(tiny_demos, tiny_episodes):
    cfg = rp.ResidualPolicyConfig(**{**TINY_RP.to_dict(), "mode": "actions"})
    pol, _, losses = rp.train(ResidualPolicy(cfg), tiny_demos, 20, batch_size=4, lr=1e-3)
    ep = tiny_episodes[0]
    plan = simenv.ground_truth_plan(ep)
    trace, ok = rp.rollout_closed_loop(pol, ep, rp.select_tracks(ep.gt_tracks, cfg.p), plan)
    assert len(trace.commands) == len(plan) and isinstance(ok, bool)
    assert np.isfinite(losses).all()


def test_select_tracks():
    tr = np.arange(40.0).reshape(5, 4, 2)
    assert rp.select_tracks(tr, 3, 0).shape == (3, 4, 2)
    assert rp.select_tracks(tr, 8, 0).shape == (8, 4, 2)
    assert np.array_equal(rp.select_tracks(tr, 3, 1), rp.select_tracks(tr, 3, 1))


@settings(max_examples=50)
@given(arrays(np.float64, 7, elements=st.floats(-0.5, 0.5, allow_nan=False)))
def test_compose_negated_delta_translation(v):
    p = Pose([0.1, 0.2, 1.5], np.eye(3), 0.5)
    d = PoseDelta.from_vector(v)
    back = rp.compose_action(rp.compose_action(p, d), PoseDelta(-d.translation, np.zeros(3), 0.0))
    assert np.allclose(back.position, p.position, atol=1e-12)
