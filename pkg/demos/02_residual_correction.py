"""A residual policy that learns to undo a grasp offset.

The simulator grabs the object a fixed distance away from where the plan
expects. Open-loop execution of a perfect plan then drags the object to the
wrong place. We collect scripted demos that compensate for the offset, clone
them into a small residual policy, and compare both controllers on held-out
episodes. Takes about half a minute on one core.
"""

import time

from trackplan import residual as rp, simenv, synth

data = synth.DatasetConfig(counts={"train": 30, "MG": 20}, step_bound=2.0, motion_scale=1.5,
                           focal=384.0, object_fraction=0.92, raster_resolution=32, seed=21)
errors = simenv.ErrorModel((0.10, -0.08, 0.0), grasp_radius=0.15, action_noise_sigma=0.002, seed=21)
cfg = rp.ResidualPolicyConfig(n_blocks=2, hidden_size=64, embed_dim=64, p=32, raster_resolution=32)

train = list(synth.iter_episodes(data, ["train"]))
demos = [simenv.scripted_demo(ep, errors) for ep in train]
print(f"{len(demos)} demos, {sum(len(d) for d in demos)} state-action pairs")

t0 = time.perf_counter()
policy, _, losses = rp.train(rp.ResidualPolicy(cfg, seed=21), demos, steps=300,
                             batch_size=32, lr=1e-4, seed=21)
print(f"trained 300 steps in {time.perf_counter() - t0:.0f} s, "
      f"loss {losses[0]:.2e} -> {losses[-1]:.2e}")

open_ok = closed_ok = 0
held = list(synth.iter_episodes(data, ["MG"]))
for ep in held:
    plan = simenv.ground_truth_plan(ep)
    tracks = rp.select_tracks(ep.gt_tracks, cfg.p, seed=21)
    open_ok += rp.rollout_open_loop(ep, plan, errors)[1]
    closed_ok += rp.rollout_closed_loop(policy, ep, tracks, plan, errors)[1]
print(f"success on {len(held)} held-out episodes: open loop {open_ok}, closed loop {closed_ok}")
