"""Noisy tracks in, a successful rollout out.

We draw one held-out episode, corrupt its ground-truth tracks with pixel
noise and outliers, recover the object's rigid motion with the robust fit,
turn it into an end-effector plan and run that plan in the simulator.
"""

import numpy as np

from trackplan import geometry as geo, rigidfit as rf, simenv, synth
from trackplan.planner import initial_grasp_pose, open_loop_plan

cfg = synth.DatasetConfig(counts={"MG": 1}, focal=384.0, depth_range=(1.0, 1.6),
                          p_range=(200, 300), seed=11)
ep = next(synth.iter_episodes(cfg))
print(f"episode {ep.episode_id}: {ep.p} points over {ep.H} steps, "
      f"{ep.object_mask.sum()} on the object")

# 1 px noise everywhere, 20% of points replaced by random junk
tracks, outliers = synth.corrupt_tracks(ep.gt_tracks, 1.0, 0.2, seed=0)
print(f"corrupted {outliers.sum()} tracks")

fit = rf.fit_trajectory(tracks, ep.points3d, ep.intrinsics, rf.FitConfig(seed=0))
rot = max(geo.geodesic_angle(a, b) for a, b in zip(fit.transforms, ep.gt_transforms))
trans = max(geo.translation_distance(a, b) for a, b in zip(fit.transforms, ep.gt_transforms))
leaked = len(set(fit.inlier_set) & set(np.flatnonzero(outliers)))
print(f"fit: {fit.inlier_count} inliers ({leaked} of them corrupted), "
      f"worst rotation error {np.degrees(rot):.2f} deg, worst translation {trans * 100:.2f} cm")

e1 = initial_grasp_pose(simenv.home_pose(), ep.points3d[fit.inlier_set])
plan = open_loop_plan(fit, e1)
_, ok, _ = simenv.execute(ep, plan.poses)
print(f"plan of {len(plan)} poses executed, goal reached: {ok}")

# same plan, but the gripper now grabs the object 12 cm off its centre
_, ok, _ = simenv.execute(ep, plan.poses, simenv.ErrorModel((0.12, 0.0, 0.0)))
print(f"with a 12 cm grasp offset: goal reached: {ok}")
