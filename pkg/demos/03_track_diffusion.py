"""Train a tiny track denoiser and look at what it samples.

This is a toy-sized run meant to show the moving parts: dataset,
noise schedule, training loop, ancestral sampling and the delta-AUC metric.
Don't expect good tracks from a minute of CPU training. The
zero-motion baseline, which predicts that nothing moves, is printed next
to the model for reference.
"""

import time

import numpy as np

from trackplan import metrics, synth, trackdiff as td

data = synth.DatasetConfig(counts={"train": 200, "MG": 5}, step_bound=2.0, motion_scale=1.5,
                           focal=384.0, object_fraction=0.92, raster_resolution=32, seed=31)
cfg = td.DenoiserConfig(n_blocks=2, hidden_size=64, embed_dim=64, raster_resolution=32,
                        train_points=32)
sched = td.NoiseSchedule.cosine(100)

train = list(synth.iter_episodes(data, ["train"]))
t0 = time.perf_counter()
model, _, losses = td.train(td.TrackDenoiser(cfg, seed=31), train, sched, steps=1500,
                            batch_size=16, lr=1e-3, seed=31)
print(f"1500 steps in {time.perf_counter() - t0:.0f} s; "
      f"loss {np.mean(losses[:20]):.3f} -> {np.mean(losses[-20:]):.3f}")

for ep in synth.iter_episodes(data, ["MG"]):
    pred = model.predict_episode(ep, sched, n_denoise_steps=25, seed=0)
    valid = ~ep.out_of_frame
    d_model = metrics.delta_auc(pred, ep.gt_tracks, valid=valid)
    d_zero = metrics.delta_auc(metrics.zero_motion(ep.gt_tracks), ep.gt_tracks, valid=valid)
    moved = np.linalg.norm(ep.gt_tracks[:, -1] - ep.p0, axis=-1).mean()
    print(f"{ep.episode_id}: mean motion {moved:5.1f} px, delta model {d_model:.3f}, zero-motion {d_zero:.3f}")
