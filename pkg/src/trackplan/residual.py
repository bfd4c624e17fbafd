"""Closed-loop correction policy on top of the open-loop plan.

Tokens are the p predicted point trajectories plus h plan-window poses.
The current observation, the goal raster and the env step index condition
every block through adaLN-Zero. The last h tokens are read out as 7-d
corrections (translation, rotation vector, gripper) for the plan window.

``mode="actions"`` is the ablation that predicts absolute poses instead of
corrections; only the target and the action composition differ.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .nn import autograd as ag
from .nn import layers as L
from .nn.layers import NonFiniteLoss, ShapeMismatch
from .planner import Pose
from .seeding import child_seed
from . import simenv

__all__ = [
    "ResidualPolicyConfig", "ResidualPolicy", "PoseDelta", "compose_action", "bc_train_step",
    "rollout_closed_loop", "rollout_open_loop", "train", "NonFiniteLoss", "ShapeMismatch",
]

MODES = ("residual", "actions")


@dataclass(frozen=True)
class ResidualPolicyConfig:
    n_blocks: int = 3
    hidden_size: int = 96
    n_heads: int = 4
    embed_dim: int = 96
    h: int = 4
    p: int = 64
    H: int = 16
    freq_dim: int = 64
    raster_resolution: int = 64
    image_size: int = 256
    delta_scale: float = 0.1
    mode: str = "residual"

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def out_scale(self):
        return self.delta_scale if self.mode == "residual" else 1.0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PoseDelta:
    translation: np.ndarray
    rotation: np.ndarray
    gripper: float = 0.0

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:6].copy(), float(v[6]))

    def vector(self):
        return np.concatenate([self.translation, self.rotation, [self.gripper]])

    def __neg__(self):
        return PoseDelta(-self.translation, -self.rotation, -self.gripper)

    def is_zero(self):
        return not np.any(self.vector())


def compose_action(plan_pose: Pose, delta: PoseDelta) -> Pose:
    """a = plan + delta; exact zeros leave the plan pose untouched."""
    pos, R, g = plan_pose.position, plan_pose.orientation, plan_pose.gripper
    if np.any(delta.translation):
        pos = pos + delta.translation
    if np.any(delta.rotation):
        R = geo.so3_exp(delta.rotation) @ R
    if delta.gripper != 0:
        g = min(max(g + delta.gripper, 0.0), 1.0)
    return Pose(pos, R, g)


def pose_difference(action: Pose, plan_pose: Pose):
    """Delta vector with ``compose_action(plan_pose, delta) == action``."""
    rot = geo.so3_log(action.orientation @ plan_pose.orientation.T)
    return np.concatenate([action.position - plan_pose.position, rot,
                           [action.gripper - plan_pose.gripper]])


def absolute_vector(pose: Pose):
    return np.concatenate([pose.position, geo.so3_log(pose.orientation), [pose.gripper]])


def pose_from_vector(v):
    v = np.asarray(v, dtype=np.float64)
    return Pose(v[:3], geo.so3_exp(v[3:6]), min(max(float(v[6]), 0.0), 1.0))


def pose_features(pose: Pose):
    # position, first two orientation columns, gripper
    return np.concatenate([pose.position, pose.orientation[:, 0], pose.orientation[:, 1],
                           [pose.gripper]])


POSE_DIM = 10


def track_features(tracks, image_size=256):
    """(p, H, 2) pixels -> (p, 2 + 2H): normalized start + scaled displacement."""
    tracks = np.asarray(tracks, dtype=np.float64)
    p0 = tracks[:, 0]
    disp = (tracks - p0[:, None]) / (image_size / 4.0)
    return np.concatenate([p0 / image_size * 2.0 - 1.0, disp.reshape(len(tracks), -1)], axis=1)


def select_tracks(tracks, p, seed=0):
    """Fixed-size subset of track rows (sampled with replacement if too few)."""
    tracks = np.asarray(tracks)
    g = np.random.default_rng(child_seed(seed, "track-subset"))
    n = len(tracks)
    idx = np.sort(g.choice(n, size=p, replace=n < p))
    return tracks[idx]


# ---------------------------------------------------------------- network


def init_params(cfg: ResidualPolicyConfig, seed=0):
    g = np.random.default_rng(child_seed(seed, "residual-init"))
    P = {}
    L.init_encoder(P, g, "enc_obs", cfg.raster_resolution, cfg.embed_dim)
    L.init_encoder(P, g, "enc_goal", cfg.raster_resolution, cfg.embed_dim)
    L.init_step_embedder(P, g, "temb", cfg.freq_dim, cfg.embed_dim)
    L.init_linear(P, g, "trk", 2 + 2 * cfg.H, cfg.hidden_size)
    L.init_linear(P, g, "plan", POSE_DIM, cfg.hidden_size)
    P["slot"] = 0.02 * g.normal(size=(cfg.h, cfg.hidden_size))
    for i in range(cfg.n_blocks):
        L.init_block(P, g, f"blk{i}", cfg.hidden_size, cfg.embed_dim)
    L.init_final(P, g, "final", cfg.hidden_size, cfg.embed_dim, 7)
    return P


def _forward(P, cfg, obs, goal, trk, plan, t):
    """obs/goal: (B, R, R); trk: (B, p, 2+2H); plan: (B, h, 10); t: (B,). -> (B, h, 7)."""
    cond = ag.add(ag.add(L.encode(P, "enc_obs", obs), L.encode(P, "enc_goal", goal)),
                  L.step_embed(P, "temb", t, cfg.freq_dim))
    xt = L.linear(P, "trk", ag.Tensor(trk))
    xp = ag.add(L.linear(P, "plan", ag.Tensor(plan)), P["slot"])
    x = ag.concat([xt, xp], axis=1)
    for i in range(cfg.n_blocks):
        x = L.dit_block(P, f"blk{i}", x, cond, cfg.n_heads)
    out = L.final_layer(P, "final", x, cond)
    return ag.getitem(out, (slice(None), slice(trk.shape[1], None)))


class ResidualPolicy:
    def __init__(self, config: ResidualPolicyConfig = ResidualPolicyConfig(), params=None, seed=0):
        self.config = config
        self.params = init_params(config, seed) if params is None else dict(params)

    def with_params(self, params):
        return ResidualPolicy(self.config, params)

    def predict_residuals(self, obs, goal, tracks, plan_window, t):
        """h PoseDeltas (or absolute-pose vectors in ablation mode)."""
        cfg = self.config
        tracks = np.asarray(tracks, dtype=np.float64)
        if tracks.shape != (cfg.p, cfg.H, 2):
            raise ShapeMismatch(f"tracks {tracks.shape}, expected {(cfg.p, cfg.H, 2)}")
        if len(plan_window) != cfg.h:
            raise ShapeMismatch(f"plan window has {len(plan_window)} poses, expected h={cfg.h}")
        R = cfg.raster_resolution
        obs = np.asarray(obs, dtype=np.float64)
        goal = np.asarray(goal, dtype=np.float64)
        if obs.shape != (R, R) or goal.shape != (R, R):
            raise ShapeMismatch(f"rasters {obs.shape}/{goal.shape}, expected {(R, R)}")
        plan = np.stack([pose_features(p) for p in plan_window])
        out = _forward(L.as_params(self.params), cfg, obs[None], goal[None],
                       track_features(tracks, cfg.image_size)[None], plan[None], [t])
        vecs = out.data[0] * cfg.out_scale
        return [PoseDelta.from_vector(v) for v in vecs]

    def act(self, obs, goal, tracks, plan, t):
        """Command for env step ``t`` given the full open-loop plan."""
        window = plan.window(t, self.config.h)
        d = self.predict_residuals(obs, goal, tracks, window, t)[0]
        if self.config.mode == "residual":
            return compose_action(plan.poses[t], d)
        return pose_from_vector(d.vector())


# ---------------------------------------------------------------- training


def targets_for(demo, i, cfg: ResidualPolicyConfig):
    last = len(demo) - 1
    rows = []
    for j in range(cfg.h):
        k = min(i + j, last)
        a = demo.actions[k]
        if cfg.mode == "residual":
            rows.append(pose_difference(a, demo.plan.poses[k]))
        else:
            rows.append(absolute_vector(a))
    return np.stack(rows)


def make_bc_batch(cfg: ResidualPolicyConfig, samples, seed=0):
    """``samples``: list of (demo, step index)."""
    if not samples:
        raise ValueError("empty batch")
    obs, goal, trk, plan, t, y = [], [], [], [], [], []
    for n, (demo, i) in enumerate(samples):
        if demo.tracks.shape[1] != cfg.H:
            raise ShapeMismatch(f"demo {demo.episode_id} tracks have H={demo.tracks.shape[1]}")
        if demo.goal_raster.shape != (cfg.raster_resolution,) * 2:
            raise ShapeMismatch(f"demo {demo.episode_id} rasters are {demo.goal_raster.shape}, "
                                f"policy expects {cfg.raster_resolution}")
        obs.append(demo.observations[i])
        goal.append(demo.goal_raster)
        tr = select_tracks(demo.tracks, cfg.p, child_seed(seed, demo.episode_id))
        trk.append(track_features(tr, cfg.image_size))
        plan.append(np.stack([pose_features(p) for p in demo.plan.window(i, cfg.h)]))
        t.append(demo.step_ids[i])
        y.append(targets_for(demo, i, cfg))
    return {"obs": np.stack(obs), "goal": np.stack(goal), "trk": np.stack(trk),
            "plan": np.stack(plan), "t": np.asarray(t), "y": np.stack(y)}


def _loss(P, cfg, b):
    out = _forward(P, cfg, b["obs"], b["goal"], b["trk"], b["plan"], b["t"])
    return ag.mse(ag.mul(out, cfg.out_scale), b["y"])


def bc_loss_and_grads(policy: ResidualPolicy, samples, seed=0):
    b = make_bc_batch(policy.config, samples, seed)
    return L.value_and_grad(_loss, policy.params, policy.config, b)


def bc_loss(policy: ResidualPolicy, samples, seed=0):
    b = make_bc_batch(policy.config, samples, seed)
    return float(_loss(L.as_params(policy.params), policy.config, b).data)


def bc_train_step(policy: ResidualPolicy, samples, opt_state, seed, lr=1e-4):
    """One Adam step on the h-step behavior-cloning loss."""
    if opt_state is None:
        opt_state = L.adam_init(policy.params)
    value, grads = bc_loss_and_grads(policy, samples, seed)
    params, opt_state = L.adam_update(policy.params, grads, opt_state, lr=lr)
    return policy.with_params(params), opt_state, value


def all_samples(demos):
    return [(d, i) for d in demos for i in range(len(d))]


# ---------------------------------------------------------------- rollout


def rollout_open_loop(episode, plan, error_model=simenv.ErrorModel(), goal=None):
    trace, ok, _ = simenv.execute(episode, plan.poses, error_model, goal)
    return trace, ok


def rollout_closed_loop(policy: ResidualPolicy, episode, tracks, plan,
                        error_model=simenv.ErrorModel(), goal=None):
    """Re-plan every step from the current observation; execute the first action."""
    goal = goal or simenv.GoalSpec.for_episode(episode)
    state, obs = simenv.reset(episode, error_model)
    trace = simenv.Trace()
    for t in range(len(plan)):
        a = policy.act(obs, goal.goal_raster, tracks, plan, t)
        state, obs = simenv.step(state, a)
        trace.record(state, a)
    return trace, simenv.success(state, goal)


def train(policy: ResidualPolicy, demos, steps, batch_size=32, lr=1e-4, seed=0,
          opt_state=None, start_step=0, callback=None):
    """Behavior cloning over every (demo, step) pair; returns (policy, opt_state, losses)."""
    samples = all_samples(demos)
    losses = []
    for s in range(start_step, start_step + steps):
        g = np.random.default_rng(child_seed(seed, "bc-batch", s))
        idx = g.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        try:
            policy, opt_state, loss = bc_train_step(policy, [samples[i] for i in idx], opt_state,
                                                    child_seed(seed, "bc-step", s), lr)
        except NonFiniteLoss as e:
            raise NonFiniteLoss(f"step {s}: {e}") from e
        losses.append(loss)
        if callback is not None:
            callback(s, policy, loss)
    return policy, opt_state, losses
