"""Kinematic tabletop stand-in: an end-effector that can grab one rigid object.

No dynamics. When the gripper closes near the object it attaches, and from
then on the object follows the end-effector rigidly. Grasping error is
injected through an :class:`ErrorModel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .geometry import RigidTransform
from .planner import Pose, initial_grasp_pose, open_loop_plan
from .seeding import child_seed
from .synth import EE_INTENSITY, Episode, scene_raster

HOME_POSITION = (0.0, -1.2, 1.0)  # above and behind the camera's view
MAX_STEPS = 50


class HorizonExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class ErrorModel:
    grasp_offset: tuple = (0.0, 0.0, 0.0)
    grasp_radius: float = 0.15
    action_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.grasp_radius <= 0:
            raise ValueError("grasp_radius must be positive")
        if self.action_noise_sigma < 0:
            raise ValueError("action_noise_sigma must be non-negative")
        object.__setattr__(self, "grasp_offset", tuple(float(x) for x in self.grasp_offset))

    @property
    def offset(self):
        return np.asarray(self.grasp_offset)

    def to_dict(self):
        return {"grasp_offset": list(self.grasp_offset), "grasp_radius": self.grasp_radius,
                "action_noise_sigma": self.action_noise_sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("grasp_offset", (0, 0, 0))), d.get("grasp_radius", 0.15),
                   d.get("action_noise_sigma", 0.0), d.get("seed", 0))


def home_pose():
    return Pose(HOME_POSITION, np.eye(3), 0.0)


@dataclass(frozen=True, eq=False)
class SimState:
    object_pose: RigidTransform
    ee_pose: Pose
    attached: bool
    step: int
    episode: Episode = field(repr=False)
    error_model: ErrorModel
    grip: RigidTransform | None = None  # ee^-1 * object, fixed while attached
    halted: int = 0
    max_steps: int = MAX_STEPS

    @property
    def object_points(self):
        return self.episode.points3d[self.episode.object_mask]

    @property
    def object_centroid(self):
        return geo.apply(self.object_pose, self.episode.object_centroid)


@dataclass(frozen=True)
class GoalSpec:
    goal_object_pose: RigidTransform
    goal_raster: np.ndarray = field(repr=False)
    rot_tol: float = math.radians(10.0)
    trans_tol: float = 0.1

    def __post_init__(self):
        if self.rot_tol <= 0 or self.trans_tol <= 0:
            raise ValueError("tolerances must be positive")

    @classmethod
    def for_episode(cls, ep: Episode, rot_tol=math.radians(10.0), trans_frac=0.05):
        return cls(ep.gt_transforms[-1], ep.goal_raster, rot_tol, trans_frac * ep.object_depth)


@dataclass(frozen=True)
class Feasibility:
    max_translation: float = 3.0
    max_rotation: float = math.pi / 2


FEASIBLE = Feasibility()


def observe(state: SimState):
    ep = state.episode
    K = ep.intrinsics
    pts = ep.points3d.copy()
    pts[ep.object_mask] = geo.apply(state.object_pose, pts[ep.object_mask])
    front = pts[:, 2] > 1e-6
    uv = np.full((len(pts), 2), -1.0)
    uv[front] = geo.project(K, pts[front])
    extra = None
    ee = state.ee_pose.position
    if ee[2] > 1e-6:
        extra = (geo.project(K, ee), EE_INTENSITY)
    return scene_raster(uv, ep.object_mask, ep.initial_raster.shape[0], K, extra)


def reset(episode: Episode, error_model: ErrorModel = ErrorModel(), max_steps=MAX_STEPS):
    state = SimState(RigidTransform.identity(), home_pose(), False, 0, episode, error_model,
                     max_steps=max_steps)
    return state, observe(state)


def _perturb(pose: Pose, em: ErrorModel, step: int):
    if em.action_noise_sigma == 0:
        return pose
    g = np.random.default_rng(child_seed(em.seed, "action-noise", step))
    n = g.normal(size=6) * em.action_noise_sigma
    return Pose(pose.position + n[3:], geo.so3_exp(n[:3]) @ pose.orientation, pose.gripper)


def step(state: SimState, commanded: Pose, feasible: Feasibility = FEASIBLE):
    """Execute one commanded pose; returns (new_state, observation)."""
    if state.step >= state.max_steps:
        raise HorizonExceeded(f"step {state.step} reached the horizon {state.max_steps}")
    em = state.error_model
    target = _perturb(commanded, em, state.step)
    cur = state.ee_pose
    move = np.linalg.norm(target.position - cur.position)
    turn = geo.rotation_angle(cur.orientation.T @ target.orientation)
    halted = state.halted
    if move > feasible.max_translation or turn > feasible.max_rotation:
        target = cur  # infeasible motion: the arm refuses and stays put
        halted += 1

    closing = cur.gripper < 0.5 <= target.gripper
    opening = cur.gripper >= 0.5 > target.gripper
    attached, grip, obj = state.attached, state.grip, state.object_pose
    if closing and not attached:
        # the gripper actually closes at the commanded point plus the offset
        target = Pose(target.position + em.offset, target.orientation, target.gripper)
        if np.linalg.norm(target.position - state.object_centroid) <= em.grasp_radius:
            attached = True
            grip = geo.compose(target.as_transform().inverse(), obj)
    elif opening:
        attached, grip = False, None
    if attached:
        obj = geo.compose(target.as_transform(), grip)
    new = replace(state, object_pose=obj, ee_pose=target, attached=attached, grip=grip,
                  step=state.step + 1, halted=halted)
    return new, observe(new)


def success(state: SimState, goal: GoalSpec) -> bool:
    T = state.object_pose
    return (geo.geodesic_angle(T, goal.goal_object_pose) <= goal.rot_tol
            and geo.translation_distance(T, goal.goal_object_pose) <= goal.trans_tol)


@dataclass
class Trace:
    ee_poses: list = field(default_factory=list)
    object_poses: list = field(default_factory=list)
    attached: list = field(default_factory=list)
    commands: list = field(default_factory=list)

    def record(self, state, cmd):
        self.commands.append(cmd)
        self.ee_poses.append(state.ee_pose)
        self.object_poses.append(state.object_pose)
        self.attached.append(state.attached)

    def to_dict(self):
        return {
            "commands": [p.to_dict() for p in self.commands],
            "ee_poses": [p.to_dict() for p in self.ee_poses],
            "object_poses": [geo.transform_to_list(T) for T in self.object_poses],
            "attached": list(self.attached),
        }

    def equals(self, other):
        if len(self.commands) != len(other.commands):
            return False
        return (all(a.equals(b) for a, b in zip(self.commands, other.commands))
                and all(a.equals(b) for a, b in zip(self.ee_poses, other.ee_poses))
                and all(np.array_equal(a.matrix(), b.matrix())
                        for a, b in zip(self.object_poses, other.object_poses))
                and self.attached == other.attached)


def execute(episode, actions, error_model=ErrorModel(), goal=None):
    """Run a fixed action list; returns (trace, success flag, final state)."""
    state, _ = reset(episode, error_model)
    trace = Trace()
    for a in actions:
        state, _ = step(state, a)
        trace.record(state, a)
    goal = goal or GoalSpec.for_episode(episode)
    return trace, success(state, goal), state


def ground_truth_plan(episode: Episode):
    e1 = initial_grasp_pose(home_pose(), episode.points3d[episode.object_mask])
    return open_loop_plan(episode.gt_transforms, e1)


@dataclass
class Demo:
    episode_id: str
    observations: list  # raster seen before each action
    actions: list  # Poses
    plan: object  # EndEffectorPlan used at collection time
    tracks: np.ndarray = field(repr=False)
    goal_raster: np.ndarray = field(repr=False, default=None)
    step_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.observations) != len(self.actions):
            raise ValueError("observation/action length mismatch")
        if not self.step_ids:
            self.step_ids = list(range(len(self.actions)))

    def __len__(self):
        return len(self.actions)


def scripted_demo(episode: Episode, error_model: ErrorModel = ErrorModel(), plan=None, tracks=None):
    """Expert rollout from ground-truth transforms, grasp offset pre-compensated.

    ``plan``/``tracks`` record what the policy will be conditioned on; they
    default to the ground-truth plan and tracks.
    """
    gt = ground_truth_plan(episode)
    plan = gt if plan is None else plan
    tracks = episode.gt_tracks if tracks is None else tracks
    d = error_model.offset
    actions = []
    for i, pose in enumerate(gt.poses):
        if i <= gt.grasp_step:
            pose = Pose(pose.position - d, pose.orientation, pose.gripper)
        actions.append(pose)
    state, obs = reset(episode, error_model)
    observations = []
    for a in actions:
        observations.append(obs)
        state, obs = step(state, a)
    return Demo(episode.episode_id, observations, actions, plan, np.asarray(tracks),
                episode.goal_raster)
