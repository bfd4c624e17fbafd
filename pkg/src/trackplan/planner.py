"""Turn an object transform trajectory into end-effector poses.

The gripper first moves to the grasp pose e1 (open), closes, and then
follows ``a_t = T_t e1`` for every recovered transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import RigidTransform


class EmptyPointSet(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    orientation: np.ndarray
    gripper: float = 0.0  # 0 open, 1 closed

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        R = np.array(self.orientation, dtype=np.float64).reshape(3, 3)
        p.flags.writeable = False
        R.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", R)
        object.__setattr__(self, "gripper", float(self.gripper))

    def as_transform(self):
        return RigidTransform(self.orientation, self.position)

    @classmethod
    def from_transform(cls, T: RigidTransform, gripper=0.0):
        return cls(T.rotation, T.translation, gripper)

    def with_gripper(self, g):
        return Pose(self.position, self.orientation, g)

    def equals(self, other):
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation)
                and self.gripper == other.gripper)

    def to_dict(self):
        return {"position": self.position.tolist(), "orientation": self.orientation.tolist(),
                "gripper": self.gripper}

    @classmethod
    def from_dict(cls, d):
        return cls(d["position"], d["orientation"], d["gripper"])


@dataclass
class EndEffectorPlan:
    poses: list
    grasp_step: int = 1

    def __post_init__(self):
        g = [p.gripper for p in self.poses]
        if any(b < a for a, b in zip(g, g[1:])):
            raise ValueError("gripper must be non-decreasing along the plan")

    def __len__(self):
        return len(self.poses)

    def window(self, t, h):
        """Poses t..t+h-1, tail-padded by repeating the last pose."""
        last = len(self.poses) - 1
        return [self.poses[min(t + i, last)] for i in range(h)]

    def to_dict(self):
        return {"grasp_step": self.grasp_step, "poses": [p.to_dict() for p in self.poses]}

    @classmethod
    def from_dict(cls, d):
        return cls([Pose.from_dict(p) for p in d["poses"]], d["grasp_step"])


def initial_grasp_pose(e0: Pose, moving_points3d) -> Pose:
    pts = np.asarray(moving_points3d, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointSet("no moving points to grasp")
    return Pose(pts.mean(axis=0), e0.orientation, 1.0)


def open_loop_plan(transforms, e1: Pose) -> EndEffectorPlan:
    """Approach (open), grasp (closed), then ``T_t e1`` for each transform.

    ``transforms`` may be a TransformTrajectory or a list of RigidTransforms.
    """
    transforms = getattr(transforms, "transforms", transforms)
    approach = e1.with_gripper(0.0)
    grasp = e1.with_gripper(1.0)
    poses = [approach, grasp]
    for T in transforms:
        poses.append(Pose(geo.apply(T, e1.position), T.rotation @ e1.orientation, 1.0))
    return EndEffectorPlan(poses, grasp_step=1)
