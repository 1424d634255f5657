"""Fixed humanoid skeleton and forward kinematics.

World convention: Z is up, the body faces +Y at zero yaw. Bone offsets are
expressed in the parent joint's frame.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .rotations import rot6d_to_matrix_batch, rot_z


@dataclass(frozen=True)
class SkeletonSpec:
    joint_count: int
    parent_index: tuple
    rest_offsets: np.ndarray  # (J, 3) meters, parent frame
    foot_joint_ids: tuple  # (L heel, L toe, R heel, R toe)
    joint_names: tuple = field(default=())

    def __post_init__(self):
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        if offsets.shape != (self.joint_count, 3):
            raise ShapeMismatch("rest_offsets must be (J, 3)")
        object.__setattr__(self, "rest_offsets", offsets)
        if len(self.parent_index) != self.joint_count:
            raise ShapeMismatch("parent_index must have J entries")
        if self.parent_index[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.parent_index):
            if j > 0 and not 0 <= p < j:
                raise ValueError("parent_index must define a tree rooted at joint 0")
        if np.any(offsets[0] != 0.0):
            raise ValueError("root rest offset must be zero")

    def to_json(self):
        return json.dumps(
            {
                "joint_count": self.joint_count,
                "parent_index": list(self.parent_index),
                "rest_offsets": self.rest_offsets.tolist(),
                "foot_joint_ids": list(self.foot_joint_ids),
                "joint_names": list(self.joint_names),
            },
            indent=2,
        )

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return SkeletonSpec(
            joint_count=d["joint_count"],
            parent_index=tuple(d["parent_index"]),
            rest_offsets=np.array(d["rest_offsets"], dtype=np.float64),
            foot_joint_ids=tuple(d["foot_joint_ids"]),
            joint_names=tuple(d.get("joint_names", ())),
        )


_JOINT_NAMES = (
    "pelvis", "spine1", "spine2", "spine3", "neck", "head",
    "l_hip", "l_knee", "l_heel", "l_toe",
    "r_hip", "r_knee", "r_heel", "r_toe",
    "l_collar", "l_shoulder", "l_elbow", "l_wrist",
    "r_collar", "r_shoulder", "r_elbow", "r_wrist",
)

_PARENTS = (-1, 0, 1, 2, 3, 4, 0, 6, 7, 8, 0, 10, 11, 12, 3, 14, 15, 16, 3, 18, 19, 20)

# ~1.7 m tall human: pelvis at 0.87 m when standing with legs straight.
_OFFSETS = np.array(
    [
        [0.0, 0.0, 0.0],       # pelvis
        [0.0, 0.0, 0.12],      # spine1
        [0.0, 0.0, 0.14],      # spine2
        [0.0, 0.0, 0.14],      # spine3
        [0.0, 0.0, 0.12],      # neck
        [0.0, 0.0, 0.15],      # head
        [0.09, 0.0, -0.05],    # l_hip
        [0.0, 0.0, -0.40],     # l_knee
        [0.0, 0.0, -0.42],     # l_heel
        [0.0, 0.14, -0.02],    # l_toe
        [-0.09, 0.0, -0.05],   # r_hip
        [0.0, 0.0, -0.40],     # r_knee
        [0.0, 0.0, -0.42],     # r_heel
        [0.0, 0.14, -0.02],    # r_toe
        [0.08, 0.0, 0.10],     # l_collar
        [0.10, 0.0, 0.02],     # l_shoulder
        [0.26, 0.0, 0.0],      # l_elbow
        [0.25, 0.0, 0.0],      # l_wrist
        [-0.08, 0.0, 0.10],    # r_collar
        [-0.10, 0.0, 0.02],    # r_shoulder
        [-0.26, 0.0, 0.0],     # r_elbow
        [-0.25, 0.0, 0.0],     # r_wrist
    ]
)

# Upper/lower leg lengths used by the procedural gait IK.
THIGH_LEN = 0.40
SHANK_LEN = 0.42
HIP_HEIGHT = 0.87  # pelvis height with straight legs, heel on the floor
HEEL_CLEARANCE = 0.02  # heel joint sits this far above the surface when planted


def default_skeleton():
    """The canonical 22-joint desk-scale humanoid."""
    return SkeletonSpec(
        joint_count=22,
        parent_index=_PARENTS,
        rest_offsets=_OFFSETS.copy(),
        foot_joint_ids=(8, 9, 12, 13),
        joint_names=_JOINT_NAMES,
    )


def fk_world_positions(skeleton, rotmats, root_world, yaw=0.0):
    """Forward kinematics for a batch of frames.

    rotmats: (N, J, 3, 3) local joint rotations (root local rotation is
    relative to the sequence frame). root_world: (N, 3) or (3,) absolute root
    positions. A nonzero yaw rotates the whole chain about the root.
    Returns (N, J, 3) world joint positions.
    """
    rotmats = np.asarray(rotmats, dtype=np.float64)
    single = rotmats.ndim == 3
    if single:
        rotmats = rotmats[None]
    n, j = rotmats.shape[0], skeleton.joint_count
    if rotmats.shape[1] != j:
        raise ShapeMismatch(f"expected {j} joints, got {rotmats.shape[1]}")
    root_world = np.broadcast_to(np.asarray(root_world, dtype=np.float64), (n, 3))

    yaw_rot = rot_z(yaw)
    world_rot = np.empty((n, j, 3, 3))
    pos = np.empty((n, j, 3))
    world_rot[:, 0] = yaw_rot @ rotmats[:, 0]
    pos[:, 0] = root_world
    for c in range(1, j):
        p = skeleton.parent_index[c]
        world_rot[:, c] = world_rot[:, p] @ rotmats[:, c]
        pos[:, c] = pos[:, p] + np.einsum("nij,j->ni", world_rot[:, p], skeleton.rest_offsets[c])
    return (pos[0], world_rot[0]) if single else (pos, world_rot)


def forward_kinematics(skeleton, pose_rot6d, root_world, yaw=0.0):
    """FK from a (J, 6) block of 6D local rotations; returns (J, 3) positions."""
    rotmats = rot6d_to_matrix_batch(np.asarray(pose_rot6d).reshape(skeleton.joint_count, 6))
    pos, _ = fk_world_positions(skeleton, rotmats, np.asarray(root_world, dtype=np.float64), yaw)
    return pos
