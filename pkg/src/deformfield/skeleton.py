"""Articulated kinematic chain: forward kinematics and per-bone relative
transforms between pose spaces.

Canonical pose = zero joint rotations and zero root translation; synthetic
figures are authored in this pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SkeletonError(Exception):
    pass


def axis_angle_to_matrix(rvec):
    """Rodrigues formula; rvec (3,) axis-angle in radians."""
    rvec = np.asarray(rvec, dtype=np.float64)
    theta = np.linalg.norm(rvec)
    if theta < 1e-12:
        K = np.array([[0, -rvec[2], rvec[1]],
                      [rvec[2], 0, -rvec[0]],
                      [-rvec[1], rvec[0], 0]])
        return np.eye(3) + K  # first-order, exact at theta=0
    axis = rvec / theta
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def _se3(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


@dataclass
class Skeleton:
    """Tree of K joints; joint 0 is the root.

    ``bone_tip`` optionally gives each bone's far endpoint in canonical
    space (used for bounding boxes and weight-field priors); when absent
    it is derived from child joints.
    """

    parent: list  # parent[k] = parent joint index; parent[0] = -1
    rest_offset: np.ndarray  # (K,3) translation from parent in canonical pose
    bone_tip: np.ndarray = None  # optional (K,3) canonical bone endpoints

    def __post_init__(self):
        self.rest_offset = np.asarray(self.rest_offset, dtype=np.float64).reshape(-1, 3)
        if self.bone_tip is not None:
            self.bone_tip = np.asarray(self.bone_tip, dtype=np.float64).reshape(-1, 3)
        K = len(self.parent)
        if K < 1 or self.parent[0] != -1:
            raise SkeletonError("joint 0 must be the root (parent -1)")
        for k in range(1, K):
            if not (0 <= self.parent[k] < k):
                raise SkeletonError("parent indices must form a tree (parents precede children)")
        if self.rest_offset.shape[0] != K:
            raise SkeletonError("rest_offset count must match joint count")

    @property
    def num_joints(self):
        return len(self.parent)

    def rest_joint_positions(self):
        """Joint positions in the canonical pose."""
        return forward_kinematics(self, Pose.identity(self.num_joints))[:, :3, 3]


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    root_translation: np.ndarray  # (3,)
    joint_rotation: np.ndarray  # (K,3) axis-angle

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        self.joint_rotation = np.asarray(self.joint_rotation, dtype=np.float64).reshape(-1, 3)
        if not (np.all(np.isfinite(self.root_translation))
                and np.all(np.isfinite(self.joint_rotation))):
            raise SkeletonError("pose parameters must be finite")

    @classmethod
    def identity(cls, num_joints):
        return cls(np.zeros(3), np.zeros((num_joints, 3)))

    @property
    def num_joints(self):
        return self.joint_rotation.shape[0]


def forward_kinematics(skeleton: Skeleton, pose: Pose):
    """Per-bone world transforms G_k, shape (K,4,4).

    G_k = G_parent(k) @ T(rest_offset_k) @ R(joint_rotation_k); the root
    additionally composes the pose's root translation.
    """
    K = skeleton.num_joints
    if pose.num_joints != K:
        raise SkeletonError(f"pose has {pose.num_joints} joints, skeleton has {K}")
    G = np.zeros((K, 4, 4))
    for k in range(K):
        local = _se3(axis_angle_to_matrix(pose.joint_rotation[k]), skeleton.rest_offset[k])
        if k == 0:
            G[k] = _se3(np.eye(3), pose.root_translation) @ local
        else:
            G[k] = G[skeleton.parent[k]] @ local
    return G


def relative_transforms(pose_a: Pose, pose_b: Pose, skeleton: Skeleton):
    """BoneTransformSet M^{a2b}, shape (K,4,4): M_k = G_k(b) @ G_k(a)^-1."""
    Ga = forward_kinematics(skeleton, pose_a)
    Gb = forward_kinematics(skeleton, pose_b)
    K = skeleton.num_joints
    M = np.zeros((K, 4, 4))
    for k in range(K):
        R = Ga[k, :3, :3]
        t = Ga[k, :3, 3]
        inv = _se3(R.T, -R.T @ t)
        M[k] = Gb[k] @ inv
    return M


def transform_points(M, pts):
    """Apply one SE(3) (4,4) to points (...,3)."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ M[:3, :3].T + M[:3, 3]


# Default desk-scale humanoid: 9 joints.
#   0 pelvis (root), 1 spine, 2 head, 3/4 left upper/lower arm,
#   5/6 right upper/lower arm, 7 left leg, 8 right leg.
HUMANOID_PARENT = [-1, 0, 1, 1, 3, 1, 5, 0, 0]
HUMANOID_OFFSET = np.array([
    [0.00, 0.95, 0.00],   # pelvis above ground
    [0.00, 0.15, 0.00],   # spine
    [0.00, 0.35, 0.00],   # head base (neck)
    [0.18, 0.30, 0.00],   # left shoulder
    [0.27, 0.00, 0.00],   # left elbow
    [-0.18, 0.30, 0.00],  # right shoulder
    [-0.27, 0.00, 0.00],  # right elbow
    [0.10, -0.05, 0.00],  # left hip
    [-0.10, -0.05, 0.00],  # right hip
])


HUMANOID_TIP = np.array([
    [0.00, 0.88, 0.00],   # pelvis capsule bottom
    [0.00, 1.42, 0.00],   # torso top
    [0.00, 1.60, 0.00],   # head top
    [0.45, 1.40, 0.00],   # left elbow
    [0.70, 1.40, 0.00],   # left wrist
    [-0.45, 1.40, 0.00],  # right elbow
    [-0.70, 1.40, 0.00],  # right wrist
    [0.10, 0.06, 0.00],   # left ankle
    [-0.10, 0.06, 0.00],  # right ankle
])


def default_humanoid() -> Skeleton:
    return Skeleton(parent=list(HUMANOID_PARENT), rest_offset=HUMANOID_OFFSET.copy(),
                    bone_tip=HUMANOID_TIP.copy())
