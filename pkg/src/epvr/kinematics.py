"""Forward kinematics: rotations to world joint positions.

The skeleton is posed in a local frame by chaining parent rotations and
rest offsets from the root, then rigidly translated so the head joint
coincides with the tracked headset position. The body's orientation
comes from the predicted root rotation; the headset orientation is only
applied when explicitly requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import ZeroLengthBone

_MIN_BONE = 1e-9


@dataclass(frozen=True)
class WorldAnchor:
    """Tracked headset pose the skeleton is pinned to."""

    head_position: np.ndarray
    head_orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "head_position", np.asarray(self.head_position, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self, "head_orientation", np.asarray(self.head_orientation, dtype=np.float64).reshape(6)
        )


def global_rotations(pose: core.FullBodyPose, tree: core.KinematicTree):
    """Per-joint world rotation matrices (ancestor chain products)."""
    locals_ = core.rot6d_to_matrix(pose.stacked_rotations())
    out = np.empty_like(locals_)
    out[0] = locals_[0]
    parent = tree.parent
    for level in tree.depth_levels:
        out[level] = out[parent[level]] @ locals_[level]
    return out


def forward_kinematics(pose: core.FullBodyPose, tree: core.KinematicTree,
                       anchor: WorldAnchor, align_head_orientation: bool = False,
                       anchor_joint: int | None = None):
    """World positions (J x 3) of every joint.

    The chain is accumulated from the root, then translated as one rigid
    body so the anchor joint (the head by default) lands on
    anchor.head_position. When align_head_orientation is set, the tracked
    headset orientation is applied as a global pre-rotation of the root.
    """
    locals_ = core.rot6d_to_matrix(pose.stacked_rotations())
    if align_head_orientation:
        locals_[0] = core.rot6d_to_matrix(anchor.head_orientation) @ locals_[0]
    n = tree.joint_count
    parent = tree.parent
    offsets = tree.rest_offset
    rot = np.empty((n, 3, 3))
    raw = np.empty((n, 3))
    rot[0] = locals_[0]
    raw[0] = 0.0
    for level in tree.depth_levels:
        par = parent[level]
        parent_rot = rot[par]
        rot[level] = parent_rot @ locals_[level]
        raw[level] = raw[par] + np.einsum("kij,kj->ki", parent_rot, offsets[level])
    if anchor_joint is None:
        anchor_joint = tree.joint_index("head")
    rel = raw - raw[anchor_joint]
    return rel + anchor.head_position


def bone_vectors(positions, tree: core.KinematicTree):
    """Per-bone (length, unit direction) from parent to child.

    Returns (lengths (J-1,), directions (J-1, 3)); raises ZeroLengthBone
    when any bone collapses below 1e-9 m.
    """
    positions = np.asarray(positions, dtype=np.float64)
    child = np.arange(1, tree.joint_count)
    diff = positions[child] - positions[tree.parent[child]]
    lengths = np.linalg.norm(diff, axis=1)
    if np.any(lengths < _MIN_BONE):
        bad = int(child[np.argmin(lengths)])
        raise ZeroLengthBone(f"bone into joint {bad} has near-zero length")
    return lengths, diff / lengths[:, None]
