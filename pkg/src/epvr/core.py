"""Foundational types and rotation/transform math shared by every stage.

Conventions used throughout the package:

* right-handed coordinates, y up, meters and seconds
* rotations on the wire and in descriptors use the 6D representation:
  the first two columns of the rotation matrix, stored column-by-column
  as ``[c0x, c0y, c0z, c1x, c1y, c1z]``
* the skeleton is the 22-joint SMPL main-body subset (no palm joints),
  pelvis first, parents before children
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DegenerateRotation, NotARotation

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_COLUMN_EPS = 1e-8
_ORTHO_TOL = 1e-6


def rot6d_to_matrix(r):
    """Decode 6D rotations into orthonormal matrices via Gram-Schmidt.

    Accepts shape (..., 6), returns (..., 3, 3). The first stored column
    is normalized, the second is made orthogonal to it, the third is
    their cross product, so the result always has determinant +1.

    Raises DegenerateRotation when the first column is near zero or the
    two columns are parallel within 1e-8.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DegenerateRotation(f"expected 6 components, got shape {r.shape}")
    a = r[..., 0:3]
    b = r[..., 3:6]
    a_norm = np.sqrt(np.einsum("...i,...i->...", a, a))[..., None]
    if not np.all(a_norm > _COLUMN_EPS):  # catches NaN/Inf-poisoned norms too
        raise DegenerateRotation("first column norm below 1e-8 (or non-finite)")
    x = a / a_norm
    b_perp = b - np.einsum("...i,...i->...", x, b)[..., None] * x
    b_norm = np.sqrt(np.einsum("...i,...i->...", b_perp, b_perp))[..., None]
    if not np.all(b_norm > _COLUMN_EPS):
        raise DegenerateRotation("columns parallel within 1e-8 (or non-finite)")
    y = b_perp / b_norm
    z = _cross(x, y)
    out = np.stack([x, y, z], axis=-1)
    if not np.isfinite(out.sum()):
        raise DegenerateRotation("non-finite 6D rotation input")
    return out


def _cross(x, y):
    """Componentwise cross product over trailing axis 3 (faster than np.cross
    for the small batches used here)."""
    out = np.empty_like(x)
    out[..., 0] = x[..., 1] * y[..., 2] - x[..., 2] * y[..., 1]
    out[..., 1] = x[..., 2] * y[..., 0] - x[..., 0] * y[..., 2]
    out[..., 2] = x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]
    return out


def matrix_to_rot6d(matrix):
    """Extract the 6D representation (first two columns) of a rotation.

    Accepts shape (..., 3, 3); raises NotARotation if the input is not
    orthonormal with determinant +1 within 1e-6.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise NotARotation(f"expected 3x3 matrix, got shape {m.shape}")
    gram = m @ np.swapaxes(m, -1, -2)
    eye = np.eye(3)
    if not np.all(np.abs(gram - eye) <= _ORTHO_TOL):
        raise NotARotation("matrix is not orthonormal within 1e-6")
    if np.any(np.linalg.det(m) < 0.0):
        raise NotARotation("matrix has negative determinant")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def geodesic_angle(ra, rb):
    """Angle in degrees between two rotation matrices, in [0, 180]."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    trace = np.einsum("...ij,...ij->...", ra, rb)
    cos = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(cos))


@dataclass(frozen=True)
class DevicePose:
    """Position and orientation (plus rates) of one tracked device.

    Velocities default to zero; streams that only carry poses get them
    filled in by descriptor.derive_velocities.
    """

    timestamp: float
    position: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        object.__setattr__(self, "position", _freeze(self.position, 3))
        object.__setattr__(self, "orientation", _freeze(self.orientation, 6))
        object.__setattr__(self, "linear_velocity", _freeze(self.linear_velocity, 3))
        object.__setattr__(self, "angular_velocity", _freeze(self.angular_velocity, 6))

    def rotation_matrix(self):
        return rot6d_to_matrix(self.orientation)


def _freeze(values, length):
    arr = np.array(values, dtype=np.float64).reshape(length)
    arr.flags.writeable = False
    return arr


def relative_pose(anchor: DevicePose, target: DevicePose):
    """Express target's pose in the anchor device's frame.

    Returns (position, orientation6d) with position = Ra^T (pt - pa) and
    orientation the 6D form of Ra^T Rt.
    """
    ra = rot6d_to_matrix(anchor.orientation)
    rt = rot6d_to_matrix(target.orientation)
    rel_p = ra.T @ (target.position - anchor.position)
    rel_r = ra.T @ rt
    return rel_p, matrix_to_rot6d(rel_r)


@dataclass(frozen=True)
class FullBodyPose:
    """Root global rotation plus 21 parent-relative rotations (6D each).

    positions, when present, are the 22x3 world joint positions derived
    by forward kinematics (or adjusted afterwards by the pose optimizer).
    """

    root_rotation: np.ndarray
    local_rotations: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "root_rotation", _freeze(self.root_rotation, 6))
        locals_ = np.array(self.local_rotations, dtype=np.float64).reshape(21, 6)
        locals_.flags.writeable = False
        object.__setattr__(self, "local_rotations", locals_)
        if self.positions is not None:
            pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
            pos.flags.writeable = False
            object.__setattr__(self, "positions", pos)

    def stacked_rotations(self):
        """All 22 joint rotations as a (22, 6) array, root first."""
        return np.concatenate([self.root_rotation[None, :], self.local_rotations], axis=0)

    def with_positions(self, positions):
        return FullBodyPose(self.root_rotation, self.local_rotations, positions)


def rest_pose():
    """Identity rotations for every joint, no positions."""
    return FullBodyPose(IDENTITY_6D, np.tile(IDENTITY_6D, (21, 1)))


ROOT_PARENT = -1


@dataclass(frozen=True)
class KinematicTree:
    """Parent indices, rest-pose bone offsets, and adjacency for a skeleton.

    The shipped default is the 22-joint SMPL main-body subset; smaller
    trees (chains) are accepted as long as joint 0 is the only root and
    parents precede children.
    """

    names: tuple
    parent: np.ndarray
    rest_offset: np.ndarray

    def __post_init__(self):
        parent = np.array(self.parent, dtype=np.int64)
        offsets = np.array(self.rest_offset, dtype=np.float64).reshape(len(parent), 3)
        if len(self.names) != len(parent):
            raise ValueError("names and parent arrays disagree on joint count")
        if parent[0] != ROOT_PARENT:
            raise ValueError("joint 0 must be the root")
        for i in range(1, len(parent)):
            if not 0 <= parent[i] < i:
                raise ValueError(f"joint {i} parent must precede it (got {parent[i]})")
            if np.linalg.norm(offsets[i]) <= 0.0:
                raise ValueError(f"joint {i} rest offset must have positive length")
        parent.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_offset", offsets)
        depth = np.zeros(len(parent), dtype=np.int64)
        for i in range(1, len(parent)):
            depth[i] = depth[parent[i]] + 1
        levels = tuple(
            np.nonzero(depth == d)[0] for d in range(1, int(depth.max()) + 1)
        ) if len(parent) > 1 else ()
        object.__setattr__(self, "depth_levels", levels)

    @property
    def joint_count(self):
        return len(self.parent)

    @property
    def neighbors(self):
        """Adjacency sets: joints directly linked to each joint."""
        adj = [set() for _ in range(self.joint_count)]
        for child in range(1, self.joint_count):
            p = int(self.parent[child])
            adj[child].add(p)
            adj[p].add(child)
        return tuple(tuple(sorted(s)) for s in adj)

    @property
    def edges(self):
        """(child, parent) index pairs for every bone."""
        return tuple((i, int(self.parent[i])) for i in range(1, self.joint_count))

    def joint_index(self, name):
        return self.names.index(name)

    def rest_lengths(self):
        return np.linalg.norm(self.rest_offset[1:], axis=1)

    def save(self, path):
        doc = {
            "format": "epvr-skeleton",
            "version": 1,
            "coordinate_convention": {"handedness": "right", "up": "y"},
            "units": "meters",
            "joints": [
                {
                    "name": self.names[i],
                    "parent": int(self.parent[i]),
                    "offset": [float(v) for v in self.rest_offset[i]],
                }
                for i in range(self.joint_count)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path):
        with open(path) as fh:
            doc = json.load(fh)
        return _tree_from_doc(doc)


def _tree_from_doc(doc):
    if doc.get("format") != "epvr-skeleton":
        raise ValueError("not a skeleton definition file")
    joints = doc["joints"]
    return KinematicTree(
        names=tuple(j["name"] for j in joints),
        parent=[j["parent"] for j in joints],
        rest_offset=[j["offset"] for j in joints],
    )


def default_tree() -> KinematicTree:
    """The shipped 22-joint skeleton with average adult proportions."""
    text = resources.files("epvr.data").joinpath("skeleton.json").read_text()
    return _tree_from_doc(json.loads(text))


# Anchor joints: the three with tracked ground-truth positions at runtime.
HEAD_JOINT = 15
LEFT_HAND_JOINT = 20
RIGHT_HAND_JOINT = 21
OBSERVED_JOINTS = (HEAD_JOINT, LEFT_HAND_JOINT, RIGHT_HAND_JOINT)


def axis_angle_matrix(axis, angle_rad):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.eye(3)
    x, y, z = axis / n
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def axis_angle_rot6d(axis, angle_rad):
    return matrix_to_rot6d(axis_angle_matrix(axis, angle_rad))
