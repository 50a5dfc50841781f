"""Quaternions, rigid transforms and kinematic-tree traversal.

Pose is parameterized externally with per-joint axis-angle vectors. Unit
quaternions (``w, x, y, z`` order, canonical hemisphere ``w >= 0``) are only used
internally, as the features driving the pose-corrective blendshapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidModelError

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])

# Below these angles the closed forms lose precision and the Taylor series take over.
_SMALL_ANGLE = 1e-4
_SMALL_ANGLE_DERIV = 1e-2


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Rooted joint hierarchy plus the neighbor sets conditioning the pose correctives.

    ``parents[0]`` is ``-1`` (the root). ``neighbor_sets[j]`` lists the joints whose
    rotations feed joint ``j``'s corrective blendshape; it may be empty for the root.
    """

    parents: tuple[int, ...]
    joint_names: tuple[str, ...]
    neighbor_sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "joint_names", tuple(str(n) for n in self.joint_names))
        object.__setattr__(
            self, "neighbor_sets", tuple(tuple(int(k) for k in ne) for ne in self.neighbor_sets)
        )
        self.validate()

    def validate(self) -> None:
        k = len(self.parents)
        if k < 1:
            raise InvalidModelError("kinematic tree has no joints")
        if len(self.joint_names) != k:
            raise InvalidModelError(f"{len(self.joint_names)} joint names for {k} joints")
        if len(self.neighbor_sets) != k:
            raise InvalidModelError(f"{len(self.neighbor_sets)} neighbor sets for {k} joints")
        if self.parents[0] != -1:
            raise InvalidModelError("joint 0 must be the root (parent -1)")
        for j in range(1, k):
            p = self.parents[j]
            if p < 0:
                raise InvalidModelError(f"joint {j} is a second root")
            if p >= j:
                raise InvalidModelError(f"joint {j} has parent {p}; parents must precede children")
        for j, ne in enumerate(self.neighbor_sets):
            if j > 0 and not ne:
                raise InvalidModelError(f"joint {j} has an empty neighbor set")
            if len(set(ne)) != len(ne):
                raise InvalidModelError(f"joint {j} has duplicate neighbors")
            for n in ne:
                if not 0 <= n < k:
                    raise InvalidModelError(f"joint {j} neighbor {n} out of range")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def parent_array(self) -> np.ndarray:
        return np.asarray(self.parents, dtype=np.int64)

    def children(self, j: int) -> list[int]:
        return [c for c in range(j + 1, self.n_joints) if self.parents[c] == j]

    def ancestors(self, j: int) -> list[int]:
        """Ancestors of ``j`` from its parent up to the root."""
        out = []
        p = self.parents[j]
        while p >= 0:
            out.append(p)
            p = self.parents[p]
        return out

    def descendants(self, j: int) -> list[int]:
        inside = {j}
        for c in range(j + 1, self.n_joints):
            if self.parents[c] in inside:
                inside.add(c)
        inside.discard(j)
        return sorted(inside)

    @classmethod
    def with_default_neighbors(cls, parents: Sequence[int], joint_names: Sequence[str] | None = None):
        """Tree whose neighbor sets are ``{j, parent(j), children(j)}`` minus the root.

        Keeping the root out of every neighbor set makes the correctives invariant
        to global orientation.
        """
        parents = [int(p) for p in parents]
        k = len(parents)
        if joint_names is None:
            joint_names = [f"joint_{j}" for j in range(k)]
        neighbors: list[tuple[int, ...]] = [()]
        for j in range(1, k):
            ne = [j]
            if parents[j] > 0:
                ne.append(parents[j])
            ne.extend(c for c in range(j + 1, k) if parents[c] == j)
            neighbors.append(tuple(ne))
        return cls(tuple(parents), tuple(joint_names), tuple(neighbors))


@dataclass(frozen=True, eq=False)
class PoseState:
    """Per-joint axis-angle rotations (radians) and a global translation."""

    joint_rotations: np.ndarray
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        trans = np.array(self.global_translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidArgumentError("pose contains non-finite values")
        if np.any(np.linalg.norm(rot, axis=1) >= 2 * np.pi):
            raise InvalidArgumentError("axis-angle magnitude must be below 2*pi")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "joint_rotations", rot)
        object.__setattr__(self, "global_translation", trans)

    @classmethod
    def rest(cls, n_joints: int) -> "PoseState":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @property
    def n_joints(self) -> int:
        return self.joint_rotations.shape[0]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise InvalidArgumentError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )


def _check_axis_angle(aa: np.ndarray) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    if aa.shape[-1] != 3:
        raise InvalidArgumentError(f"axis-angle must have trailing dimension 3, got {aa.shape}")
    if not np.all(np.isfinite(aa)):
        raise InvalidArgumentError("axis-angle contains non-finite values")
    return aa


def quaternions_with_jacobian(aa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical unit quaternions and their derivatives for a stack of axis-angles.

    Returns ``q`` with shape ``(..., 4)`` and ``dq`` with shape ``(..., 4, 3)`` where
    ``dq[..., c, a] = d q_c / d aa_a``.
    """
    aa = _check_axis_angle(aa)
    angle = np.linalg.norm(aa, axis=-1)
    half = 0.5 * angle
    cos_h = np.cos(half)
    sin_h = np.sin(half)
    safe = np.where(angle < _SMALL_ANGLE, 1.0, angle)
    # sin(a/2)/a and its scaled derivative (1/a) d/da [sin(a/2)/a]
    s = np.where(angle < _SMALL_ANGLE, 0.5 - angle**2 / 48.0, sin_h / safe)
    safe_d = np.where(angle < _SMALL_ANGLE_DERIV, 1.0, angle)
    g = np.where(
        angle < _SMALL_ANGLE_DERIV,
        -1.0 / 24.0 + angle**2 / 960.0,
        (0.5 * safe_d * np.cos(0.5 * safe_d) - np.sin(0.5 * safe_d)) / safe_d**3,
    )

    q = np.empty(aa.shape[:-1] + (4,))
    q[..., 0] = cos_h
    q[..., 1:] = s[..., None] * aa

    dq = np.empty(aa.shape[:-1] + (4, 3))
    dq[..., 0, :] = -0.5 * s[..., None] * aa
    dq[..., 1:, :] = s[..., None, None] * np.eye(3) + g[..., None, None] * (
        aa[..., :, None] * aa[..., None, :]
    )

    flip = cos_h < 0.0
    if np.any(flip):
        q = np.where(flip[..., None], -q, q)
        dq = np.where(flip[..., None, None], -dq, dq)
    return q, dq


def axis_angle_to_quaternion(aa) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for an axis-angle vector.

    Accepts a single 3-vector or any stack ``(..., 3)``.
    """
    q, _ = quaternions_with_jacobian(aa)
    return q


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - z * w)
    r[..., 0, 2] = 2 * (x * z + y * w)
    r[..., 1, 0] = 2 * (x * y + z * w)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - x * w)
    r[..., 2, 0] = 2 * (x * z - y * w)
    r[..., 2, 1] = 2 * (y * z + x * w)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quaternion_to_matrix_derivative(q: np.ndarray) -> np.ndarray:
    """``d R / d q`` for the polynomial map above, shape ``(..., 3, 3, 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    d = np.empty(q.shape[:-1] + (3, 3, 4))
    # columns: d/dw, d/dx, d/dy, d/dz
    d[..., 0, 0, :] = np.stack([zero, zero, -4 * y, -4 * z], axis=-1)
    d[..., 0, 1, :] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1)
    d[..., 0, 2, :] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1)
    d[..., 1, 0, :] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1)
    d[..., 1, 1, :] = np.stack([zero, -4 * x, zero, -4 * z], axis=-1)
    d[..., 1, 2, :] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1)
    d[..., 2, 0, :] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1)
    d[..., 2, 1, :] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1)
    d[..., 2, 2, :] = np.stack([zero, -4 * x, -4 * y, zero], axis=-1)
    return d


def rodrigues(aa) -> np.ndarray:
    """Rotation matrix from axis-angle by the Rodrigues formula (no quaternions)."""
    aa = _check_axis_angle(aa)
    angle = np.linalg.norm(aa, axis=-1)
    safe = np.where(angle < 1e-12, 1.0, angle)
    axis = aa / safe[..., None]
    kx, ky, kz = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(kx)
    skew = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    sin_a = np.sin(angle)[..., None, None]
    cos_a = np.cos(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), skew.shape)
    return eye + sin_a * skew + (1.0 - cos_a) * (skew @ skew)


def pose_feature(pose: PoseState, tree: KinematicTree, j: int) -> np.ndarray:
    """Corrective-blendshape feature of joint ``j``: ``q(theta_k) - q_identity`` over ``ne(j)``."""
    if not 0 <= j < tree.n_joints:
        raise InvalidArgumentError(f"joint {j} out of range for {tree.n_joints} joints")
    ne = tree.neighbor_sets[j]
    if not ne:
        raise InvalidArgumentError(f"joint {j} has no corrective blendshape (root)")
    if pose.n_joints != tree.n_joints:
        raise InvalidArgumentError("pose and tree disagree on the number of joints")
    q = axis_angle_to_quaternion(pose.joint_rotations[list(ne)])
    return (q - IDENTITY_QUATERNION).ravel()


def forward_kinematics(
    rotations: np.ndarray, joints: np.ndarray, parents: Sequence[int], translation: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World rotations ``(K, 3, 3)`` and translations ``(K, 3)`` mapping rest space to posed space.

    Joint ``k`` rotates about its rest location ``joints[k]``; the root additionally
    carries ``translation``.
    """
    k = len(parents)
    rw = np.empty((k, 3, 3))
    tw = np.empty((k, 3))
    rw[0] = rotations[0]
    tw[0] = joints[0] - rotations[0] @ joints[0] + translation
    for c in range(1, k):
        p = parents[c]
        rw[c] = rw[p] @ rotations[c]
        tw[c] = rw[p] @ (joints[c] - rotations[c] @ joints[c]) + tw[p]
    return rw, tw


def world_transforms(pose: PoseState, joints: np.ndarray, tree: KinematicTree) -> list[RigidTransform]:
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (tree.n_joints, 3):
        raise InvalidArgumentError(f"joints must have shape ({tree.n_joints}, 3), got {joints.shape}")
    if not np.all(np.isfinite(joints)):
        raise InvalidArgumentError("joints contain non-finite values")
    if pose.n_joints != tree.n_joints:
        raise InvalidArgumentError("pose and tree disagree on the number of joints")
    rot = quaternion_to_matrix(axis_angle_to_quaternion(pose.joint_rotations))
    rw, tw = forward_kinematics(rot, joints, tree.parents, pose.global_translation)
    return [RigidTransform(r, t) for r, t in zip(rw, tw)]
