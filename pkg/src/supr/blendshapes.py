"""Additive corrective offsets: linear (PCA) shape/expression spaces and sparse pose correctives."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, InvalidModelError
from .kinematics import IDENTITY_QUATERNION, KinematicTree, PoseState, axis_angle_to_quaternion


@dataclass(frozen=True, eq=False)
class LinearShapeSpace:
    """``offsets(c) = mean_offset + basis @ c`` over all ``N`` vertices.

    ``basis`` has shape ``(N, 3, S)``.
    """

    basis: np.ndarray
    mean_offset: np.ndarray | None = None

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 3 or basis.shape[1] != 3:
            raise InvalidModelError(f"shape basis must be (N, 3, S), got {basis.shape}")
        if basis.shape[2] < 1:
            raise InvalidModelError("shape basis needs at least one component")
        if not np.all(np.isfinite(basis)):
            raise InvalidModelError("shape basis contains non-finite values")
        mean = self.mean_offset
        mean = np.zeros(basis.shape[:2]) if mean is None else np.asarray(mean, dtype=np.float64)
        if mean.shape != basis.shape[:2]:
            raise InvalidModelError(f"mean offset shape {mean.shape} does not match basis {basis.shape}")
        if not np.all(np.isfinite(mean)):
            raise InvalidModelError("mean offset contains non-finite values")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean_offset", mean)

    @property
    def n_vertices(self) -> int:
        return self.basis.shape[0]

    @property
    def component_count(self) -> int:
        return self.basis.shape[2]

    @cached_property
    def flat_basis(self) -> np.ndarray:
        return self.basis.reshape(-1, self.component_count)

    def check_coeffs(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs if coeffs is not None else [], dtype=np.float64).ravel()
        if c.size > self.component_count:
            raise InvalidArgumentError(
                f"{c.size} coefficients given for a space with {self.component_count} components"
            )
        if not np.all(np.isfinite(c)):
            raise InvalidArgumentError("coefficients contain non-finite values")
        return c

    def offsets(self, coeffs) -> np.ndarray:
        c = self.check_coeffs(coeffs)
        n = c.size
        if n == 0:
            return self.mean_offset.copy()
        return self.mean_offset + (self.flat_basis[:, :n] @ c).reshape(-1, 3)

    def restrict(self, vertices: np.ndarray) -> "LinearShapeSpace":
        return LinearShapeSpace(self.basis[vertices], self.mean_offset[vertices])


def shape_offsets(space: LinearShapeSpace, coeffs) -> np.ndarray:
    """Offsets of a linear space for a (possibly truncated, zero-padded) coefficient vector."""
    return space.offsets(coeffs)


@dataclass(frozen=True, eq=False)
class PoseBlock:
    """The corrective of one joint, restricted to the vertices it activates.

    ``coeffs[i, :, :]`` maps the joint's quaternion feature to a 3D offset of
    ``vertices[i]``; ``weights[i]`` is that vertex's activation.
    """

    vertices: np.ndarray
    weights: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.int64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] != v.size or c.shape[1] != 3:
            raise InvalidModelError(f"coefficient block shape {c.shape} does not match {v.size} vertices")
        if w.size != v.size:
            raise InvalidModelError("activation weights and vertex list differ in length")
        if np.any(w == 0.0) or not np.all(np.isfinite(w)):
            raise InvalidModelError("stored activation weights must be finite and nonzero")
        if not np.all(np.isfinite(c)):
            raise InvalidModelError("coefficient block contains non-finite values")
        if np.unique(v).size != v.size:
            raise InvalidModelError("duplicate vertices in an activation set")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "coeffs", c)

    @property
    def feature_width(self) -> int:
        return self.coeffs.shape[2]

    def folded(self) -> np.ndarray:
        return self.weights[:, None, None] * self.coeffs


@dataclass(frozen=True, eq=False)
class SparsePoseBlendshapes:
    n_vertices: int
    blocks: Mapping[int, PoseBlock] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "blocks", {int(j): b for j, b in sorted(self.blocks.items())})
        for j, b in self.blocks.items():
            if b.vertices.size and (b.vertices.min() < 0 or b.vertices.max() >= self.n_vertices):
                raise InvalidModelError(f"joint {j} activates vertices out of range")

    def validate(self, tree: KinematicTree) -> None:
        for j, b in self.blocks.items():
            if not 0 <= j < tree.n_joints:
                raise InvalidModelError(f"pose block for unknown joint {j}")
            width = 4 * len(tree.neighbor_sets[j])
            if width == 0 or b.feature_width != width:
                raise InvalidModelError(
                    f"joint {j} block has feature width {b.feature_width}, expected {width}"
                )

    def activation(self, j: int) -> np.ndarray:
        """Dense activation vector ``A_j`` (zero where not stored)."""
        a = np.zeros(self.n_vertices)
        b = self.blocks.get(j)
        if b is not None:
            a[b.vertices] = b.weights
        return a

    @cached_property
    def column_offsets(self) -> dict[int, int]:
        out, o = {}, 0
        for j, b in self.blocks.items():
            out[j] = o
            o += b.feature_width
        return out

    @cached_property
    def n_features(self) -> int:
        return sum(b.feature_width for b in self.blocks.values())

    @cached_property
    def folded_matrix(self) -> sp.csr_matrix:
        """All blocks as one ``(3N, F)`` sparse matrix with activations folded in."""
        rows, cols, vals = [], [], []
        for j, b in self.blocks.items():
            f = b.feature_width
            folded = b.folded()
            r = (3 * b.vertices[:, None, None] + np.arange(3)[None, :, None]) * np.ones((1, 1, f), int)
            c = self.column_offsets[j] + np.arange(f)[None, None, :] * np.ones((b.vertices.size, 3, 1), int)
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(folded.ravel())
        if rows:
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        shape = (3 * self.n_vertices, self.n_features)
        m = sp.csr_matrix((vals, (rows, cols)), shape=shape)
        m.eliminate_zeros()
        return m

    def feature_joints(self, tree: KinematicTree) -> np.ndarray:
        """Joint index of each 4-wide slot of the stacked feature vector."""
        idx = [k for j in self.blocks for k in tree.neighbor_sets[j]]
        return np.asarray(idx, dtype=np.int64)

    def offsets_from_quaternions(self, quats: np.ndarray, tree: KinematicTree) -> np.ndarray:
        if not self.blocks:
            return np.zeros((self.n_vertices, 3))
        feat = (quats[self.feature_joints(tree)] - IDENTITY_QUATERNION).ravel()
        return (self.folded_matrix @ feat).reshape(-1, 3)

    def offsets_from_features(self, features: Mapping[int, np.ndarray]) -> np.ndarray:
        """Evaluate with explicitly injected per-joint features (missing joints contribute nothing)."""
        out = np.zeros((self.n_vertices, 3))
        for j, f in features.items():
            b = self.blocks.get(int(j))
            if b is None:
                continue
            f = np.asarray(f, dtype=np.float64).ravel()
            if f.size != b.feature_width:
                raise InvalidArgumentError(f"feature for joint {j} has width {f.size}, expected {b.feature_width}")
            out[b.vertices] += b.weights[:, None] * (b.coeffs @ f)
        return out


def _check_pose(bs: SparsePoseBlendshapes, pose: PoseState, tree: KinematicTree) -> None:
    if pose.n_joints != tree.n_joints:
        raise InvalidArgumentError(f"pose has {pose.n_joints} joints, tree has {tree.n_joints}")
    for j, b in bs.blocks.items():
        if j >= tree.n_joints or b.feature_width != 4 * len(tree.neighbor_sets[j]):
            raise InvalidArgumentError(f"pose block for joint {j} does not match the tree")


def pose_offsets(bs: SparsePoseBlendshapes, pose: PoseState, tree: KinematicTree) -> np.ndarray:
    """Sum of the per-joint sparse pose correctives, ``(N, 3)``."""
    _check_pose(bs, pose, tree)
    return bs.offsets_from_quaternions(axis_angle_to_quaternion(pose.joint_rotations), tree)


def block_offsets(bs: SparsePoseBlendshapes, pose: PoseState, tree: KinematicTree, j: int) -> np.ndarray:
    """Contribution of joint ``j``'s corrective alone."""
    _check_pose(bs, pose, tree)
    b = bs.blocks.get(j)
    out = np.zeros((bs.n_vertices, 3))
    if b is None:
        return out
    q = axis_angle_to_quaternion(pose.joint_rotations[list(tree.neighbor_sets[j])])
    feat = (q - IDENTITY_QUATERNION).ravel()
    out[b.vertices] = b.weights[:, None] * (b.coeffs @ feat)
    return out
