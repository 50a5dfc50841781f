"""The full forward model: shaped/posed template, joint regression and linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp

from .blendshapes import LinearShapeSpace, SparsePoseBlendshapes
from .errors import InvalidArgumentError, InvalidModelError
from .kinematics import (
    KinematicTree,
    PoseState,
    forward_kinematics,
    quaternion_to_matrix,
    quaternion_to_matrix_derivative,
    quaternions_with_jacobian,
)

PART_LABELS = ("body", "head", "hand-L", "hand-R", "foot-L", "foot-R")
MAX_INFLUENCES = 8
FULL_SIZE_VERTICES = 10475
FULL_SIZE_JOINTS = 75
ROW_SUM_TOL = 1e-6


class PosedMesh(NamedTuple):
    vertices: np.ndarray
    faces: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelContainer:
    """Every learned tensor of the model. Immutable once constructed and validated.

    ``kind`` is ``"full"`` for whole-body models and ``"part"`` for separated body
    parts; part models may carry signed (affine) joint regressors.
    """

    template: np.ndarray
    faces: np.ndarray
    skinning_weights: sp.csr_matrix
    joint_regressor: sp.csr_matrix
    shape_space: LinearShapeSpace
    expression_space: LinearShapeSpace
    pose_blendshapes: SparsePoseBlendshapes
    tree: KinematicTree
    part_labels: np.ndarray | None = None
    label_names: tuple[str, ...] = PART_LABELS
    part_specs: Mapping[str, Any] = field(default_factory=dict)
    foot_nets: Mapping[str, Any] = field(default_factory=dict)
    kind: str = "full"

    def __post_init__(self):
        template = np.asarray(self.template, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = template.shape[0]
        labels = self.part_labels
        labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        object.__setattr__(self, "template", template)
        object.__setattr__(self, "faces", faces)
        weights = sp.csr_matrix(self.skinning_weights, dtype=np.float64, copy=True)
        weights.eliminate_zeros()
        regressor = sp.csr_matrix(self.joint_regressor, dtype=np.float64, copy=True)
        regressor.eliminate_zeros()
        object.__setattr__(self, "skinning_weights", weights)
        object.__setattr__(self, "joint_regressor", regressor)
        object.__setattr__(self, "part_labels", labels)
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "part_specs", dict(self.part_specs))
        object.__setattr__(self, "foot_nets", dict(self.foot_nets))
        for arr in (template, faces, labels):
            arr.flags.writeable = False
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        return self.tree.n_joints

    @property
    def n_shape(self) -> int:
        return self.shape_space.component_count

    @property
    def n_expression(self) -> int:
        return self.expression_space.component_count

    @property
    def is_full_size(self) -> bool:
        return self.n_vertices == FULL_SIZE_VERTICES and self.n_joints == FULL_SIZE_JOINTS

    def validate(self) -> None:
        n, k = self.n_vertices, self.n_joints
        t = self.template
        if t.ndim != 2 or t.shape[1] != 3 or n < 1:
            raise InvalidModelError(f"template must be (N, 3), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise InvalidModelError("template contains non-finite values")
        f = self.faces
        if f.size and (f.min() < 0 or f.max() >= n):
            raise InvalidModelError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidModelError("degenerate face (repeated vertex index)")

        w = self.skinning_weights
        if w.shape != (n, k):
            raise InvalidModelError(f"skinning weights must be ({n}, {k}), got {w.shape}")
        if not np.all(np.isfinite(w.data)) or np.any(w.data < 0):
            raise InvalidModelError("skinning weights must be finite and nonnegative")
        sums = np.asarray(w.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise InvalidModelError(f"skinning row {bad[0]} sums to {sums[bad[0]]!r}, expected 1")
        counts = np.diff(w.indptr)
        if counts.size and counts.max() > MAX_INFLUENCES:
            raise InvalidModelError(f"a vertex has {counts.max()} skinning influences (max {MAX_INFLUENCES})")

        jr = self.joint_regressor
        if jr.shape != (k, n):
            raise InvalidModelError(f"joint regressor must be ({k}, {n}), got {jr.shape}")
        if not np.all(np.isfinite(jr.data)):
            raise InvalidModelError("joint regressor contains non-finite values")
        if self.kind == "full" and np.any(jr.data < 0):
            raise InvalidModelError("joint regressor of a full model must be nonnegative")
        if self.kind not in ("full", "part"):
            raise InvalidModelError(f"unknown model kind {self.kind!r}")
        rsums = np.asarray(jr.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(rsums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise InvalidModelError(f"joint regressor row {bad[0]} sums to {rsums[bad[0]]!r}, expected 1")

        for name, space in (("shape", self.shape_space), ("expression", self.expression_space)):
            if space.n_vertices != n:
                raise InvalidModelError(f"{name} space has {space.n_vertices} vertices, template {n}")
        if self.pose_blendshapes.n_vertices != n:
            raise InvalidModelError("pose blendshapes and template disagree on vertex count")
        self.pose_blendshapes.validate(self.tree)

        if self.part_labels.shape != (n,):
            raise InvalidModelError("part labels must have one entry per vertex")
        if n and (self.part_labels.min() < 0 or self.part_labels.max() >= len(self.label_names)):
            raise InvalidModelError("part label out of range")
        for spec in self.part_specs.values():
            spec.validate(n)
        for net in self.foot_nets.values():
            net.validate(self)

    # -- cached derived tensors --------------------------------------------------

    @cached_property
    def rest_joints(self) -> np.ndarray:
        return np.asarray(self.joint_regressor @ self.template)

    @cached_property
    def joint_shape_dirs(self) -> np.ndarray:
        """Joint displacement per shape coefficient, ``(K, 3, S)``."""
        flat = self.shape_space.basis.reshape(self.n_vertices, -1)
        return np.asarray(self.joint_regressor @ flat).reshape(self.n_joints, 3, self.n_shape)

    @cached_property
    def joint_shape_mean(self) -> np.ndarray:
        return np.asarray(self.joint_regressor @ self.shape_space.mean_offset)

    @cached_property
    def feature_joints(self) -> np.ndarray:
        return self.pose_blendshapes.feature_joints(self.tree)

    def label_vertices(self, name: str) -> np.ndarray:
        if name not in self.label_names:
            raise InvalidArgumentError(f"unknown part label {name!r}")
        return np.flatnonzero(self.part_labels == self.label_names.index(name))

    # -- convenience wrappers ----------------------------------------------------

    def forward(self, beta=None, pose=None, psi=None) -> PosedMesh:
        return forward(self, beta, pose, psi)


class Tangents(NamedTuple):
    """A batch of ``D`` directions in parameter space; ``None`` means zero."""

    theta: np.ndarray | None = None  # (D, K, 3)
    translation: np.ndarray | None = None  # (D, 3)
    beta: np.ndarray | None = None  # (D, <=S)
    psi: np.ndarray | None = None  # (D, <=E)

    @property
    def count(self) -> int:
        for t in self:
            if t is not None:
                return t.shape[0]
        return 0


def as_pose(model: ModelContainer, pose) -> PoseState:
    if pose is None:
        return PoseState.rest(model.n_joints)
    if not isinstance(pose, PoseState):
        pose = PoseState(np.asarray(pose, dtype=np.float64).reshape(-1, 3))
    if pose.n_joints != model.n_joints:
        raise InvalidArgumentError(f"pose has {pose.n_joints} joints, model has {model.n_joints}")
    return pose


def regress_joints(model: ModelContainer, beta=None) -> np.ndarray:
    """Rest joint locations of the shaped template, ``(K, 3)``."""
    beta = model.shape_space.check_coeffs(beta)
    joints = model.rest_joints + model.joint_shape_mean
    if beta.size:
        joints = joints + model.joint_shape_dirs[:, :, : beta.size] @ beta
    return joints


def unposed_surface(model: ModelContainer, beta=None, pose=None, psi=None) -> np.ndarray:
    """Template plus shape, pose-corrective and expression offsets, ``(N, 3)``."""
    pose = as_pose(model, pose)
    q, _ = quaternions_with_jacobian(pose.joint_rotations)
    return _unposed(model, beta, q, psi)


def _unposed(model: ModelContainer, beta, quats: np.ndarray, psi) -> np.ndarray:
    return (
        model.template
        + model.shape_space.offsets(beta)
        + model.pose_blendshapes.offsets_from_quaternions(quats, model.tree)
        + model.expression_space.offsets(psi)
    )


def _blend(weights: sp.csr_matrix, rw: np.ndarray, tw: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    k = rw.shape[0]
    g = np.concatenate([rw.reshape(k, 9), tw], axis=1)
    blended = weights @ g
    m = blended[:, :9].reshape(-1, 3, 3)
    return np.einsum("nij,nj->ni", m, vertices) + blended[:, 9:]


def skin(model: ModelContainer, vertices: np.ndarray, joints: np.ndarray, pose) -> np.ndarray:
    """Linear blend skinning of rest-space ``vertices`` about rest ``joints``."""
    pose = as_pose(model, pose)
    vertices = np.asarray(vertices, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    if vertices.shape != (model.n_vertices, 3):
        raise InvalidArgumentError(f"vertices must be ({model.n_vertices}, 3), got {vertices.shape}")
    if joints.shape != (model.n_joints, 3):
        raise InvalidArgumentError(f"joints must be ({model.n_joints}, 3), got {joints.shape}")
    q, _ = quaternions_with_jacobian(pose.joint_rotations)
    rw, tw = forward_kinematics(quaternion_to_matrix(q), joints, model.tree.parents, pose.global_translation)
    return _blend(model.skinning_weights, rw, tw, vertices)


def forward(model: ModelContainer, beta=None, pose=None, psi=None, extra_offsets=None) -> PosedMesh:
    """Posed mesh for shape ``beta``, pose ``pose`` and expression ``psi``.

    ``extra_offsets`` (``(N, 3)``) are added to the unposed surface before skinning;
    the foot contact deformation uses this hook.
    """
    pose = as_pose(model, pose)
    q, _ = quaternions_with_jacobian(pose.joint_rotations)
    unposed = _unposed(model, beta, q, psi)
    if extra_offsets is not None:
        unposed = unposed + extra_offsets
    joints = regress_joints(model, beta)
    rw, tw = forward_kinematics(quaternion_to_matrix(q), joints, model.tree.parents, pose.global_translation)
    return PosedMesh(_blend(model.skinning_weights, rw, tw, unposed), model.faces)


def forward_jvp(model: ModelContainer, beta, pose, psi, tangents: Tangents) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices and their directional derivatives along every tangent.

    Derivatives are propagated exactly (forward mode) through the quaternion
    features, the forward kinematics and the skinning. Returns ``(N, 3)`` and
    ``(D, N, 3)``.
    """
    pose = as_pose(model, pose)
    n, k = model.n_vertices, model.n_joints
    d = tangents.count

    q, dq_dtheta = quaternions_with_jacobian(pose.joint_rotations)
    rot = quaternion_to_matrix(q)
    unposed = _unposed(model, beta, q, psi)
    joints = regress_joints(model, beta)
    rw, tw = forward_kinematics(rot, joints, model.tree.parents, pose.global_translation)
    verts = _blend(model.skinning_weights, rw, tw, unposed)
    if d == 0:
        return verts, np.zeros((0, n, 3))

    zeros_k3 = np.zeros((d, k, 3))
    d_theta = zeros_k3 if tangents.theta is None else np.asarray(tangents.theta, dtype=np.float64)
    d_trans = np.zeros((d, 3)) if tangents.translation is None else np.asarray(tangents.translation, dtype=np.float64)
    if d_theta.shape != (d, k, 3) or d_trans.shape != (d, 3):
        raise InvalidArgumentError("tangent shapes do not match the model")

    # rotations and features
    d_quat = np.einsum("dka,kca->dkc", d_theta, dq_dtheta)
    d_rot = np.einsum("dkc,kijc->dkij", d_quat, quaternion_to_matrix_derivative(q))

    # joints and unposed surface
    d_joints = np.zeros((d, k, 3))
    d_unposed = np.zeros((d, n, 3))
    if tangents.beta is not None and tangents.beta.shape[1]:
        db = np.asarray(tangents.beta, dtype=np.float64)
        nb = db.shape[1]
        if nb > model.n_shape:
            raise InvalidArgumentError("shape tangent longer than the shape space")
        d_joints += np.einsum("kcs,ds->dkc", model.joint_shape_dirs[:, :, :nb], db)
        d_unposed += (model.shape_space.flat_basis[:, :nb] @ db.T).T.reshape(d, n, 3)
    if tangents.psi is not None and tangents.psi.shape[1]:
        de = np.asarray(tangents.psi, dtype=np.float64)
        ne = de.shape[1]
        if ne > model.n_expression:
            raise InvalidArgumentError("expression tangent longer than the expression space")
        d_unposed += (model.expression_space.flat_basis[:, :ne] @ de.T).T.reshape(d, n, 3)
    bs = model.pose_blendshapes
    if bs.blocks and tangents.theta is not None:
        d_feat = d_quat[:, model.feature_joints, :].reshape(d, -1)
        d_unposed += np.asarray(bs.folded_matrix @ d_feat.T).T.reshape(d, n, 3)

    # forward kinematics, differentiated
    parents = model.tree.parents
    d_rw = np.empty((d, k, 3, 3))
    d_tw = np.empty((d, k, 3))
    for c in range(k):
        r, jc = rot[c], joints[c]
        offset = jc - r @ jc
        d_offset = d_joints[:, c] - d_rot[:, c] @ jc - d_joints[:, c] @ r.T
        if c == 0:
            d_rw[:, 0] = d_rot[:, 0]
            d_tw[:, 0] = d_offset + d_trans
            continue
        p = parents[c]
        d_rw[:, c] = d_rw[:, p] @ r + rw[p] @ d_rot[:, c]
        d_tw[:, c] = d_rw[:, p] @ offset + d_offset @ rw[p].T + d_tw[:, p]

    # skinning, differentiated
    w = model.skinning_weights
    g = np.concatenate([rw.reshape(k, 9), tw], axis=1)
    blended = w @ g
    m = blended[:, :9].reshape(n, 3, 3)
    dg = np.concatenate([d_rw.reshape(d, k, 9), d_tw], axis=2)
    d_blended = np.asarray(w @ dg.transpose(1, 0, 2).reshape(k, d * 12)).reshape(n, d, 12)
    d_m = d_blended[:, :, :9].reshape(n, d, 3, 3)
    d_verts = (
        np.einsum("ndij,nj->dni", d_m, unposed)
        + d_blended[:, :, 9:].transpose(1, 0, 2)
        + np.einsum("nij,dnj->dni", m, d_unposed)
    )
    return verts, d_verts


def directional_derivative(
    model: ModelContainer, beta, pose, psi, d_theta=None, d_translation=None, d_beta=None, d_psi=None
) -> np.ndarray:
    """Single-direction convenience wrapper around :func:`forward_jvp`."""

    def batch(x):
        return None if x is None else np.asarray(x, dtype=np.float64)[None]

    tangents = Tangents(
        theta=None if d_theta is None else np.asarray(d_theta, dtype=np.float64).reshape(1, -1, 3),
        translation=batch(d_translation),
        beta=batch(d_beta),
        psi=batch(d_psi),
    )
    if tangents.count == 0:
        return np.zeros((model.n_vertices, 3))
    return forward_jvp(model, beta, pose, psi, tangents)[1][0]
