"""Contact-conditioned foot deformation: an encoder-decoder MLP whose output is
scattered onto the foot vertices and added to the unposed surface before skinning.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidModelError, UnsupportedOperationError
from .kinematics import IDENTITY_QUATERNION, PoseState, axis_angle_to_quaternion
from .model import FULL_SIZE_VERTICES, ModelContainer, PosedMesh, as_pose, forward

LATENT_WIDTH = 16
FULL_SIZE_FOOT_VERTICES = 266
FULL_SIZE_FEATURE_WIDTH = 320
DEFAULT_SLOPE = 0.1
FOOT_SIDES = ("left", "right")


def leaky_relu(x: np.ndarray, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


@dataclass(frozen=True, eq=False)
class FootDeformNet:
    """Weights of one foot's deformation network.

    ``weights[i]`` has shape ``(out, in)``. The first ``n_encoder_layers`` layers map
    the input feature to the latent code; the remaining layers decode it to
    ``3 * len(foot_vertex_indices)`` offsets. Every layer but the last is followed by
    a leaky ReLU. ``shape_basis`` (``(n_foot, 3, n_shape_coeffs)``) is the local foot
    shape space used to derive the foot shape coefficients from a body shape.
    """

    weights: Sequence[np.ndarray]
    biases: Sequence[np.ndarray]
    n_encoder_layers: int
    foot_vertex_indices: np.ndarray
    foot_joint_indices: np.ndarray
    shape_basis: np.ndarray
    n_vertices: int
    negative_slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64).ravel() for b in self.biases))
        object.__setattr__(self, "foot_vertex_indices", np.asarray(self.foot_vertex_indices, dtype=np.int64).ravel())
        object.__setattr__(self, "foot_joint_indices", np.asarray(self.foot_joint_indices, dtype=np.int64).ravel())
        object.__setattr__(self, "shape_basis", np.asarray(self.shape_basis, dtype=np.float64))
        object.__setattr__(self, "n_encoder_layers", int(self.n_encoder_layers))
        object.__setattr__(self, "n_vertices", int(self.n_vertices))
        object.__setattr__(self, "negative_slope", float(self.negative_slope))
        self.check_dims()

    @property
    def n_foot_vertices(self) -> int:
        return self.foot_vertex_indices.size

    @property
    def n_shape_coeffs(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def expected_input_width(self) -> int:
        return 4 * self.foot_joint_indices.size + self.n_shape_coeffs + self.n_foot_vertices

    @property
    def latent_width(self) -> int:
        return self.weights[self.n_encoder_layers - 1].shape[0]

    def check_dims(self) -> None:
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise InvalidModelError("foot network needs matching weight/bias lists of at least two layers")
        if not 1 <= self.n_encoder_layers < len(self.weights):
            raise InvalidModelError("foot network needs at least one encoder and one decoder layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidModelError(f"foot network layer {i} has inconsistent shapes")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidModelError(f"foot network layer {i} input does not match previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidModelError(f"foot network layer {i} has non-finite parameters")
        if self.input_width != self.expected_input_width:
            raise InvalidModelError(
                f"foot network input width {self.input_width} != 4*{self.foot_joint_indices.size} + "
                f"{self.n_shape_coeffs} + {self.n_foot_vertices}"
            )
        if self.latent_width != LATENT_WIDTH:
            raise InvalidModelError(f"foot network latent width {self.latent_width}, expected {LATENT_WIDTH}")
        if self.weights[-1].shape[0] != 3 * self.n_foot_vertices:
            raise InvalidModelError("foot network output width must be 3 per foot vertex")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (self.n_foot_vertices, 3):
            raise InvalidModelError(f"foot shape basis has shape {self.shape_basis.shape}")
        if np.unique(self.foot_vertex_indices).size != self.n_foot_vertices:
            raise InvalidModelError("duplicate foot vertex indices")
        fv = self.foot_vertex_indices
        if fv.size and (fv.min() < 0 or fv.max() >= self.n_vertices):
            raise InvalidModelError("foot vertex index out of range")
        if self.n_vertices == FULL_SIZE_VERTICES:
            if self.n_foot_vertices != FULL_SIZE_FOOT_VERTICES or self.input_width != FULL_SIZE_FEATURE_WIDTH:
                raise InvalidModelError(
                    f"full-size foot network must take {FULL_SIZE_FEATURE_WIDTH} inputs over "
                    f"{FULL_SIZE_FOOT_VERTICES} foot vertices"
                )

    def validate(self, model: ModelContainer) -> None:
        if self.n_vertices != model.n_vertices:
            raise InvalidModelError("foot network was built for a different vertex count")
        fj = self.foot_joint_indices
        if fj.size and (fj.min() < 0 or fj.max() >= model.n_joints):
            raise InvalidModelError("foot joint index out of range")

    @cached_property
    def shape_projector(self) -> np.ndarray:
        return np.linalg.pinv(self.shape_basis.reshape(-1, self.n_shape_coeffs))

    def run(self, feature: np.ndarray) -> np.ndarray:
        """Raw network output, ``(n_foot, 3)``."""
        x = np.asarray(feature, dtype=np.float64)
        if x.shape != (self.input_width,):
            raise InvalidArgumentError(f"feature must have width {self.input_width}, got {x.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = w @ x + b
            if i < last:
                x = leaky_relu(x, self.negative_slope)
        return x.reshape(-1, 3)

    def encode(self, feature: np.ndarray) -> np.ndarray:
        x = np.asarray(feature, dtype=np.float64)
        for w, b in zip(self.weights[: self.n_encoder_layers], self.biases[: self.n_encoder_layers]):
            x = leaky_relu(w @ x + b, self.negative_slope)
        return x


def foot_feature(pose: PoseState, beta_foot, contact, net: FootDeformNet) -> np.ndarray:
    """Network input ``[foot joint quaternion features | foot shape | contact]``."""
    if pose.n_joints <= int(net.foot_joint_indices.max(initial=-1)):
        raise InvalidArgumentError("pose does not cover the foot joints")
    beta_foot = np.asarray(beta_foot, dtype=np.float64).ravel()
    if beta_foot.size != net.n_shape_coeffs:
        raise InvalidArgumentError(f"foot shape must have {net.n_shape_coeffs} coefficients, got {beta_foot.size}")
    contact = check_contact(contact, net)
    q = axis_angle_to_quaternion(pose.joint_rotations[net.foot_joint_indices])
    return np.concatenate([(q - IDENTITY_QUATERNION).ravel(), beta_foot, contact])


def check_contact(contact, net: FootDeformNet) -> np.ndarray:
    c = np.asarray(contact, dtype=np.float64).ravel()
    if c.size != net.n_foot_vertices:
        raise InvalidArgumentError(f"contact vector must have {net.n_foot_vertices} entries, got {c.size}")
    if not np.all((c == 0.0) | (c == 1.0)):
        raise InvalidArgumentError("contact flags must be 0 or 1")
    return c


def foot_offsets(pose: PoseState, beta_foot, contact, net: FootDeformNet) -> np.ndarray:
    """Masked network offsets over all ``N`` vertices; exactly zero off the foot."""
    out = np.zeros((net.n_vertices, 3))
    out[net.foot_vertex_indices] = net.run(foot_feature(pose, beta_foot, contact, net))
    return out


def foot_shape_coeffs(model: ModelContainer, beta, net: FootDeformNet) -> np.ndarray:
    """Local foot shape coefficients: the body shape offsets at the foot projected on the foot basis."""
    offsets = model.shape_space.offsets(beta)[net.foot_vertex_indices]
    return net.shape_projector @ offsets.ravel()


def contact_offsets(model: ModelContainer, beta, pose, contacts: dict) -> np.ndarray:
    pose = as_pose(model, pose)
    total = np.zeros((model.n_vertices, 3))
    for side, contact in contacts.items():
        if contact is None:
            continue
        net = model.foot_nets.get(side)
        if net is None:
            raise UnsupportedOperationError(f"model has no {side} foot deformation network")
        total += foot_offsets(pose, foot_shape_coeffs(model, beta, net), contact, net)
    return total


def forward_with_contact(
    model: ModelContainer, beta=None, pose=None, psi=None, contact_left=None, contact_right=None
) -> PosedMesh:
    """Forward model with the foot contact deformation added before skinning."""
    if not model.foot_nets:
        raise UnsupportedOperationError("model carries no foot deformation network")
    offsets = contact_offsets(model, beta, pose, {"left": contact_left, "right": contact_right})
    return forward(model, beta, pose, psi, extra_offsets=offsets)
