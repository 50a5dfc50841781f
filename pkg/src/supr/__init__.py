"""Sparse factorized statistical body model: forward evaluation, part separation,
foot contact deformation and vertex-to-vertex fitting."""

from .errors import SuprError
from .fitting import FitParams, FitProblem, FitReport, fit, shape_sweep, v2v_loss
from .foot import FootDeformNet, foot_feature, foot_offsets, forward_with_contact
from .kinematics import KinematicTree, PoseState, RigidTransform, axis_angle_to_quaternion, pose_feature
from .model import ModelContainer, PosedMesh, forward, forward_jvp, regress_joints, skin, unposed_surface
from .parts import PartModel, PartSpec, influencing_joint_set, joint_influences, separate
from .synth import synth_model

__all__ = [
    "FitParams",
    "FitProblem",
    "FitReport",
    "FootDeformNet",
    "KinematicTree",
    "ModelContainer",
    "PartModel",
    "PartSpec",
    "PoseState",
    "PosedMesh",
    "RigidTransform",
    "SuprError",
    "axis_angle_to_quaternion",
    "fit",
    "foot_feature",
    "foot_offsets",
    "forward",
    "forward_jvp",
    "forward_with_contact",
    "influencing_joint_set",
    "joint_influences",
    "pose_feature",
    "regress_joints",
    "separate",
    "shape_sweep",
    "skin",
    "synth_model",
    "unposed_surface",
    "v2v_loss",
]
