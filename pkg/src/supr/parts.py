"""Factor a full model into standalone body-part models.

A joint belongs to a part when it has a nonzero skinning weight or a nonzero
corrective activation on any of the part's vertices. That raw set is closed under
ancestors up to its lowest common ancestor so the part keeps a single rooted tree.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .blendshapes import LinearShapeSpace, PoseBlock, SparsePoseBlendshapes
from .errors import InvalidArgumentError, InvalidModelError, InvalidPartError, ModelInconsistencyError
from .foot import FootDeformNet
from .kinematics import KinematicTree, PoseState
from .model import ModelContainer, PosedMesh, forward


class FallbackRegressorWarning(UserWarning):
    """A part was separated without its own joint regressor."""


@dataclass(frozen=True, eq=False)
class PartSpec:
    """Vertex subset defining a body part, with optional part-local assets.

    ``local_joint_regressor`` maps the part's vertices to the joints listed in
    ``regressor_joints`` (full-model indices, which must equal the part's
    influencing joint set).
    """

    name: str
    vertex_indices: np.ndarray
    local_shape_basis: np.ndarray | None = None
    local_joint_regressor: np.ndarray | None = None
    regressor_joints: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "vertex_indices", np.asarray(self.vertex_indices, dtype=np.int64).ravel())
        if self.local_shape_basis is not None:
            object.__setattr__(self, "local_shape_basis", np.asarray(self.local_shape_basis, dtype=np.float64))
        if self.local_joint_regressor is not None:
            object.__setattr__(
                self, "local_joint_regressor", np.asarray(self.local_joint_regressor, dtype=np.float64)
            )
            if self.regressor_joints is None:
                raise InvalidPartError(f"part {self.name!r}: a local regressor needs its joint list")
        if self.regressor_joints is not None:
            object.__setattr__(self, "regressor_joints", np.asarray(self.regressor_joints, dtype=np.int64).ravel())

    def validate(self, n_vertices: int) -> None:
        v = self.vertex_indices
        nv = v.size
        if nv == 0:
            raise InvalidModelError(f"part {self.name!r} has no vertices")
        if np.unique(v).size != nv:
            raise InvalidModelError(f"part {self.name!r} lists a vertex twice")
        if v.min() < 0 or v.max() >= n_vertices:
            raise InvalidModelError(f"part {self.name!r} vertex index out of range")
        b = self.local_shape_basis
        if b is not None and (b.ndim != 3 or b.shape[:2] != (nv, 3) or b.shape[2] < 1):
            raise InvalidModelError(f"part {self.name!r} local shape basis has shape {b.shape}")
        r = self.local_joint_regressor
        if r is not None and r.shape != (self.regressor_joints.size, nv):
            raise InvalidModelError(f"part {self.name!r} local regressor has shape {r.shape}")
        if r is not None and np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-6):
            raise InvalidModelError(f"part {self.name!r} local regressor rows must sum to 1")

    @classmethod
    def from_labels(cls, model: ModelContainer, name: str) -> "PartSpec":
        """The container's stored spec for ``name``, else the vertices carrying that label."""
        if name in model.part_specs:
            return model.part_specs[name]
        vertices = model.label_vertices(name)
        if vertices.size == 0:
            raise InvalidPartError(f"no vertices carry the label {name!r}")
        return cls(name, vertices)


@dataclass(frozen=True, eq=False)
class PartModel:
    """A separated part: a standalone model plus maps back into the full model."""

    name: str
    model: ModelContainer
    vertex_map: np.ndarray  # part vertex -> full vertex
    joint_map: np.ndarray  # part joint -> full joint

    def restrict_pose(self, pose: PoseState) -> PoseState:
        return PoseState(pose.joint_rotations[self.joint_map], pose.global_translation)

    def embed_pose(self, part_pose: PoseState, n_joints: int) -> PoseState:
        """Full-model pose that is ``part_pose`` on the part's joints and rest elsewhere."""
        rot = np.zeros((n_joints, 3))
        rot[self.joint_map] = part_pose.joint_rotations
        return PoseState(rot, part_pose.global_translation)

    def restrict_vertices(self, vertices: np.ndarray) -> np.ndarray:
        return np.asarray(vertices)[self.vertex_map]

    def forward(self, beta=None, pose=None, psi=None) -> PosedMesh:
        return forward(self.model, beta, pose, psi)


def _check_part(model: ModelContainer, part: PartSpec) -> np.ndarray:
    try:
        part.validate(model.n_vertices)
    except InvalidModelError as exc:
        raise InvalidPartError(str(exc)) from exc
    return part.vertex_indices


def _raw_influence(model: ModelContainer, vertices: np.ndarray) -> np.ndarray:
    skin = np.asarray(abs(model.skinning_weights[vertices]).sum(axis=0)).ravel() != 0.0
    act = np.zeros(model.n_joints, dtype=bool)
    inside = np.zeros(model.n_vertices, dtype=bool)
    inside[vertices] = True
    for j, b in model.pose_blendshapes.blocks.items():
        act[j] = np.abs(b.weights[inside[b.vertices]]).sum() != 0.0
    return skin | act


def joint_influences(model: ModelContainer, part: PartSpec, j: int) -> bool:
    """True when joint ``j`` skins or activates any vertex of the part."""
    vertices = _check_part(model, part)
    if not 0 <= j < model.n_joints:
        raise InvalidArgumentError(f"joint {j} out of range")
    return bool(_raw_influence(model, vertices)[j])


def influencing_joint_set(model: ModelContainer, part: PartSpec) -> list[int]:
    """Influencing joints plus the ancestors connecting them, in topological order."""
    vertices = _check_part(model, part)
    raw = np.flatnonzero(_raw_influence(model, vertices))
    if raw.size == 0:
        raise InvalidPartError(f"no joint influences part {part.name!r}")
    tree = model.tree
    chains = [[int(j)] + tree.ancestors(int(j)) for j in raw]
    common = set(chains[0])
    for chain in chains[1:]:
        common &= set(chain)
    # common always holds the root; the deepest common joint is the largest index
    top = max(common)
    joints = set()
    for chain in chains:
        for j in chain:
            joints.add(j)
            if j == top:
                break
    return sorted(joints)


def _slice_blendshapes(model, vertices, joints, full_to_part_vertex, full_to_part_joint):
    tree = model.tree
    in_part = np.zeros(model.n_joints, dtype=bool)
    in_part[joints] = True
    blocks: dict[int, PoseBlock] = {}
    neighbors: dict[int, tuple[int, ...]] = {}
    for j, b in model.pose_blendshapes.blocks.items():
        rows = np.flatnonzero(full_to_part_vertex[b.vertices] >= 0)
        if rows.size == 0:
            continue
        if not in_part[j]:
            raise ModelInconsistencyError(f"joint {j} activates part vertices but is not in the part")
        coeffs = b.coeffs[rows]
        keep_cols, keep_joints = [], []
        for slot, k in enumerate(tree.neighbor_sets[j]):
            cols = slice(4 * slot, 4 * slot + 4)
            if in_part[k]:
                keep_cols.append(np.arange(4 * slot, 4 * slot + 4))
                keep_joints.append(int(full_to_part_joint[k]))
            elif np.any(coeffs[:, :, cols] != 0.0):
                raise ModelInconsistencyError(
                    f"corrective of joint {j} depends on joint {k}, which is outside the part"
                )
        if not keep_cols:
            continue
        pj = int(full_to_part_joint[j])
        blocks[pj] = PoseBlock(
            full_to_part_vertex[b.vertices[rows]], b.weights[rows], coeffs[:, :, np.concatenate(keep_cols)]
        )
        neighbors[pj] = tuple(keep_joints)
    return blocks, neighbors


def separate(model: ModelContainer, part: PartSpec) -> PartModel:
    """Slice ``model`` into a standalone model over ``part``'s vertices."""
    vertices = _check_part(model, part)
    joints = influencing_joint_set(model, part)
    n, k = model.n_vertices, model.n_joints
    jmap = np.asarray(joints, dtype=np.int64)
    full_to_part_vertex = np.full(n, -1, dtype=np.int64)
    full_to_part_vertex[vertices] = np.arange(vertices.size)
    full_to_part_joint = np.full(k, -1, dtype=np.int64)
    full_to_part_joint[jmap] = np.arange(jmap.size)

    tree = model.tree
    root = joints[0]
    parents = [-1 if j == root else int(full_to_part_joint[tree.parents[j]]) for j in joints]
    if any(p < 0 for p in parents[1:]):
        raise InvalidPartError(f"part {part.name!r} joints do not form a connected subtree")

    blocks, block_neighbors = _slice_blendshapes(model, vertices, jmap, full_to_part_vertex, full_to_part_joint)
    neighbor_sets = []
    for pj, j in enumerate(joints):
        if pj in block_neighbors:
            neighbor_sets.append(block_neighbors[pj])
            continue
        ne = tuple(int(full_to_part_joint[x]) for x in tree.neighbor_sets[j] if full_to_part_joint[x] >= 0)
        neighbor_sets.append(ne if (ne or pj == 0) else (pj,))
    part_tree = KinematicTree(tuple(parents), tuple(tree.joint_names[j] for j in joints), tuple(neighbor_sets))

    skinning = model.skinning_weights[vertices][:, jmap]
    lost = np.abs(np.asarray(model.skinning_weights[vertices].sum(axis=1)).ravel()
                  - np.asarray(skinning.sum(axis=1)).ravel())
    if np.any(lost > 1e-12):
        raise ModelInconsistencyError(f"part {part.name!r} loses skinning weight outside its joint set")

    if part.local_joint_regressor is not None:
        if list(part.regressor_joints) != joints:
            raise InvalidPartError(
                f"part {part.name!r} regressor covers joints {list(part.regressor_joints)}, "
                f"but the influencing set is {joints}"
            )
        regressor = sp.csr_matrix(part.local_joint_regressor)
    else:
        sliced = model.joint_regressor[jmap][:, vertices].toarray()
        sums = sliced.sum(axis=1)
        if np.any(np.abs(sums) < 1e-12):
            raise InvalidPartError(
                f"part {part.name!r} has no local regressor and some joints have no regressor support on it"
            )
        if np.any(np.abs(sums - 1.0) > 1e-12):
            warnings.warn(
                f"part {part.name!r}: full regressor rows renormalized over part vertices; "
                "posed part output may differ from the full model",
                FallbackRegressorWarning,
                stacklevel=2,
            )
        regressor = sp.csr_matrix(sliced / sums[:, None])

    if part.local_shape_basis is not None:
        shape_space = LinearShapeSpace(part.local_shape_basis)
    else:
        shape_space = model.shape_space.restrict(vertices)

    faces = model.faces
    keep = np.all(full_to_part_vertex[faces] >= 0, axis=1) if faces.size else np.zeros(0, bool)
    part_faces = full_to_part_vertex[faces[keep]] if faces.size else faces

    specs = {}
    for name, spec in model.part_specs.items():
        if not np.all(full_to_part_vertex[spec.vertex_indices] >= 0):
            continue
        rj = spec.regressor_joints
        if rj is not None and not np.all(full_to_part_joint[rj] >= 0):
            continue
        specs[name] = replace(
            spec,
            vertex_indices=full_to_part_vertex[spec.vertex_indices],
            regressor_joints=None if rj is None else full_to_part_joint[rj],
        )

    nets = {}
    for side, net in model.foot_nets.items():
        if np.all(full_to_part_vertex[net.foot_vertex_indices] >= 0) and np.all(
            full_to_part_joint[net.foot_joint_indices] >= 0
        ):
            nets[side] = FootDeformNet(
                net.weights,
                net.biases,
                net.n_encoder_layers,
                full_to_part_vertex[net.foot_vertex_indices],
                full_to_part_joint[net.foot_joint_indices],
                net.shape_basis,
                vertices.size,
                net.negative_slope,
            )

    part_model = ModelContainer(
        template=model.template[vertices],
        faces=part_faces,
        skinning_weights=skinning,
        joint_regressor=regressor,
        shape_space=shape_space,
        expression_space=model.expression_space.restrict(vertices),
        pose_blendshapes=SparsePoseBlendshapes(vertices.size, blocks),
        tree=part_tree,
        part_labels=model.part_labels[vertices],
        label_names=model.label_names,
        part_specs=specs,
        foot_nets=nets,
        kind="part",
    )
    return PartModel(part.name, part_model, vertices.copy(), jmap)
