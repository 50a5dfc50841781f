"""Deterministic pseudo-random model containers for desk-scale verification.

Skinning weights and regressor entries are multiples of 1/256, so their row sums
are exactly one and the rest pose reproduces the template bit for bit. All other
float tensors are rounded to float32 so containers survive serialization unchanged.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import scipy.sparse as sp

from .blendshapes import LinearShapeSpace, PoseBlock, SparsePoseBlendshapes
from .errors import InvalidArgumentError
from .foot import LATENT_WIDTH, FootDeformNet, foot_feature
from .kinematics import KinematicTree, PoseState
from .model import FULL_SIZE_JOINTS, FULL_SIZE_VERTICES, MAX_INFLUENCES, PART_LABELS, ModelContainer
from .parts import PartSpec, influencing_joint_set

_DYADIC = 256
_MAX_BLOCK_VERTICES = 300
_FIT_TOL = 1e-9


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _dyadic_split(rng: np.random.Generator, m: int, total: int = _DYADIC, lead: int = 0) -> np.ndarray:
    """``m`` positive multiples of ``1/total`` summing to one; the first gets at least ``lead``."""
    if m == 1:
        return np.ones(1)
    counts = np.ones(m, dtype=np.int64)
    counts[0] = max(1, lead)
    counts += rng.multinomial(total - counts.sum(), np.full(m, 1.0 / m))
    return counts / total


# -- full-size anatomical layout --------------------------------------------------

_BODY = [
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("left_hip", 0, (0.09, -0.08, 0.0)),
    ("right_hip", 0, (-0.09, -0.08, 0.0)),
    ("spine1", 0, (0.0, 0.1, -0.02)),
    ("left_knee", 1, (0.0, -0.4, 0.01)),
    ("right_knee", 2, (0.0, -0.4, 0.01)),
    ("spine2", 3, (0.0, 0.13, 0.0)),
    ("left_ankle", 4, (0.0, -0.4, -0.03)),
    ("right_ankle", 5, (0.0, -0.4, -0.03)),
    ("spine3", 6, (0.0, 0.05, 0.02)),
    ("left_foot", 7, (0.0, -0.05, 0.12)),
    ("right_foot", 8, (0.0, -0.05, 0.12)),
    ("neck", 9, (0.0, 0.2, -0.02)),
    ("left_collar", 9, (0.07, 0.12, 0.0)),
    ("right_collar", 9, (-0.07, 0.12, 0.0)),
    ("head", 12, (0.0, 0.1, 0.03)),
    ("left_shoulder", 13, (0.11, 0.03, 0.0)),
    ("right_shoulder", 14, (-0.11, 0.03, 0.0)),
    ("left_elbow", 16, (0.26, 0.0, 0.0)),
    ("right_elbow", 17, (-0.26, 0.0, 0.0)),
    ("left_wrist", 18, (0.25, 0.0, 0.0)),
    ("right_wrist", 19, (-0.25, 0.0, 0.0)),
    ("jaw", 15, (0.0, 0.02, 0.05)),
    ("left_eye", 15, (0.03, 0.07, 0.08)),
    ("right_eye", 15, (-0.03, 0.07, 0.08)),
]
_FINGERS = ("thumb", "index", "middle", "ring", "pinky")
_TOES = ("big", "second", "third", "fourth", "little")


def _full_size_layout():
    """Joint names, parents, rest offsets, per-joint vertex counts and part labels."""
    names, parents, offsets = [], [], []
    for name, parent, off in _BODY:
        names.append(name)
        parents.append(parent)
        offsets.append(off)
    for side, sign, wrist in (("left", 1.0, 20), ("right", -1.0, 21)):
        for f, finger in enumerate(_FINGERS):
            z = 0.04 - 0.02 * f
            for seg in range(3):
                names.append(f"{side}_{finger}{seg + 1}")
                parents.append(wrist if seg == 0 else len(names) - 2)
                offsets.append((sign * 0.08, -0.01, z) if seg == 0 else (sign * 0.03, 0.0, 0.0))
    for side, foot in (("left", 10), ("right", 11)):
        for t, toe in enumerate(_TOES):
            x = 0.03 - 0.015 * t
            for seg in range(2):
                names.append(f"{side}_{toe}_toe{seg + 1}")
                parents.append(foot if seg == 0 else len(names) - 2)
                offsets.append((x, -0.02, 0.06) if seg == 0 else (0.0, 0.0, 0.02))
    assert len(names) == FULL_SIZE_JOINTS

    counts = np.zeros(FULL_SIZE_JOINTS, dtype=np.int64)
    labels = np.zeros(FULL_SIZE_JOINTS, dtype=np.int64)
    lab = {name: i for i, name in enumerate(PART_LABELS)}
    head_counts = {"neck": 200, "head": 1400, "jaw": 200, "left_eye": 50, "right_eye": 50}
    for j, name in enumerate(names):
        if name in head_counts:
            counts[j] = head_counts[name]
            labels[j] = lab["head"]
        elif name.endswith("wrist") or any(f in name for f in _FINGERS):
            counts[j] = 120 if name.endswith("wrist") else 40
            labels[j] = lab["hand-L" if name.startswith("left") else "hand-R"]
        elif name.endswith("ankle") or name.endswith("_foot") or "toe" in name:
            counts[j] = 46 if name.endswith("ankle") else 40 if name.endswith("_foot") else 18
            labels[j] = lab["foot-L" if name.startswith("left") else "foot-R"]
    body = np.flatnonzero(counts == 0)
    remaining = FULL_SIZE_VERTICES - counts.sum()
    counts[body] = remaining // body.size
    counts[body[0]] += remaining - counts[body].sum()
    foot_joints = {}
    for side in ("left", "right"):
        chain = [f"{side}_knee", f"{side}_ankle", f"{side}_foot"]
        chain += [f"{side}_{toe}_toe{s}" for toe in _TOES for s in (1, 2)]
        foot_joints[side] = [names.index(n) for n in chain]
    return names, parents, np.array(offsets), counts, labels, foot_joints


# -- generator --------------------------------------------------------------------


def synth_model(
    seed: int = 0,
    n_vertices: int | None = 100,
    n_joints: int | None = 5,
    n_shape: int | None = None,
    n_expression: int | None = None,
    *,
    full_size: bool = False,
    max_influences: int = 3,
    activation_density: float = 0.5,
    cross_reach: bool = True,
    disjoint: bool = False,
    foot_net: bool | None = None,
    part_regressors: bool = True,
) -> ModelContainer:
    """Build a random container satisfying every model invariant.

    Args:
        seed: Seed of the generator; equal arguments give identical containers.
        n_vertices, n_joints: Toy dimensions (``N >= 4``, ``K >= 2``, ``N >= K``).
            Ignored when ``full_size`` is set, or set to 10475 and 75 to request it.
        n_shape, n_expression: Component counts (defaults 4/3 toy, 16/10 full size).
        full_size: Anatomical 75-joint layout over 10475 vertices with part labels
            and one foot network per foot.
        max_influences: Skinning influences per vertex (1 to 8).
        activation_density: Fraction of candidate vertices each corrective activates.
        cross_reach: Let correctives also reach vertices owned by sibling joints.
        disjoint: Every joint skins and activates only the vertices it owns.
        foot_net: Attach foot networks (default: only at full size).
        part_regressors: Store part specs with local joint regressors fitted so a
            separated part regresses the same joints as the full model.
    """
    if n_vertices == FULL_SIZE_VERTICES and n_joints == FULL_SIZE_JOINTS:
        full_size = True
    if not 1 <= max_influences <= MAX_INFLUENCES:
        raise InvalidArgumentError(f"max_influences must lie in [1, {MAX_INFLUENCES}]")
    if not 0.0 < activation_density <= 1.0:
        raise InvalidArgumentError("activation_density must lie in (0, 1]")
    rng = np.random.default_rng(seed)

    if full_size:
        names, parents, offsets, counts, joint_labels, foot_chains = _full_size_layout()
        n, k = FULL_SIZE_VERTICES, FULL_SIZE_JOINTS
        n_shape = 16 if n_shape is None else n_shape
        n_expression = 10 if n_expression is None else n_expression
        foot_net = True if foot_net is None else foot_net
        owner = np.repeat(np.arange(k), counts)
        spread = 0.04
    else:
        n, k = int(n_vertices), int(n_joints)
        if n < 4 or k < 2:
            raise InvalidArgumentError("need at least 4 vertices and 2 joints")
        if n < k:
            raise InvalidArgumentError("every joint needs a vertex: n_vertices must be >= n_joints")
        n_shape = 4 if n_shape is None else n_shape
        n_expression = 3 if n_expression is None else n_expression
        parents = [-1] + [int(rng.integers(0, j)) for j in range(1, k)]
        names = [f"joint_{j}" for j in range(k)]
        directions = rng.normal(size=(k, 3))
        offsets = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        offsets[0] = 0.0
        owner = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        owner.sort(kind="stable")
        joint_labels = _toy_labels(parents)
        foot_chains = {}
        for side, label in (("left", "foot-L"), ("right", "foot-R")):
            leaf = np.flatnonzero(joint_labels == PART_LABELS.index(label))
            if leaf.size:
                foot_chains[side] = [parents[leaf[0]], int(leaf[0])] if parents[leaf[0]] > 0 else [int(leaf[0])]
        foot_net = False if foot_net is None else foot_net
        if foot_net and not foot_chains:
            raise InvalidArgumentError("a toy foot network needs a foot part; increase n_joints")
        spread = 0.25
    if n_shape < 1 or n_expression < 1:
        raise InvalidArgumentError("shape and expression spaces need at least one component")

    tree = KinematicTree.with_default_neighbors(parents, names)
    joints = np.zeros((k, 3))
    for j in range(k):
        joints[j] = offsets[j] if parents[j] < 0 else joints[parents[j]] + offsets[j]
    owned = [np.flatnonzero(owner == j) for j in range(k)]

    template = _f32(joints[owner] + spread * rng.normal(size=(n, 3)))
    labels = joint_labels[owner]
    faces = _faces(owned, parents)
    skinning = _skinning(rng, tree, owner, max_influences, disjoint)
    regressor = _regressor(rng, owned, n)
    blocks = _pose_blocks(rng, tree, owned, activation_density, cross_reach, disjoint, full_size)
    shape_space = LinearShapeSpace(_f32(0.02 * rng.normal(size=(n, 3, n_shape))))
    head = labels == PART_LABELS.index("head")
    expr = 0.01 * rng.normal(size=(n, 3, n_expression))
    expr[~head] = 0.0
    expression_space = LinearShapeSpace(_f32(expr))

    model = ModelContainer(
        template=template,
        faces=faces,
        skinning_weights=skinning,
        joint_regressor=regressor,
        shape_space=shape_space,
        expression_space=expression_space,
        pose_blendshapes=SparsePoseBlendshapes(n, blocks),
        tree=tree,
        part_labels=labels,
    )
    if part_regressors:
        model = _attach_part_specs(model)
    if foot_net:
        nets = {side: _foot_net(rng, model, side, chain) for side, chain in foot_chains.items()}
        model = replace(model, foot_nets=nets)
    return model


def _toy_labels(parents: list[int]) -> np.ndarray:
    k = len(parents)
    is_leaf = np.ones(k, dtype=bool)
    is_leaf[[p for p in parents if p >= 0]] = False
    is_leaf[0] = False
    order = ("head", "foot-L", "foot-R", "hand-L", "hand-R")
    labels = np.zeros(k, dtype=np.int64)
    for leaf, name in zip(np.flatnonzero(is_leaf), order):
        labels[leaf] = PART_LABELS.index(name)
    return labels


def _faces(owned: list[np.ndarray], parents) -> np.ndarray:
    faces = []
    for j, vs in enumerate(owned):
        for i in range(vs.size - 2):
            faces.append((vs[i], vs[i + 1], vs[i + 2]))
        p = parents[j]
        if p >= 0:
            ps = owned[p]
            if vs.size >= 2:
                faces.append((vs[0], ps[0], vs[1]))
            elif ps.size >= 2:
                faces.append((vs[0], ps[0], ps[1]))
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def _skinning(rng, tree: KinematicTree, owner: np.ndarray, max_influences: int, disjoint: bool) -> sp.csr_matrix:
    n, k = owner.size, tree.n_joints
    rows, cols, vals = [], [], []
    for v in range(n):
        o = int(owner[v])
        if disjoint or max_influences == 1:
            joints = [o]
        else:
            candidates = ([tree.parents[o]] if o > 0 else []) + tree.children(o)
            m = min(len(candidates), int(rng.integers(0, max_influences)))
            joints = [o] + [int(c) for c in rng.choice(candidates, size=m, replace=False)] if m else [o]
        w = _dyadic_split(rng, len(joints), lead=_DYADIC // 2)
        rows += [v] * len(joints)
        cols += joints
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, k))


def _regressor(rng, owned: list[np.ndarray], n: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for j, vs in enumerate(owned):
        m = min(vs.size, 8)
        pick = np.sort(rng.choice(vs, size=m, replace=False))
        rows += [j] * m
        cols += list(pick)
        vals += list(_dyadic_split(rng, m))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(owned), n))


def _pose_blocks(rng, tree, owned, density, cross_reach, disjoint, full_size) -> dict[int, PoseBlock]:
    blocks = {}
    scale = 0.005 if full_size else 0.02
    for j in range(1, tree.n_joints):
        reach = [j]
        if not disjoint:
            reach += [tree.parents[j]] + tree.children(j)
            if cross_reach:
                reach += [s for s in tree.children(tree.parents[j]) if s != j]
        candidates = np.unique(np.concatenate([owned[r] for r in reach]))
        keep = candidates[rng.random(candidates.size) < density]
        if keep.size > _MAX_BLOCK_VERTICES:
            keep = np.sort(rng.choice(keep, size=_MAX_BLOCK_VERTICES, replace=False))
        if keep.size == 0:
            keep = owned[j][:1]
        weights = rng.integers(1, 17, size=keep.size) / 16.0
        width = 4 * len(tree.neighbor_sets[j])
        coeffs = _f32(scale * rng.normal(size=(keep.size, 3, width)))
        blocks[j] = PoseBlock(keep, weights, coeffs)
    return blocks


def _attach_part_specs(model: ModelContainer) -> ModelContainer:
    """Store a spec with a fitted local joint regressor for every labeled part.

    A part's regressor must reproduce the full model's joints from part vertices
    alone. Rows whose support already lies inside the part are copied; the rest are
    solved (minimum norm) so that they match both the rest joints and the full
    model's joint shape directions, which keeps the part exact for every shape.
    Parts too small for that keep no local regressor.
    Corrective coefficients that tie part vertices to joints outside the part are
    zeroed so the separated model is exact.
    """
    specs = {}
    blocks = dict(model.pose_blendshapes.blocks)
    for name in PART_LABELS[1:]:
        vertices = model.label_vertices(name)
        if vertices.size == 0:
            continue
        spec = PartSpec(name, vertices)
        joints = np.asarray(influencing_joint_set(model, spec), dtype=np.int64)
        local = _local_regressor(model, vertices, joints)
        specs[name] = PartSpec(
            name, vertices, local_joint_regressor=local, regressor_joints=None if local is None else joints
        )
        in_part = np.zeros(model.n_joints, dtype=bool)
        in_part[joints] = True
        inside = np.zeros(model.n_vertices, dtype=bool)
        inside[vertices] = True
        for j, b in blocks.items():
            rows = inside[b.vertices]
            if not rows.any():
                continue
            coeffs = b.coeffs.copy()
            for slot, nb in enumerate(model.tree.neighbor_sets[j]):
                if not in_part[nb]:
                    coeffs[rows, :, 4 * slot : 4 * slot + 4] = 0.0
            blocks[j] = PoseBlock(b.vertices, b.weights, coeffs)
    return replace(
        model, pose_blendshapes=SparsePoseBlendshapes(model.n_vertices, blocks), part_specs=specs
    )


def _local_regressor(model: ModelContainer, vertices: np.ndarray, joints: np.ndarray) -> np.ndarray | None:
    full = model.joint_regressor[joints].tocsr()
    local = full[:, vertices].toarray()
    basis = model.shape_space.basis[vertices].reshape(vertices.size, -1)
    design = np.hstack([np.ones((vertices.size, 1)), model.template[vertices], basis])
    target_full = np.hstack(
        [np.ones((joints.size, 1)), model.rest_joints[joints], model.joint_shape_dirs[joints].reshape(joints.size, -1)]
    )
    inside = np.zeros(model.n_vertices, dtype=bool)
    inside[vertices] = True
    for r in range(joints.size):
        support = full.indices[full.indptr[r] : full.indptr[r + 1]]
        if np.all(inside[support]):
            continue
        row = np.linalg.lstsq(design.T, target_full[r], rcond=None)[0]
        if np.max(np.abs(design.T @ row - target_full[r])) >= _FIT_TOL:
            return None
        local[r] = row
    return local


def _foot_net(rng, model: ModelContainer, side: str, chain: list[int]) -> FootDeformNet:
    """Random encoder and hidden decoder layer; output layer fitted to a ground-contact rule.

    The rule lifts contacting foot vertices lying below a ground plane onto it,
    which is a crude stand-in for soft-tissue compression.
    """
    label = "foot-L" if side == "left" else "foot-R"
    fv = model.label_vertices(label)
    fj = np.asarray(chain, dtype=np.int64)
    nfv = fv.size
    u, _, _ = np.linalg.svd(model.shape_space.basis[fv].reshape(3 * nfv, -1), full_matrices=False)
    shape_basis = u[:, :2] if u.shape[1] >= 2 else np.hstack([u, np.zeros((3 * nfv, 2 - u.shape[1]))])
    shape_basis = _f32(shape_basis.reshape(nfv, 3, 2))
    width = 4 * fj.size + 2 + nfv
    sizes = [width, 64, 32, LATENT_WIDTH, 64, 3 * nfv]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1]):
        weights.append(_f32(rng.normal(size=(fan_out, fan_in)) / np.sqrt(fan_in)))
        biases.append(_f32(0.1 * rng.normal(size=fan_out)))
    # placeholder output layer; replaced by the fitted one below
    weights.append(np.zeros((3 * nfv, 64)))
    biases.append(np.zeros(3 * nfv))
    net = FootDeformNet(weights, biases, 3, fv, fj, shape_basis, model.n_vertices)

    heights = model.template[fv, 1]
    ground = heights.min() + 0.3 * (heights.max() - heights.min())
    depth = np.maximum(ground - heights, 0.0)
    n_samples = 4 * 64
    hidden = np.empty((n_samples, 64))
    targets = np.zeros((n_samples, nfv, 3))
    k = model.n_joints
    for i in range(n_samples):
        rot = np.zeros((k, 3))
        rot[fj] = 0.2 * rng.normal(size=(fj.size, 3))
        contact = (rng.random(nfv) < 0.5).astype(np.float64)
        x = foot_feature(PoseState(rot), rng.normal(size=2), contact, net)
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            x = w @ x + b
            x = np.where(x >= 0.0, x, net.negative_slope * x)
        hidden[i] = x
        targets[i, :, 1] = contact * depth
    design = np.hstack([hidden, np.ones((n_samples, 1))])
    ridge = 1e-3 * np.eye(design.shape[1])
    sol = np.linalg.solve(design.T @ design + ridge, design.T @ targets.reshape(n_samples, -1))
    weights[-1] = _f32(sol[:-1].T)
    biases[-1] = _f32(sol[-1])
    return FootDeformNet(weights, biases, 3, fv, fj, shape_basis, model.n_vertices)


def synthetic_population(
    model: ModelContainer,
    count: int,
    seed: int = 0,
    n_components: int | None = None,
    pose_scale: float = 0.3,
    shape_scale: float = 1.0,
) -> list[tuple[np.ndarray, PoseState, np.ndarray]]:
    """Random ``(beta, pose, target_vertices)`` triples generated by the model itself.

    Shapes use only the first ``n_components`` coefficients (default: all).
    """
    rng = np.random.default_rng(seed)
    nc = model.n_shape if n_components is None else n_components
    if not 0 <= nc <= model.n_shape:
        raise InvalidArgumentError(f"n_components must lie in [0, {model.n_shape}]")
    out = []
    for _ in range(count):
        beta = np.zeros(model.n_shape)
        beta[:nc] = shape_scale * rng.normal(size=nc)
        pose = PoseState(pose_scale * rng.normal(size=(model.n_joints, 3)), 0.1 * rng.normal(size=3))
        verts = model.forward(beta, pose).vertices
        out.append((beta, pose, verts))
    return out
