"""Naive dense reference evaluation of the forward model.

Shares no evaluation code with the optimized path: rotations come from the matrix
exponential, quaternions from the rotation matrix, transforms are 4x4 homogeneous
matrices, and every sparse tensor is expanded and looped over. Only meant for toy
sizes; larger inputs are refused.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from .errors import InvalidArgumentError, ScaleGuardError

# N * K above this is refused; a full-size model (10475 * 75) must not slip through.
SCALE_LIMIT = 100_000


def _hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rotation(aa) -> np.ndarray:
    return expm(_hat(np.asarray(aa, dtype=np.float64)))


def _matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Shepperd's method, returned with non-negative scalar part."""
    tr = np.trace(r)
    candidates = [tr, r[0, 0], r[1, 1], r[2, 2]]
    i = int(np.argmax(candidates))
    if i == 0:
        s = np.sqrt(1.0 + tr) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif i == 1:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif i == 2:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _homogeneous(r, t) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return m


def oracle_forward(model, beta=None, theta=None, psi=None, translation=None) -> np.ndarray:
    """Posed vertices ``(N, 3)`` by brute force.

    ``theta`` is a ``(K, 3)`` axis-angle array (or a pose object with
    ``joint_rotations``/``global_translation``).
    """
    n, k = model.n_vertices, model.n_joints
    if n * k > SCALE_LIMIT:
        raise ScaleGuardError(f"oracle refuses N*K = {n * k} > {SCALE_LIMIT}")
    if theta is not None and hasattr(theta, "joint_rotations"):
        if translation is None:
            translation = theta.global_translation
        theta = theta.joint_rotations
    theta = np.zeros((k, 3)) if theta is None else np.asarray(theta, dtype=np.float64).reshape(k, 3)
    translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)

    def coeffs(c, size):
        out = np.zeros(size)
        c = np.asarray([] if c is None else c, dtype=np.float64).ravel()
        if c.size > size:
            raise InvalidArgumentError("too many coefficients")
        out[: c.size] = c
        return out

    beta = coeffs(beta, model.shape_space.basis.shape[2])
    psi = coeffs(psi, model.expression_space.basis.shape[2])

    # shaped template, vertex by vertex
    template = np.array(model.template, dtype=np.float64)
    s_basis, s_mean = model.shape_space.basis, model.shape_space.mean_offset
    e_basis, e_mean = model.expression_space.basis, model.expression_space.mean_offset
    shaped = np.zeros((n, 3))
    expressed = np.zeros((n, 3))
    for v in range(n):
        shaped[v] = template[v] + s_mean[v]
        expressed[v] = e_mean[v]
        for s in range(beta.size):
            shaped[v] += s_basis[v, :, s] * beta[s]
        for e in range(psi.size):
            expressed[v] += e_basis[v, :, e] * psi[e]

    # joints from the dense regressor
    regressor = model.joint_regressor.toarray()
    joints = np.zeros((k, 3))
    for j in range(k):
        for v in range(n):
            joints[j] += regressor[j, v] * shaped[v]

    # pose correctives with dense activation vectors
    rotations = [_rotation(theta[j]) for j in range(k)]
    quats = [_matrix_to_quaternion(r) for r in rotations]
    corrective = np.zeros((n, 3))
    tree = model.tree
    for j, block in model.pose_blendshapes.blocks.items():
        activation = np.zeros(n)
        dense = np.zeros((n, 3, block.coeffs.shape[2]))
        for i, v in enumerate(block.vertices):
            activation[v] = block.weights[i]
            dense[v] = block.coeffs[i]
        feature = np.concatenate([quats[m] - np.array([1.0, 0.0, 0.0, 0.0]) for m in tree.neighbor_sets[j]])
        for v in range(n):
            if activation[v] != 0.0:
                corrective[v] += activation[v] * (dense[v] @ feature)

    # homogeneous kinematic chain, rest-joint removal afterwards
    parents = tree.parents
    world = [None] * k
    for j in range(k):
        local = _homogeneous(rotations[j], joints[j] if parents[j] < 0 else joints[j] - joints[parents[j]])
        world[j] = local if parents[j] < 0 else world[parents[j]] @ local
    skinning_transforms = []
    for j in range(k):
        g = world[j].copy()
        g[:3, 3] -= g[:3, :3] @ joints[j]
        g[:3, 3] += translation
        skinning_transforms.append(g)

    weights = model.skinning_weights.toarray()
    posed = np.zeros((n, 3))
    for v in range(n):
        rest = np.append(shaped[v] + corrective[v] + expressed[v], 1.0)
        acc = np.zeros(4)
        for j in range(k):
            if weights[v, j] != 0.0:
                acc += weights[v, j] * (skinning_transforms[j] @ rest)
        posed[v] = acc[:3]
    return posed
