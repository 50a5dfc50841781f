"""Vertex-to-vertex fitting of model parameters to same-topology registrations.

The objective is the weighted mean squared vertex distance; evaluation reports
the mean absolute (Euclidean) vertex error under a mask. Optimization is a damped
Gauss-Newton (Levenberg-Marquardt) iteration that only accepts steps lowering
the objective.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError, SuprError
from .kinematics import PoseState
from .model import ModelContainer, Tangents, forward, forward_jvp

logger = logging.getLogger(__name__)

_JACOBIAN_CHUNK = 48
_MAX_DAMPING = 1e12


@dataclass(frozen=True, eq=False)
class FitParams:
    beta: np.ndarray
    pose: PoseState
    psi: np.ndarray

    @classmethod
    def zeros(cls, model: ModelContainer) -> "FitParams":
        return cls(np.zeros(model.n_shape), PoseState.rest(model.n_joints), np.zeros(model.n_expression))

    def to_vector(self, model: ModelContainer) -> np.ndarray:
        beta = np.zeros(model.n_shape)
        beta[: np.size(self.beta)] = self.beta
        psi = np.zeros(model.n_expression)
        psi[: np.size(self.psi)] = self.psi
        return np.concatenate([self.pose.joint_rotations.ravel(), self.pose.global_translation, beta, psi])

    @classmethod
    def from_vector(cls, model: ModelContainer, x: np.ndarray) -> "FitParams":
        k3 = 3 * model.n_joints
        s = model.n_shape
        pose = PoseState(x[:k3].reshape(-1, 3), x[k3 : k3 + 3])
        return cls(x[k3 + 3 : k3 + 3 + s].copy(), pose, x[k3 + 3 + s :].copy())

    def as_dict(self) -> dict:
        return {
            "pose": self.pose.joint_rotations.tolist(),
            "translation": self.pose.global_translation.tolist(),
            "betas": np.asarray(self.beta).tolist(),
            "expression": np.asarray(self.psi).tolist(),
        }


@dataclass(frozen=True, eq=False)
class FitProblem:
    """A registration to fit and the settings of the fit.

    ``vertex_weights`` of zero exclude vertices from the objective; ``eval_mask``
    (default: the positively weighted vertices) selects the vertices scored by the
    reported mean absolute error. ``n_shape``/``n_expression`` truncate the free
    coefficient vectors. ``schedule`` is ``"staged"`` (global alignment, then pose,
    then everything) or ``"joint"``; by default staged when no initialization is given.
    """

    target_vertices: np.ndarray
    vertex_weights: np.ndarray | None = None
    eval_mask: np.ndarray | None = None
    free_pose: bool = True
    free_translation: bool = True
    free_shape: bool = True
    free_expression: bool = False
    n_shape: int | None = None
    n_expression: int | None = None
    max_iters: int = 100
    tol: float = 1e-10
    damping: float = 0.0
    init: FitParams | None = None
    schedule: str | None = None
    pose_prior: float = 0.0
    shape_prior: float = 0.0

    def __post_init__(self):
        target = np.asarray(self.target_vertices, dtype=np.float64)
        if target.ndim != 2 or target.shape[1] != 3:
            raise InvalidArgumentError(f"target must be (N, 3), got {target.shape}")
        if not np.all(np.isfinite(target)):
            raise InvalidArgumentError("target contains non-finite values")
        n = target.shape[0]
        w = np.ones(n) if self.vertex_weights is None else np.asarray(self.vertex_weights, dtype=np.float64).ravel()
        if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError("vertex weights must be N finite nonnegative values")
        if not np.any(w > 0):
            raise InvalidArgumentError("every vertex is excluded")
        mask = w > 0 if self.eval_mask is None else np.asarray(self.eval_mask, dtype=bool).ravel()
        if mask.shape != (n,):
            raise InvalidArgumentError("evaluation mask must have one entry per vertex")
        if not (self.free_pose or self.free_translation or self.free_expression
                or (self.free_shape and self.n_shape != 0)):
            raise InvalidArgumentError("at least one parameter must be free")
        if self.max_iters < 0 or self.tol < 0 or self.damping < 0:
            raise InvalidArgumentError("max_iters, tol and damping must be nonnegative")
        if self.schedule not in (None, "staged", "joint"):
            raise InvalidArgumentError(f"unknown schedule {self.schedule!r}")
        object.__setattr__(self, "target_vertices", target)
        object.__setattr__(self, "vertex_weights", w)
        object.__setattr__(self, "eval_mask", mask)


@dataclass
class FitReport:
    params: FitParams
    objective_trace: list[float]
    v2v: float
    mabs: float
    iterations: int
    converged: bool
    stages: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        # parameters sit at the top level so a report doubles as a pose/shape file
        return {
            **self.params.as_dict(),
            "v2v": self.v2v,
            "mabs": self.mabs,
            "iterations": self.iterations,
            "converged": self.converged,
            "stages": list(self.stages),
            "objective_trace": list(self.objective_trace),
        }


class _Layout:
    """Index bookkeeping for the stacked vector ``[theta | translation | beta | psi]``."""

    def __init__(self, model: ModelContainer):
        self.k = model.n_joints
        self.s = model.n_shape
        self.e = model.n_expression
        self.theta = np.arange(3 * self.k)
        self.trans = 3 * self.k + np.arange(3)
        self.beta = 3 * self.k + 3 + np.arange(self.s)
        self.psi = 3 * self.k + 3 + self.s + np.arange(self.e)
        self.size = 3 * self.k + 3 + self.s + self.e

    def free(self, problem: FitProblem, stage: str = "all") -> np.ndarray:
        parts = []
        if stage == "global":
            if problem.free_pose:
                parts.append(self.theta[:3])
            if problem.free_translation:
                parts.append(self.trans)
        elif stage == "pose":
            if problem.free_pose:
                parts.append(self.theta)
            if problem.free_translation:
                parts.append(self.trans)
        else:
            if problem.free_pose:
                parts.append(self.theta)
            if problem.free_translation:
                parts.append(self.trans)
            if problem.free_shape:
                n = self.s if problem.n_shape is None else problem.n_shape
                if n > self.s:
                    raise InvalidArgumentError(f"{n} shape components requested, model has {self.s}")
                parts.append(self.beta[:n])
            if problem.free_expression:
                n = self.e if problem.n_expression is None else problem.n_expression
                if n > self.e:
                    raise InvalidArgumentError(f"{n} expression components requested, model has {self.e}")
                parts.append(self.psi[:n])
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    def tangents(self, columns: np.ndarray) -> Tangents:
        d = columns.size
        basis = np.zeros((d, self.size))
        basis[np.arange(d), columns] = 1.0
        return Tangents(
            theta=basis[:, self.theta].reshape(d, self.k, 3),
            translation=basis[:, self.trans],
            beta=basis[:, self.beta],
            psi=basis[:, self.psi],
        )


def _wrap_angles(x: np.ndarray, k: int) -> np.ndarray:
    """Replace axis-angles longer than pi by the equivalent shorter rotation."""
    theta = x[: 3 * k].reshape(k, 3)
    angle = np.linalg.norm(theta, axis=1)
    long = angle > np.pi
    if np.any(long):
        theta = theta.copy()
        theta[long] *= (1.0 - 2.0 * np.pi / angle[long])[:, None]
        x = x.copy()
        x[: 3 * k] = theta.ravel()
    return x


class _Objective:
    def __init__(self, model: ModelContainer, problem: FitProblem):
        if problem.target_vertices.shape != (model.n_vertices, 3):
            raise InvalidArgumentError(
                f"target has {problem.target_vertices.shape[0]} vertices, model has {model.n_vertices}"
            )
        self.model = model
        self.problem = problem
        self.layout = _Layout(model)
        self.active = np.flatnonzero(problem.vertex_weights > 0)
        w = problem.vertex_weights[self.active]
        self.sqrt_w = np.sqrt(w / w.sum())
        self.target = problem.target_vertices[self.active]
        lay = self.layout
        self.prior = np.zeros(lay.size)
        self.prior[lay.theta] = problem.pose_prior
        self.prior[lay.beta] = problem.shape_prior

    def params(self, x: np.ndarray) -> FitParams:
        return FitParams.from_vector(self.model, x)

    def residual(self, x: np.ndarray) -> np.ndarray:
        p = self.params(x)
        verts = forward(self.model, p.beta, p.pose, p.psi).vertices[self.active]
        return ((verts - self.target) * self.sqrt_w[:, None]).ravel()

    def value(self, x: np.ndarray) -> float:
        # overflow surfaces as a non-finite objective, which the caller handles
        with np.errstate(over="ignore", invalid="ignore"):
            r = self.residual(x)
            return float(r @ r + np.sum(self.prior * x * x))

    def linearize(self, x: np.ndarray, columns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params(x)
        jac = np.empty((3 * self.active.size, columns.size))
        verts = None
        for start in range(0, columns.size, _JACOBIAN_CHUNK):
            cols = columns[start : start + _JACOBIAN_CHUNK]
            verts, dverts = forward_jvp(self.model, p.beta, p.pose, p.psi, self.layout.tangents(cols))
            block = dverts[:, self.active, :] * self.sqrt_w[None, :, None]
            jac[:, start : start + cols.size] = block.reshape(cols.size, -1).T
        if verts is None:
            verts = forward(self.model, p.beta, p.pose, p.psi).vertices
        r = ((verts[self.active] - self.target) * self.sqrt_w[:, None]).ravel()
        return r, jac

    def gradient(self, x: np.ndarray, columns: np.ndarray) -> tuple[float, np.ndarray]:
        r, jac = self.linearize(x, columns)
        value = float(r @ r + np.sum(self.prior * x * x))
        grad = 2.0 * (jac.T @ r) + 2.0 * self.prior[columns] * x[columns]
        return value, grad


def v2v_loss(model: ModelContainer, params: FitParams, problem: FitProblem) -> tuple[float, np.ndarray]:
    """Weighted mean squared vertex distance and its gradient over the free parameters.

    The gradient is ordered ``[theta (3K) | translation | beta[:n_shape] | psi[:n_expression]]``
    restricted to the problem's free parameter classes.
    """
    obj = _Objective(model, problem)
    return obj.gradient(params.to_vector(model), obj.layout.free(problem))


def _solve_step(jac, r, prior_cols, x_cols, lam):
    rows = [jac]
    rhs = [-r]
    if np.any(prior_cols > 0):
        sq = np.sqrt(prior_cols)
        rows.append(np.diag(sq))
        rhs.append(-sq * x_cols)
    if lam > 0:
        scale = np.sqrt(np.einsum("ij,ij->j", jac, jac) + prior_cols) + 1e-12
        rows.append(np.sqrt(lam) * np.diag(scale))
        rhs.append(np.zeros(x_cols.size))
    a = np.vstack(rows)
    b = np.concatenate(rhs)
    return np.linalg.lstsq(a, b, rcond=None)[0]


def _run_stage(obj: _Objective, x: np.ndarray, columns: np.ndarray, trace: list[float]):
    problem = obj.problem
    k = obj.layout.k
    lam = problem.damping
    f = trace[-1]
    iters = 0
    converged = False
    if columns.size == 0:
        return x, 0, True
    while iters < problem.max_iters:
        r, jac = obj.linearize(x, columns)
        grad = 2.0 * (jac.T @ r) + 2.0 * obj.prior[columns] * x[columns]
        if np.linalg.norm(grad) < problem.tol or f == 0.0:
            converged = True
            break
        accepted = False
        saw_nan = False
        while lam <= _MAX_DAMPING:
            step = _solve_step(jac, r, obj.prior[columns], x[columns], lam)
            x_new = x.copy()
            x_new[columns] += step
            x_new = _wrap_angles(x_new, k)
            f_new = obj.value(x_new) if np.all(np.isfinite(x_new)) else float("nan")
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                lam = 0.0 if lam < 1e-9 else lam / 10.0
                break
            saw_nan |= not np.isfinite(f_new)
            lam = max(lam * 10.0, 1e-6)
        if not accepted:
            if saw_nan and not np.isfinite(f):
                raise NumericalFailureError("objective is NaN", trace)
            converged = True
            break
        decrease = (f - f_new) / max(f, np.finfo(float).tiny)
        x, f = x_new, f_new
        trace.append(f)
        iters += 1
        if decrease < problem.tol:
            converged = True
            break
    return x, iters, converged


def fit(model: ModelContainer, problem: FitProblem) -> FitReport:
    """Minimize the weighted mean squared vertex distance to ``problem.target_vertices``."""
    obj = _Objective(model, problem)
    lay = obj.layout
    init = problem.init if problem.init is not None else FitParams.zeros(model)
    x = _wrap_angles(init.to_vector(model), lay.k)
    f0 = obj.value(x)
    if not np.isfinite(f0):
        raise NumericalFailureError("objective is not finite at the initialization", [f0])
    trace = [f0]
    schedule = problem.schedule or ("staged" if problem.init is None else "joint")
    stages = ["global", "pose", "all"] if schedule == "staged" else ["all"]
    total = 0
    converged = problem.max_iters > 0
    for stage in stages:
        cols = lay.free(problem, stage)
        x, iters, converged = _run_stage(obj, x, cols, trace)
        total += iters
    params = obj.params(x)
    verts = forward(model, params.beta, params.pose, params.psi).vertices
    dist = np.linalg.norm(verts - problem.target_vertices, axis=1)
    weighted = problem.vertex_weights > 0
    return FitReport(
        params=params,
        objective_trace=trace,
        v2v=float(dist[weighted].mean()),
        mabs=float(dist[problem.eval_mask].mean()) if problem.eval_mask.any() else float("nan"),
        iterations=total,
        converged=bool(converged),
        stages=stages,
    )


@dataclass
class SweepTable:
    component_counts: list[int]
    errors: np.ndarray  # (n_problems, n_counts), NaN where a fit failed
    failures: list[tuple[int, int, str]] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for c, col in zip(self.component_counts, self.errors.T):
            ok = col[np.isfinite(col)]
            out.append(
                {
                    "component_count": c,
                    "mean_mabs": float(ok.mean()) if ok.size else float("nan"),
                    "std_mabs": float(ok.std()) if ok.size else float("nan"),
                    "n": int(ok.size),
                }
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["component_count", "mean_mabs", "std_mabs", "n"], lineterminator="\n"
        )
        writer.writeheader()
        for row in self.rows():
            writer.writerow({**row, "mean_mabs": repr(row["mean_mabs"]), "std_mabs": repr(row["std_mabs"])})
        return buf.getvalue()


def _sweep_one(args) -> tuple[list[float], list[tuple[int, str]]]:
    model, problem, counts = args
    errors, failures = [], []
    previous = None
    for i, count in enumerate(counts):
        prob = replace(
            problem,
            free_shape=count > 0,
            n_shape=count,
            init=previous if previous is not None else problem.init,
            schedule=None if previous is None else "joint",
        )
        try:
            report = fit(model, prob)
        except SuprError as exc:
            errors.append(float("nan"))
            failures.append((i, f"{exc.category}: {exc}"))
            continue
        errors.append(report.mabs)
        previous = report.params
    return errors, failures


def shape_sweep(
    model: ModelContainer, problems: Sequence[FitProblem], component_counts: Sequence[int], jobs: int = 1
) -> SweepTable:
    """Fit every problem with increasing numbers of free shape components.

    Fits for a problem are chained: each count starts from the previous count's
    solution, so the objective can only go down as components are added.
    """
    counts = [int(c) for c in component_counts]
    if not counts:
        raise InvalidArgumentError("no component counts given")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise InvalidArgumentError("component counts must be strictly ascending")
    if counts[0] < 0 or counts[-1] > model.n_shape:
        raise InvalidArgumentError(f"component counts must lie in [0, {model.n_shape}]")
    tasks = [(model, p, counts) for p in problems]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    errors = np.array([r[0] for r in results], dtype=np.float64).reshape(len(problems), len(counts))
    failures = []
    for pi, (_, fails) in enumerate(results):
        for ci, msg in fails:
            logger.warning("fit of problem %d with %d components failed: %s", pi, counts[ci], msg)
            failures.append((pi, counts[ci], msg))
    return SweepTable(counts, errors, failures)
