"""Command-line interface.

Parameter files are JSON. A pose file is ``{"pose": [[x, y, z], ...], "translation": [x, y, z]}``
(or a bare list of K axis-angle triples), a shape file ``{"betas": [...]}``, an expression
file ``{"expression": [...]}`` (both may also be bare lists), a contact file
``{"left": [0, 1, ...], "right": [...]}`` and a mask file ``{"weights": [...]}`` with one
nonnegative weight per vertex (or a bare list). Fit reports use the same keys, so a
report can be fed back as a pose or shape file.

Data goes to standard output or ``--out``; logs and errors go to standard error. Usage
errors exit with status 2; failures exit with status 1 after printing
``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, SuprError
from .fitting import FitProblem, fit, shape_sweep
from .foot import forward_with_contact
from .io.container import load_container, save_container
from .io.mesh import FORMATS, TriangleMesh, read_mesh, write_mesh
from .kinematics import PoseState
from .model import forward
from .parts import PartSpec, separate
from .synth import synth_model, synthetic_population

logger = logging.getLogger("supr")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: not valid JSON ({exc})") from exc


def _vector(path, key):
    if path is None:
        return None
    data = _load_json(path)
    if isinstance(data, dict):
        if key not in data:
            raise InvalidArgumentError(f"{path}: missing key {key!r}")
        data = data[key]
    try:
        return np.asarray(data, dtype=np.float64).ravel()
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: {key} must be a list of numbers") from exc


def _pose(path, n_joints) -> PoseState:
    if path is None:
        return PoseState.rest(n_joints)
    data = _load_json(path)
    translation = np.zeros(3)
    if isinstance(data, dict):
        if "pose" not in data:
            raise InvalidArgumentError(f"{path}: missing key 'pose'")
        translation = np.asarray(data.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64)
        data = data["pose"]
    try:
        rot = np.asarray(data, dtype=np.float64).reshape(-1, 3)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: pose must be K axis-angle triples") from exc
    if rot.shape[0] != n_joints:
        raise InvalidArgumentError(f"{path}: pose has {rot.shape[0]} joints, model has {n_joints}")
    return PoseState(rot, translation)


def _weights(path, n):
    if path is None:
        return None
    w = _vector(path, "weights")
    if w.size != n:
        raise InvalidArgumentError(f"{path}: mask has {w.size} entries, model has {n} vertices")
    return w


def _components(text):
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad component list {text!r}") from exc
    if not counts:
        raise argparse.ArgumentTypeError("empty component list")
    return counts


def _existing(path):
    if not Path(path).is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return path


def _write_mesh_out(args, vertices, faces) -> None:
    fmt = args.format or (Path(args.out).suffix.lstrip(".").lower() if args.out else "obj")
    if fmt not in FORMATS:
        fmt = "obj"
    mesh = TriangleMesh(vertices, faces)
    if args.out:
        write_mesh(args.out, mesh, fmt)
    else:
        from .io.mesh import format_obj, format_ply

        sys.stdout.buffer.write(format_obj(mesh) if fmt == "obj" else format_ply(mesh))
        sys.stdout.flush()


def _emit_text(args, text: str) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    model = synth_model(
        args.seed,
        args.n_vertices,
        args.n_joints,
        args.n_shape,
        args.n_expr,
        full_size=args.full_size,
        foot_net=True if args.foot_net else None,
    )
    save_container(model, args.out)
    logger.info("wrote %s (N=%d, K=%d)", args.out, model.n_vertices, model.n_joints)
    return 0


def cmd_pose(args) -> int:
    model = load_container(args.model)
    pose = _pose(args.pose, model.n_joints)
    mesh = forward(model, _vector(args.shape, "betas"), pose, _vector(args.expr, "expression"))
    _write_mesh_out(args, mesh.vertices, mesh.faces)
    return 0


def cmd_foot_deform(args) -> int:
    model = load_container(args.model)
    pose = _pose(args.pose, model.n_joints)
    contact = {"left": None, "right": None}
    if args.contact is not None:
        data = _load_json(args.contact)
        if not isinstance(data, dict) or not set(data) <= {"left", "right"}:
            raise InvalidArgumentError(f"{args.contact}: contact file must map 'left'/'right' to flag lists")
        contact.update(data)
    mesh = forward_with_contact(
        model, _vector(args.shape, "betas"), pose, _vector(args.expr, "expression"), contact["left"], contact["right"]
    )
    _write_mesh_out(args, mesh.vertices, mesh.faces)
    return 0


def cmd_fit(args) -> int:
    model = load_container(args.model)
    target = read_mesh(args.target)
    problem = FitProblem(
        target.vertices,
        vertex_weights=_weights(args.mask, model.n_vertices),
        n_shape=args.components[-1] if args.components else None,
        free_expression=args.free_expression,
        max_iters=args.max_iters,
        tol=args.tol,
    )
    report = fit(model, problem)
    p = report.params
    if args.out:
        mesh = forward(model, p.beta, p.pose, p.psi)
        _write_mesh_out(args, mesh.vertices, mesh.faces)
    sys.stdout.write(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_separate(args) -> int:
    model = load_container(args.model)
    if Path(args.part).is_file():
        data = _load_json(args.part)
        try:
            part = PartSpec(str(data["name"]), np.asarray(data["vertices"], dtype=np.int64))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"{args.part}: part file needs 'name' and 'vertices'") from exc
    else:
        part = PartSpec.from_labels(model, args.part)
    result = separate(model, part)
    save_container(result.model, args.out)
    maps = {"part": result.name, "vertex_map": result.vertex_map.tolist(), "joint_map": result.joint_map.tolist()}
    sys.stdout.write(json.dumps(maps, sort_keys=True) + "\n")
    return 0


def cmd_eval(args) -> int:
    model = load_container(args.model)
    weights = _weights(args.mask, model.n_vertices)
    if args.self_test:
        population = synthetic_population(
            model, args.self_test, seed=args.seed, n_components=args.generating_components
        )
        targets = [verts for _, _, verts in population]
    else:
        targets = [read_mesh(t).vertices for t in args.targets]
    problems = [
        FitProblem(t, vertex_weights=weights, max_iters=args.max_iters, tol=args.tol) for t in targets
    ]
    table = shape_sweep(model, problems, args.components, jobs=args.jobs)
    _emit_text(args, table.to_csv())
    return 0


def cmd_validate(args) -> int:
    model = load_container(args.model)
    summary = {
        "kind": model.kind,
        "n_vertices": model.n_vertices,
        "n_joints": model.n_joints,
        "n_shape": model.n_shape,
        "n_expression": model.n_expression,
        "n_faces": int(model.faces.shape[0]),
        "pose_blocks": len(model.pose_blendshapes.blocks),
        "parts": sorted(model.part_specs),
        "foot_nets": sorted(model.foot_nets),
        "valid": True,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supr", description="Sparse factorized body model toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    def model_arg(p):
        p.add_argument("--model", required=True, type=_existing, help="model container file")

    def mesh_out(p, required=False):
        p.add_argument("--out", required=required, help="output mesh path (default: standard output)")
        p.add_argument("--format", choices=FORMATS, help="output mesh format (default: from --out suffix)")

    def params(p):
        p.add_argument("--pose", type=_existing, help="pose parameter file")
        p.add_argument("--shape", type=_existing, help="shape coefficient file")
        p.add_argument("--expr", type=_existing, help="expression coefficient file")

    def optimizer(p):
        p.add_argument("--max-iters", type=int, default=100)
        p.add_argument("--tol", type=float, default=1e-10)

    p = add("synth", cmd_synth, "write a synthetic model container")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    size = p.add_mutually_exclusive_group()
    size.add_argument("--full-size", action="store_true", help="10475 vertices, 75 joints")
    size.add_argument("--n-vertices", type=int, default=100)
    p.add_argument("--n-joints", type=int, default=5)
    p.add_argument("--n-shape", type=int)
    p.add_argument("--n-expr", type=int)
    p.add_argument("--foot-net", action="store_true", help="attach foot networks to a toy model")

    p = add("pose", cmd_pose, "evaluate the model for given parameters")
    model_arg(p)
    params(p)
    mesh_out(p)

    p = add("foot-deform", cmd_foot_deform, "evaluate the model with foot contact deformation")
    model_arg(p)
    params(p)
    p.add_argument("--contact", type=_existing, help="contact flag file")
    mesh_out(p)

    p = add("fit", cmd_fit, "fit parameters to a registration")
    model_arg(p)
    p.add_argument("target", type=_existing, help="target mesh (same topology as the model)")
    p.add_argument("--mask", type=_existing, help="per-vertex weight file")
    p.add_argument("--components", type=_components, help="number of free shape components")
    p.add_argument("--free-expression", action="store_true")
    optimizer(p)
    mesh_out(p)

    p = add("separate", cmd_separate, "separate a body part into its own container")
    model_arg(p)
    p.add_argument("--part", required=True, help="part label or part file")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "error versus number of shape components")
    model_arg(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--targets", nargs="+", type=_existing, help="target meshes")
    source.add_argument("--self-test", type=int, metavar="COUNT", help="fit COUNT targets drawn from the model")
    p.add_argument("--generating-components", type=int, help="shape components used by --self-test")
    p.add_argument("--components", type=_components, default=[2, 4, 8, 16])
    p.add_argument("--mask", type=_existing)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV output path (default: standard output)")
    optimizer(p)

    p = add("validate", cmd_validate, "check a container's invariants")
    model_arg(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s"
    )
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except SuprError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


run = main
