import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from supr.cli import main
from supr.parts import FallbackRegressorWarning
from supr.fitting import FitProblem, fit
from supr.foot import forward_with_contact
from supr.io.container import encode_container, load_container, save_container
from supr.io.mesh import TriangleMesh, format_obj, format_ply, read_mesh, write_mesh
from supr.kinematics import PoseState
from supr.model import forward
from supr.parts import PartSpec, separate
from supr.synth import synth_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "toy.supr"), "--seed", "0", "--n-vertices", "120", "--n-joints", "8", "--foot-net"]) == 0
    rng = np.random.default_rng(0)
    model = load_container(d / "toy.supr")
    pose = {"pose": (0.3 * rng.normal(size=(model.n_joints, 3))).tolist(), "translation": [0.1, -0.2, 0.3]}
    (d / "pose.json").write_text(json.dumps(pose))
    (d / "shape.json").write_text(json.dumps({"betas": rng.normal(size=model.n_shape).tolist()}))
    (d / "expr.json").write_text(json.dumps([0.5, -0.5]))
    return d


def params(d):
    model = load_container(d / "toy.supr")
    p = json.loads((d / "pose.json").read_text())
    pose = PoseState(np.array(p["pose"]), np.array(p["translation"]))
    beta = np.array(json.loads((d / "shape.json").read_text())["betas"])
    psi = np.array(json.loads((d / "expr.json").read_text()))
    return model, beta, pose, psi


def test_synth_matches_library_and_is_deterministic(workdir, tmp_path):
    assert (workdir / "toy.supr").read_bytes() == encode_container(synth_model(0, 120, 8, foot_net=True))
    assert main(["synth", "--out", str(tmp_path / "again.supr"), "--n-vertices", "120", "--n-joints", "8", "--foot-net"]) == 0
    assert (tmp_path / "again.supr").read_bytes() == (workdir / "toy.supr").read_bytes()


def test_pose_golden_output(workdir, capsysbinary):
    model, beta, pose, psi = params(workdir)
    args = ["pose", "--model", str(workdir / "toy.supr"), "--pose", str(workdir / "pose.json"),
            "--shape", str(workdir / "shape.json"), "--expr", str(workdir / "expr.json")]  # fmt: skip
    assert main(args) == 0
    expected = forward(model, beta, pose, psi)
    assert capsysbinary.readouterr().out == format_obj(TriangleMesh(expected.vertices, expected.faces))


def test_pose_writes_ply_by_suffix(workdir, tmp_path):
    model, beta, pose, psi = params(workdir)
    out = tmp_path / "posed.ply"
    assert main(["pose", "--model", str(workdir / "toy.supr"), "--pose", str(workdir / "pose.json"), "--out", str(out)]) == 0
    expected = forward(model, None, pose)
    assert out.read_bytes() == format_ply(TriangleMesh(expected.vertices, expected.faces))


def test_foot_deform_golden_output(workdir, tmp_path, capsysbinary):
    model, beta, pose, psi = params(workdir)
    net = model.foot_nets["left"]
    nf = net.foot_vertex_indices.size
    flags = [1] * (nf // 2) + [0] * (nf - nf // 2)
    (tmp_path / "contact.json").write_text(json.dumps({"left": flags}))
    args = ["foot-deform", "--model", str(workdir / "toy.supr"), "--pose", str(workdir / "pose.json"),
            "--shape", str(workdir / "shape.json"), "--contact", str(tmp_path / "contact.json")]  # fmt: skip
    assert main(args) == 0
    expected = forward_with_contact(model, beta, pose, None, flags, None)
    assert capsysbinary.readouterr().out == format_obj(TriangleMesh(expected.vertices, expected.faces))


def test_fit_report_matches_library(workdir, tmp_path, capsys):
    model, beta, pose, psi = params(workdir)
    target = forward(model, beta, pose)
    write_mesh(tmp_path / "target.ply", TriangleMesh(target.vertices, target.faces))
    out = tmp_path / "fitted.obj"
    assert main(["fit", "--model", str(workdir / "toy.supr"), str(tmp_path / "target.ply"), "--max-iters", "40", "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    expected = fit(model, FitProblem(read_mesh(tmp_path / "target.ply").vertices, max_iters=40)).as_dict()
    assert report == json.loads(json.dumps(expected))
    assert report["v2v"] < 1e-6
    fitted = read_mesh(out)
    np.testing.assert_allclose(fitted.vertices, target.vertices, atol=1e-5)
    # a report can be fed back as a pose file
    (tmp_path / "report.json").write_text(json.dumps(report))
    assert main(["pose", "--model", str(workdir / "toy.supr"), "--pose", str(tmp_path / "report.json"),
                 "--shape", str(tmp_path / "report.json"), "--out", str(tmp_path / "again.obj")]) == 0  # fmt: skip
    np.testing.assert_array_equal(read_mesh(tmp_path / "again.obj").vertices, fitted.vertices)


def test_separate_then_pose_matches_full_model(tmp_path, capsys):
    full_path = tmp_path / "full.supr"
    model = synth_model(0, full_size=True)
    save_container(model, full_path)
    assert main(["separate", "--model", str(full_path), "--part", "head", "--out", str(tmp_path / "head.supr")]) == 0
    maps = json.loads(capsys.readouterr().out)
    part = load_container(tmp_path / "head.supr")
    assert part.kind == "part" and maps["part"] == "head"
    assert (tmp_path / "head.supr").read_bytes() == encode_container(separate(model, PartSpec.from_labels(model, "head")).model)
    rng = np.random.default_rng(3)
    full_pose = np.zeros((model.n_joints, 3))
    jm = np.array(maps["joint_map"])
    full_pose[jm] = 0.3 * rng.normal(size=(jm.size, 3))
    (tmp_path / "pose.json").write_text(json.dumps({"pose": full_pose[jm].tolist()}))
    assert main(["pose", "--model", str(tmp_path / "head.supr"), "--pose", str(tmp_path / "pose.json"), "--out", str(tmp_path / "head.ply")]) == 0
    expected = forward(model, None, PoseState(full_pose)).vertices[np.array(maps["vertex_map"])]
    np.testing.assert_allclose(read_mesh(tmp_path / "head.ply").vertices, expected, atol=1e-10)


def test_separate_accepts_a_part_file(workdir, tmp_path, capsys):
    model = load_container(workdir / "toy.supr")
    spec = {"name": "custom", "vertices": list(range(1, model.n_vertices))}
    (tmp_path / "part.json").write_text(json.dumps(spec))
    with pytest.warns(FallbackRegressorWarning):
        code = main(["separate", "--model", str(workdir / "toy.supr"), "--part", str(tmp_path / "part.json"), "--out", str(tmp_path / "p.supr")])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["vertex_map"] == spec["vertices"]


def test_eval_self_test_writes_non_increasing_table(tmp_path, capsys):
    save_container(synth_model(1, 150, 6, n_shape=16), tmp_path / "m.supr")
    args = ["eval", "--model", str(tmp_path / "m.supr"), "--self-test", "3", "--generating-components", "4", "--components", "1,2,4"]
    assert main(args) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["component_count"]) for r in rows] == [1, 2, 4]
    means = [float(r["mean_mabs"]) for r in rows]
    assert all(b <= a for a, b in zip(means, means[1:]))
    assert means[-1] < 1e-3


def test_validate_summary(workdir, capsys):
    assert main(["validate", "--model", str(workdir / "toy.supr")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["valid"] and summary["n_vertices"] == 120 and summary["foot_nets"] == sorted(load_container(workdir / "toy.supr").foot_nets)


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["nonsense"],
        ["pose"],
        ["pose", "--model", "/no/such/file"],
        ["synth", "--out", "x", "--full-size", "--n-vertices", "10"],
        ["eval", "--model", "MODEL"],
        ["eval", "--model", "MODEL", "--self-test", "2", "--components", "a,b"],
        ["eval", "--model", "MODEL", "--self-test", "2", "--jobs", "0"],
    ],
)
def test_usage_errors_exit_2(workdir, argv):
    argv = [str(workdir / "toy.supr") if a == "MODEL" else a for a in argv]
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_compute_errors_exit_1_with_category(workdir, tmp_path, capsys):
    (tmp_path / "bad_pose.json").write_text(json.dumps({"pose": [[0, 0, 0]]}))
    assert main(["pose", "--model", str(workdir / "toy.supr"), "--pose", str(tmp_path / "bad_pose.json")]) == 1
    assert "error[invalid-argument]" in capsys.readouterr().err

    data = bytearray((workdir / "toy.supr").read_bytes())
    data[-70] ^= 0xFF
    (tmp_path / "corrupt.supr").write_bytes(bytes(data))
    assert main(["validate", "--model", str(tmp_path / "corrupt.supr")]) == 1
    assert "error[checksum]" in capsys.readouterr().err

    (tmp_path / "bad.obj").write_text("v 0 0\n")
    assert main(["fit", "--model", str(workdir / "toy.supr"), str(tmp_path / "bad.obj")]) == 1
    assert "error[mesh-format]" in capsys.readouterr().err

    assert main(["separate", "--model", str(workdir / "toy.supr"), "--part", "no-such-label", "--out", str(tmp_path / "x.supr")]) == 1
    assert "error[" in capsys.readouterr().err
    assert not (tmp_path / "x.supr").exists()


def test_module_entry_point(workdir):
    proc = subprocess.run(
        [sys.executable, "-m", "supr", "validate", "--model", str(workdir / "toy.supr")], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["n_joints"] == 8
