import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from supr.errors import InvalidArgumentError, MeshFormatError
from supr.io.mesh import TriangleMesh, format_obj, format_ply, parse_obj, parse_ply, read_mesh, write_mesh

TETRA_OBJ = b"""# tetrahedron
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def tetra():
    return parse_obj(TETRA_OBJ)


def test_obj_tetrahedron():
    m = tetra()
    assert m.vertices.shape == (4, 3) and m.faces.shape == (4, 3)
    np.testing.assert_array_equal(m.faces[0], [0, 2, 1])
    np.testing.assert_array_equal(m.vertices[3], [0, 0, 1])


def test_obj_with_texture_and_normal_indices():
    data = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1/1 2/1/1 3//1\n"
    m = parse_obj(data)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])


def test_obj_quad_is_fan_triangulated_and_negative_indices_resolve():
    data = b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -3 -1\n"
    m = parse_obj(data)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3], [0, 1, 3]])


@pytest.mark.parametrize(
    "data, line",
    [
        (b"v 0 0 0\nv 1 0\n", 2),
        (b"v 0 0 0\nv 1 0 x\n", 2),
        (b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n", 4),
        (b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 0\n", 4),
        (b"v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 9\n", 5),
        (b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 a\n", 4),
    ],
)
def test_obj_errors_report_line(data, line):
    with pytest.raises(MeshFormatError) as info:
        parse_obj(data)
    assert info.value.line == line
    assert info.value.category == "mesh-format"
    assert f"line {line}" in str(info.value)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_is_exact(binary):
    rng = np.random.default_rng(0)
    m = TriangleMesh(rng.normal(size=(4, 3)), tetra().faces, labels=[0, 1, 2, 5])
    back = parse_ply(format_ply(m, binary=binary))
    assert back.vertices.tobytes() == m.vertices.tobytes()
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(back.labels, m.labels)


def test_obj_round_trip_is_exact():
    rng = np.random.default_rng(1)
    m = TriangleMesh(rng.normal(size=(4, 3)) * 1e3, tetra().faces)
    back = parse_obj(format_obj(m))
    assert back.vertices.tobytes() == m.vertices.tobytes()
    np.testing.assert_array_equal(back.faces, m.faces)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.just(3)), elements=finite), st.data())
def test_round_trips_hold_for_any_finite_mesh(vertices, data):
    n = vertices.shape[0]
    n_faces = data.draw(st.integers(0, 6))
    faces = [data.draw(st.permutations(range(n)))[:3] for _ in range(n_faces)]
    m = TriangleMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))
    for back in (parse_obj(format_obj(m)), parse_ply(format_ply(m)), parse_ply(format_ply(m, binary=False))):
        assert back.vertices.tobytes() == m.vertices.tobytes()
        np.testing.assert_array_equal(back.faces, m.faces)


def test_ply_truncated_binary_reports_offset():
    data = format_ply(tetra())
    with pytest.raises(MeshFormatError) as info:
        parse_ply(data[:-5])
    assert info.value.offset is not None


def test_ply_header_errors_report_line():
    with pytest.raises(MeshFormatError) as info:
        parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nbogus\nend_header\n")
    assert info.value.line == 5
    with pytest.raises(MeshFormatError):
        parse_ply(b"not a ply")


def test_ply_ascii_malformed_record_reports_line():
    data = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1\n"
    with pytest.raises(MeshFormatError) as info:
        parse_ply(data)
    assert info.value.line == 9


def test_read_write_by_suffix(tmp_path):
    m = tetra()
    for name in ("a.obj", "a.ply"):
        write_mesh(tmp_path / name, m)
        back = read_mesh(tmp_path / name)
        np.testing.assert_array_equal(back.vertices, m.vertices)
    with pytest.raises(InvalidArgumentError):
        write_mesh(tmp_path / "a.stl", m)


def test_mesh_rejects_degenerate_faces():
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(np.zeros((3, 3)), [[0, 0, 1]])
    with pytest.raises(MeshFormatError):
        parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\n")
